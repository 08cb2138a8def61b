"""Command-line entry point: ``kgcoldrec <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from filelock import FileLock, Timeout

from . import __version__
from .builder import add_item, build_kb
from .config import RunConfig, load_config, override
from .errors import BackendError, ConfigError, DataError, KgRecError, PipelineError, StoreError
from .evaluation import ablation, format_table, lambda_sweep, run_eval
from .gateway import Gateway, create_gateway
from .ingest import CorpusError, ItemMetadata, load_corpus, load_split, prepare_split, read_catalog, save_split
from .recommender import MODES, TitleIndex, recommend
from .retrieval import UserQuery
from .store import KnowledgeBase, format_stats, stats

logger = logging.getLogger("kgcoldrec")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _backend(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=["http_openai_compatible", "scripted", "hash_synthetic"])
    p.add_argument("--fixtures", help="fixture directory for the scripted backend")
    p.add_argument("--strict-fixtures", action="store_true", default=None)
    p.add_argument("--record-fixtures", help="record every chat response into this directory")
    p.add_argument("--base-url")
    p.add_argument("--model")
    p.add_argument("--embed-model")
    p.add_argument("--api-key-env")
    p.add_argument("--max-inflight", type=int)


def _retrieval(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--theta-pool", type=int)
    p.add_argument("--theta-top", type=int)
    p.add_argument("--max-hops", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--temperature", type=float)


def _evaluation(p: argparse.ArgumentParser) -> None:
    p.add_argument("--runs", type=int)
    p.add_argument("--audit", action="store_true")
    p.add_argument("--max-users", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kgcoldrec", description="Knowledge-graph retrieval for cold-start recommendation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="load a corpus, filter, designate cold items, split")
    _common(p)
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--format", choices=["amazon_jsonl", "generic_jsonl"])
    p.add_argument("--threshold", type=int)
    p.add_argument("--fraction", type=float)
    p.add_argument("--sample-size", type=int)

    p = sub.add_parser("build", help="build the knowledge base from a catalog")
    _common(p)
    _backend(p)
    p.add_argument("--corpus", help="split directory, catalog.jsonl, or raw corpus")
    p.add_argument("--kb")
    p.add_argument("--journal", help="resume journal (default: <kb>.journal.jsonl)")

    p = sub.add_parser("add-item", help="insert one item into an existing knowledge base")
    _common(p)
    _backend(p)
    p.add_argument("--kb")
    p.add_argument("--item", required=True, help="item metadata as a JSON file or inline JSON object")

    p = sub.add_parser("recommend", help="recommend for one interaction history")
    _common(p)
    _backend(p)
    _retrieval(p)
    p.add_argument("--kb")
    p.add_argument("--corpus", help="optional split directory whose catalog supplies titles")
    p.add_argument("--user-history", required=True, help="comma-separated item ids (or titles), oldest first")
    p.add_argument("--user-id", default="cli")
    p.add_argument("--trace", action="store_true", help="include the retrieval trace in the output")

    for name, helptext in (("eval", "run the leave-one-out evaluation"),
                           ("sweep", "evaluate over several edge-score thresholds"),
                           ("ablation", "compare the full, wo_R and wo_GR settings")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        _backend(p)
        _retrieval(p)
        _evaluation(p)
        p.add_argument("--corpus", help="split directory written by ingest")
        p.add_argument("--kb")
        p.add_argument("--out")
        if name == "sweep":
            p.add_argument("--thresholds", default="0,3,5,7,9,10", help="comma-separated thresholds")

    p = sub.add_parser("stats", help="print the entity-type histogram and edge matrix")
    _common(p)
    p.add_argument("--kb")
    p.add_argument("--out")
    return parser


def resolve(args) -> RunConfig:
    """Defaults < config file < flags."""
    cfg = load_config(getattr(args, "config", None))
    a = vars(args)
    for name in ("corpus", "kb", "out"):
        override(cfg, "paths", name, a.get(name))
    override(cfg, "", "seed", a.get("seed"))
    cfg.eval.seed = cfg.seed
    for flag, field_ in (("backend", "kind"), ("base_url", "base_url"), ("model", "model_name"),
                         ("embed_model", "embed_model_name"), ("api_key_env", "api_key_env"),
                         ("max_inflight", "max_inflight"), ("strict_fixtures", "strict_fixtures")):
        override(cfg.backend, "", field_, a.get(flag))
    if a.get("fixtures"):
        cfg.backend.fixture_path = a["fixtures"]
        if a.get("backend") is None:
            cfg.backend.kind = "scripted"
    for flag in ("format", "threshold", "fraction", "sample_size"):
        override(cfg.ingest, "", flag, a.get(flag))
    for flag in ("lam", "theta_pool", "theta_top", "max_hops"):
        override(cfg.retrieval, "", flag, a.get(flag))
    override(cfg.recommend, "", "temperature", a.get("temperature"))
    override(cfg.eval, "", "k", a.get("k"))
    override(cfg.eval, "", "runs", a.get("runs"))
    override(cfg.eval, "", "mode", a.get("mode"))
    override(cfg.eval, "", "max_users", a.get("max_users"))
    cfg.recommend.k = cfg.eval.k
    if a.get("command") == "sweep":
        try:
            cfg.eval.lambda_sweep = [float(t) for t in a["thresholds"].split(",") if t.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad --thresholds: {exc}") from exc
    cfg.validate()
    return cfg


def _need(value, flag: str) -> str:
    if not value:
        raise ConfigError(f"{flag} is required")
    return value


def _gateway(cfg: RunConfig, args) -> Gateway:
    return create_gateway(cfg.backend, record=bool(getattr(args, "record_fixtures", None)))


def _finish_recording(gateway: Gateway, args) -> None:
    target = getattr(args, "record_fixtures", None)
    if target:
        paths = gateway.chat_backend.dump(target)
        logger.info("recorded fixtures into %s (%d files)", target, len(paths))


def _load_kb(path: str, gateway: Gateway | None) -> KnowledgeBase:
    root = Path(path)
    if not root.exists():
        raise StoreError(f"knowledge base not found: {root}")
    return KnowledgeBase.load(root, gateway.embed_model_id if gateway is not None else None)


def _writer_lock(kb_path: str) -> FileLock:
    return FileLock(str(Path(kb_path).with_name(Path(kb_path).name + ".lock")), timeout=30)


def _load_catalog(path: str, fmt: str) -> dict[str, ItemMetadata]:
    p = Path(path)
    if not p.exists():
        raise CorpusError(f"path does not exist: {p}")
    if p.is_dir() and (p / "catalog.jsonl").exists():
        return read_catalog(p / "catalog.jsonl")
    if p.name == "catalog.jsonl":
        return read_catalog(p)
    return load_corpus(p, fmt).catalog


def _echo(cfg: RunConfig) -> None:
    print("resolved config:", json.dumps(cfg.to_dict(), sort_keys=True), file=sys.stderr)


# -- commands -------------------------------------------------------------

def cmd_ingest(args, cfg: RunConfig) -> int:
    corpus = load_corpus(_need(cfg.paths.corpus, "--corpus"), cfg.ingest.format)
    split = prepare_split(corpus, cfg.ingest.threshold, cfg.ingest.fraction, cfg.ingest.sample_size, cfg.seed)
    out = Path(_need(cfg.paths.out, "--out"))
    save_split(split, out)
    cfg.write(out)
    counts = split.manifest()["counts"]
    counts["malformed_lines"] = corpus.report.skipped
    counts["stubbed_items"] = corpus.report.stubbed_items
    width = max(len(k) for k in counts)
    for key, value in counts.items():
        print(f"{key:<{width}}  {value}")
    return EXIT_OK


def cmd_build(args, cfg: RunConfig) -> int:
    kb_path = _need(cfg.paths.kb, "--kb")
    catalog = _load_catalog(_need(cfg.paths.corpus, "--corpus"), cfg.ingest.format)
    gateway = _gateway(cfg, args)
    journal = args.journal or str(Path(kb_path).with_name(Path(kb_path).name + ".journal.jsonl"))
    try:
        with _writer_lock(kb_path):
            kb = _load_kb(kb_path, gateway) if Path(kb_path, "manifest.json").exists() else None
            kb, report = build_kb(catalog, gateway, kb, journal_path=journal)
            kb.save(kb_path)
            Path(kb_path, "build_report.json").write_text(
                json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
            cfg.write(kb_path)
    finally:
        _finish_recording(gateway, args)
    print(f"items ok {report.items_ok}, skipped {report.items_skipped}, failed {report.items_failed}; "
          f"entities {len(kb.entities)}, relations {kb.relation_count}; llm calls {report.llm_calls}")
    if report.failed:
        print("error: extraction failure ratio above the ceiling", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def _parse_item(raw: str) -> ItemMetadata:
    p = Path(raw)
    text = p.read_text(encoding="utf-8") if not raw.lstrip().startswith("{") and p.exists() else raw
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"--item is neither a JSON file nor a JSON object: {exc}") from exc
    if not isinstance(data, dict) or not data.get("item_id"):
        raise CorpusError("item metadata needs an item_id")
    return ItemMetadata.from_dict(data)


def cmd_add_item(args, cfg: RunConfig) -> int:
    kb_path = _need(cfg.paths.kb, "--kb")
    meta = _parse_item(args.item)
    gateway = _gateway(cfg, args)
    try:
        with _writer_lock(kb_path):
            kb = _load_kb(kb_path, gateway)
            report = add_item(meta, gateway, kb, Path(kb_path).with_name(Path(kb_path).name + ".journal.jsonl"))
            kb.save(kb_path)
            cfg.write(kb_path)
    finally:
        _finish_recording(gateway, args)
    print(json.dumps({"item_id": meta.item_id, **report.as_dict()}, sort_keys=True))
    return EXIT_OK


def cmd_recommend(args, cfg: RunConfig) -> int:
    gateway = _gateway(cfg, args)
    mode = cfg.eval.mode
    kb = _load_kb(cfg.paths.kb, gateway) if cfg.paths.kb else None
    if cfg.paths.corpus:
        index = TitleIndex({i: m.title for i, m in _load_catalog(cfg.paths.corpus, cfg.ingest.format).items()})
    elif kb is not None:
        index = TitleIndex.from_kb(kb)
    else:
        raise ConfigError("--kb or --corpus is required")
    history = []
    for token in (t.strip() for t in args.user_history.split(",")):
        if not token:
            continue
        if token in index:
            history.append((token, index.title(token)))
        else:
            history.append((index.exact.get(token, token), token))
    if not history:
        raise ConfigError("--user-history is empty")
    try:
        record = recommend(UserQuery(history, user_id=args.user_id), kb, gateway, cfg.retrieval, cfg.recommend,
                           mode, cfg.seed, index)
    finally:
        _finish_recording(gateway, args)
    out = record.to_dict()
    if args.trace and record.trace is not None:
        out["trace"] = record.trace.to_dict()
    print(json.dumps(out, indent=2, sort_keys=True, ensure_ascii=False))
    return EXIT_OK


def _eval_inputs(cfg: RunConfig, gateway: Gateway):
    split = load_split(_need(cfg.paths.corpus, "--corpus"))
    kb = None
    if cfg.eval.mode != "wo_GR" or cfg.paths.kb:
        kb = _load_kb(_need(cfg.paths.kb, "--kb"), gateway)
    return split, kb


def cmd_eval(args, cfg: RunConfig) -> int:
    gateway = _gateway(cfg, args)
    out = Path(_need(cfg.paths.out, "--out"))
    split, kb = _eval_inputs(cfg, gateway)
    try:
        result = run_eval(split, kb, gateway, cfg.retrieval, cfg.recommend, cfg.eval, out, audit=args.audit)
    finally:
        _finish_recording(gateway, args)
    cfg.write(out)
    agg = result.aggregate
    print(f"mode {agg['mode']}  users {agg['users']}  runs {agg['runs']}")
    print(f"Recall@{agg['k']} {agg['percent']['recall_at_k']}%  NDCG@{agg['k']} {agg['percent']['ndcg_at_k']}%  "
          f"hallucination {agg['percent']['hallucination_rate']}%  failures {agg['failures']}")
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig) -> int:
    gateway = _gateway(cfg, args)
    out = Path(_need(cfg.paths.out, "--out"))
    split, kb = _eval_inputs(cfg, gateway)
    try:
        summary = lambda_sweep(split, kb, gateway, cfg.eval.lambda_sweep, cfg.retrieval, cfg.recommend, cfg.eval,
                               out)
    finally:
        _finish_recording(gateway, args)
    cfg.write(out)
    print(format_table(summary["rows"], ["threshold", "recall_at_k", "ndcg_at_k", "hallucination_rate",
                                         "mean_pool_size"]))
    print(f"best threshold: {summary['best_threshold']}")
    return EXIT_OK


def cmd_ablation(args, cfg: RunConfig) -> int:
    gateway = _gateway(cfg, args)
    out = Path(_need(cfg.paths.out, "--out"))
    split = load_split(_need(cfg.paths.corpus, "--corpus"))
    kb = _load_kb(_need(cfg.paths.kb, "--kb"), gateway)
    try:
        rows = ablation(split, kb, gateway, cfg.retrieval, cfg.recommend, cfg.eval, out_dir=out)
    finally:
        _finish_recording(gateway, args)
    cfg.write(out)
    print(format_table(rows, ["mode", "users", "recall_at_k", "ndcg_at_k", "hallucination_rate"]))
    return EXIT_OK


def cmd_stats(args, cfg: RunConfig) -> int:
    kb = _load_kb(_need(cfg.paths.kb, "--kb"), None)
    st = stats(kb)
    print(format_stats(st))
    if cfg.paths.out:
        out = Path(cfg.paths.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stats.json").write_text(json.dumps(st.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        cfg.write(out)
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest, "build": cmd_build, "add-item": cmd_add_item, "recommend": cmd_recommend,
    "eval": cmd_eval, "sweep": cmd_sweep, "ablation": cmd_ablation, "stats": cmd_stats,
}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, PipelineError):
        return exit_code(exc.cause)
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, BackendError):
        return EXIT_BACKEND
    return EXIT_DATA


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        _echo(cfg)
        return COMMANDS[args.command](args, cfg)
    except (KgRecError, Timeout) as exc:
        if isinstance(exc, Timeout):
            exc = DataError(f"knowledge base is locked by another writer ({exc.lock_file})")
        # ingest errors are usage-level failures of the command
        code = EXIT_CONFIG if args.command == "ingest" else exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
