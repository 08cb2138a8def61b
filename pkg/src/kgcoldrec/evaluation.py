"""Leave-one-out evaluation of cold-item recommendation: metrics, runs, sweeps, ablations."""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .errors import ConfigError, KgRecError
from .gateway import Gateway
from .ingest import CorpusSplit, UserSequence
from .recommender import MODES, GenerationRecord, RankedRecommendation, RecommendConfig, TitleIndex, recommend
from .retrieval import RetrievalConfig, UserQuery
from .store import KnowledgeBase

logger = logging.getLogger(__name__)

SWEEP_HEADER = ["threshold", "recall_at_k", "ndcg_at_k", "hallucination_rate", "mean_pool_size"]


@dataclass
class EvalConfig:
    k: int = 10
    runs: int = 1
    seed: int = 0
    mode: str = "full"
    lambda_sweep: list[float] | None = None
    max_users: int | None = None

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode: {self.mode}")


@dataclass
class UserResult:
    user_id: str
    target: str
    run: int
    hit_rank: int | None
    recall: int
    ndcg: float
    ood_count: int
    entries_count: int
    pool_size: int = 0
    flags: list[str] = field(default_factory=list)


@dataclass
class EvalResult:
    per_user: list[UserResult]
    aggregate: dict
    records: list[GenerationRecord] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.aggregate, indent=2, sort_keys=True) + "\n"


def score_user(rec: RankedRecommendation, target: str, k: int) -> tuple[int, float, int | None]:
    """Single-target recall and binary-gain NDCG. Out-of-domain entries keep their rank."""
    for entry in rec.entries[:k]:
        if entry.matched_item_id == target:
            return 1, 1.0 / math.log2(entry.rank + 1), entry.rank
    return 0, 0.0, None


def _query(seq: UserSequence, index: TitleIndex) -> UserQuery:
    return UserQuery([(i, index.title(i)) for i in seq.history], user_id=seq.user_id)


def _one_user(seq, kb, gateway, retrieval, rec_config, mode, seed, index, k, run):
    try:
        record = recommend(_query(seq, index), kb, gateway, retrieval, rec_config, mode, seed, index)
    except KgRecError as exc:
        # a failed user is a miss, never an abort
        stage = getattr(exc, "stage", type(exc).__name__)
        logger.warning("user %s failed at %s: %s", seq.user_id, stage, exc)
        empty = RankedRecommendation([], k)
        record = GenerationRecord(seq.user_id, mode, ("", ""), "", empty, flags=[f"error:{stage}"])
    recall, ndcg, rank = score_user(record.recommendation, seq.target, k)
    result = UserResult(seq.user_id, seq.target, run, rank, recall, ndcg, record.ood_count,
                        len(record.recommendation.entries), record.pool_size, list(record.flags))
    return result, record


def _mean(values) -> float:
    values = list(values)
    return sum(values) / len(values) if values else 0.0


def _aggregate(per_run: list[list[UserResult]], config: EvalConfig, retrieval: RetrievalConfig) -> dict:
    flat = [u for run in per_run for u in run]
    recall_means = [_mean(u.recall for u in run) for run in per_run]
    ndcg_means = [_mean(u.ndcg for u in run) for run in per_run]
    entries = sum(u.entries_count for u in flat)
    rate = sum(u.ood_count for u in flat) / entries if entries else 0.0
    recall, ndcg = _mean(recall_means), _mean(ndcg_means)
    flags: dict[str, int] = {}
    for u in flat:
        for f in u.flags:
            flags[f] = flags.get(f, 0) + 1
    return {
        "mode": config.mode,
        "k": config.k,
        "runs": config.runs,
        "seed": config.seed,
        "lambda": retrieval.lam,
        "users": len(per_run[0]) if per_run else 0,
        "recall_at_k": recall,
        "ndcg_at_k": ndcg,
        "hallucination_rate": rate,
        "per_run_means": {"recall_at_k": recall_means, "ndcg_at_k": ndcg_means},
        "stddev": {"recall_at_k": statistics.pstdev(recall_means), "ndcg_at_k": statistics.pstdev(ndcg_means)},
        "mean_pool_size": _mean(u.pool_size for u in flat),
        "failures": sum(1 for u in flat if any(f.startswith("error:") or f == "unparseable" for f in u.flags)),
        "flags": dict(sorted(flags.items())),
        "percent": {
            "recall_at_k": f"{100 * recall:.2f}",
            "ndcg_at_k": f"{100 * ndcg:.2f}",
            "hallucination_rate": f"{100 * rate:.2f}",
        },
    }


def run_eval(
    split: CorpusSplit,
    kb: KnowledgeBase | None,
    gateway: Gateway,
    retrieval: RetrievalConfig | None = None,
    rec_config: RecommendConfig | None = None,
    config: EvalConfig | None = None,
    out_dir=None,
    audit: bool = False,
) -> EvalResult:
    """Evaluate every cold-test sequence for ``config.runs`` runs."""
    config = config or EvalConfig()
    config.validate()
    retrieval = retrieval or RetrievalConfig()
    retrieval.validate()
    rec_config = replace(rec_config or RecommendConfig(), k=config.k)
    if config.mode != "wo_GR" and kb is None:
        raise ConfigError(f"mode {config.mode} needs a knowledge base")
    users = sorted(split.cold_test, key=lambda s: s.user_id)
    if config.max_users is not None:
        users = users[: config.max_users]
    if not users:
        raise KgRecError("split has no cold-test sequences")
    index = TitleIndex({i: m.title for i, m in split.catalog.items()})
    snap = kb.snapshot() if kb is not None else None

    per_run: list[list[UserResult]] = []
    records: list[GenerationRecord] = []
    for run in range(config.runs):
        seed = config.seed + run
        with ThreadPoolExecutor(max_workers=gateway.max_inflight) as pool:
            outcomes = list(pool.map(
                lambda seq: _one_user(seq, snap, gateway, retrieval, rec_config, config.mode, seed, index,
                                      config.k, run),
                users,
            ))
        per_run.append([r for r, _ in outcomes])
        records.extend(rec for _, rec in outcomes)
        logger.info("run %d: recall@%d=%.4f", run, config.k, _mean(r.recall for r, _ in outcomes))

    result = EvalResult([u for run in per_run for u in run], _aggregate(per_run, config, retrieval), records)
    if out_dir is not None:
        write_outputs(result, out_dir, audit)
    return result


def write_outputs(result: EvalResult, out_dir, audit: bool = False) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.json").write_text(result.to_json(), encoding="utf-8")
    with open(out / "per_user.jsonl", "w", encoding="utf-8") as fh:
        for u in result.per_user:
            fh.write(json.dumps(asdict(u), sort_keys=True) + "\n")
    with open(out / "records.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.records:
            fh.write(rec.to_json(audit) + "\n")
    if audit:
        traces = out / "traces"
        traces.mkdir(exist_ok=True)
        for run_idx, rec in _with_runs(result):
            if rec.trace is not None:
                path = traces / f"run{run_idx}_{rec.user_id}.json"
                path.write_text(json.dumps(rec.trace.to_dict(), indent=1, sort_keys=True), encoding="utf-8")


def _with_runs(result: EvalResult):
    return ((u.run, rec) for u, rec in zip(result.per_user, result.records))


def lambda_sweep(
    split: CorpusSplit,
    kb: KnowledgeBase,
    gateway: Gateway,
    thresholds: list[float],
    retrieval: RetrievalConfig | None = None,
    rec_config: RecommendConfig | None = None,
    config: EvalConfig | None = None,
    out_dir=None,
) -> dict:
    """One run_eval per threshold; everything else held fixed."""
    if not thresholds:
        raise ConfigError("no thresholds given")
    for t in thresholds:
        if not 0 <= t <= 10:
            raise ConfigError(f"threshold {t} outside [0, 10]")
    retrieval = retrieval or RetrievalConfig()
    config = config or EvalConfig()
    rows = []
    for t in thresholds:
        res = run_eval(split, kb, gateway, replace(retrieval, lam=float(t)), rec_config, config)
        agg = res.aggregate
        rows.append({"threshold": float(t), "recall_at_k": agg["recall_at_k"], "ndcg_at_k": agg["ndcg_at_k"],
                     "hallucination_rate": agg["hallucination_rate"], "mean_pool_size": agg["mean_pool_size"]})
    best = max(rows, key=lambda r: (r["recall_at_k"], r["ndcg_at_k"], -r["threshold"]))
    summary = {"rows": rows, "best_threshold": best["threshold"], "k": config.k, "mode": config.mode}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=SWEEP_HEADER, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
        (out / "sweep_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                                encoding="utf-8")
    return summary


def ablation(
    split: CorpusSplit,
    kb: KnowledgeBase | None,
    gateway: Gateway,
    retrieval: RetrievalConfig | None = None,
    rec_config: RecommendConfig | None = None,
    config: EvalConfig | None = None,
    modes: tuple[str, ...] = MODES,
    out_dir=None,
) -> list[dict]:
    """Same protocol under each mode; one comparison row per mode."""
    config = config or EvalConfig()
    rows = []
    for mode in modes:
        sub = Path(out_dir) / mode if out_dir is not None else None
        res = run_eval(split, kb if mode != "wo_GR" else None, gateway, retrieval, rec_config,
                       replace(config, mode=mode), sub)
        agg = res.aggregate
        rows.append({"mode": mode, "users": agg["users"], "recall_at_k": agg["recall_at_k"],
                     "ndcg_at_k": agg["ndcg_at_k"], "hallucination_rate": agg["hallucination_rate"]})
    if out_dir is not None:
        (Path(out_dir) / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n",
                                                     encoding="utf-8")
    return rows


def format_table(rows: list[dict], columns: list[str]) -> str:
    def cell(v):
        return f"{100 * v:.2f}" if isinstance(v, float) and v <= 1 and not isinstance(v, bool) else str(v)
    table = [columns] + [[cell(r[c]) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(columns))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in table)
