"""Corpus loading, k-core filtering, cold-item designation and the evaluation split."""

from __future__ import annotations

import gzip
import html
import json
import logging
import math
import random
import re
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .errors import CorpusError
from .text import collapse_ws

logger = logging.getLogger(__name__)

MAX_REVIEW_SNIPPETS = 5
MAX_REVIEW_CHARS = 2000
MALFORMED_CEILING = 0.10
FORMATS = ("amazon_jsonl", "generic_jsonl")

_TAG = re.compile(r"<[^>]+>")


@dataclass(frozen=True)
class RawInteraction:
    user_id: str
    item_id: str
    timestamp: int
    review_text: str | None = None
    rating: float | None = None

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise ValueError("user_id and item_id must be non-empty")
        if self.timestamp < 0:
            raise ValueError("timestamp must be >= 0")


@dataclass
class ItemMetadata:
    item_id: str
    title: str
    description: str = ""
    attributes: list[tuple[str, str]] = field(default_factory=list)
    review: str = ""

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "title": self.title,
            "description": self.description,
            "attributes": [list(pair) for pair in self.attributes],
            "review": self.review,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ItemMetadata":
        attrs = data.get("attributes") or []
        if isinstance(attrs, dict):
            attrs = list(attrs.items())
        return cls(
            item_id=str(data["item_id"]),
            title=clean_text(data.get("title") or "") or str(data["item_id"]),
            description=clean_text(data.get("description") or ""),
            attributes=[(str(k), str(v)) for k, v in attrs],
            review=data.get("review") or "",
        )


@dataclass
class UserSequence:
    user_id: str
    items: list[str]
    split: str = "train"  # train | cold_test

    @property
    def history(self) -> list[str]:
        return self.items[:-1]

    @property
    def target(self) -> str:
        return self.items[-1]


@dataclass
class LoadReport:
    lines: int = 0
    skipped: int = 0
    meta_lines: int = 0
    meta_skipped: int = 0
    stubbed_items: int = 0


@dataclass
class Corpus:
    interactions: list[RawInteraction]
    catalog: dict[str, ItemMetadata]
    report: LoadReport

    def __iter__(self):
        # allows `interactions, catalog, report = load_corpus(...)`
        return iter((self.interactions, self.catalog, self.report))


@dataclass
class CorpusSplit:
    sequences: list[UserSequence]
    cold_items: set[str]
    catalog: dict[str, ItemMetadata]
    filter_threshold: int
    seed: int = 0
    fraction: float = 0.1
    sample_size: int = 500
    interaction_count: int = 0

    @property
    def cold_test(self) -> list[UserSequence]:
        return [s for s in self.sequences if s.split == "cold_test"]

    @property
    def train(self) -> list[UserSequence]:
        return [s for s in self.sequences if s.split == "train"]

    def manifest(self) -> dict:
        cold_test = self.cold_test
        return {
            "seed": self.seed,
            "threshold": self.filter_threshold,
            "fraction": self.fraction,
            "sample_size": self.sample_size,
            "counts": {
                "interactions": self.interaction_count,
                "users": len(self.sequences),
                "items": len({i for s in self.sequences for i in s.items}),
                "catalog": len(self.catalog),
                "cold_items": len(self.cold_items),
                "cold_test": len(cold_test),
                "train": len(self.sequences) - len(cold_test),
            },
            "cold_items": sorted(self.cold_items),
            "cold_test_user_ids": [s.user_id for s in cold_test],
        }


def clean_text(value) -> str:
    if isinstance(value, (list, tuple)):
        value = " ".join(str(v) for v in value)
    return collapse_ws(_TAG.sub(" ", html.unescape(str(value or ""))))


def _open(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, encoding="utf-8")


def _read_jsonl(path: Path) -> Iterator[dict | None]:
    """Yield one dict per non-blank line, or None for a malformed line."""
    try:
        handle = _open(path)
    except OSError as exc:
        raise CorpusError(f"cannot read {path}: {exc}") from exc
    with handle:
        for line in handle:
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError:
                yield None
                continue
            yield record if isinstance(record, dict) else None


def _resolve_paths(path: Path, meta_path: Path | None) -> tuple[Path, Path | None]:
    if not path.exists():
        raise CorpusError(f"corpus path does not exist: {path}")
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.name.endswith((".jsonl", ".json", ".jsonl.gz", ".json.gz")))
        metas = [p for p in files if p.name.startswith("meta")]
        data = [p for p in files if not p.name.startswith("meta")]
        if not data:
            raise CorpusError(f"no interaction file found in {path}")
        return data[0], meta_path or (metas[0] if metas else None)
    if meta_path is None:
        sibling = path.with_name("meta_" + path.name)
        if sibling.exists():
            meta_path = sibling
    return path, meta_path


def _parse_interaction(record: dict, fmt: str) -> RawInteraction:
    if fmt == "amazon_jsonl":
        user = record.get("reviewerID")
        item = record.get("asin")
        ts = record.get("unixReviewTime")
        text = record.get("reviewText")
        rating = record.get("overall")
    else:
        user = record.get("user_id")
        item = record.get("item_id")
        ts = record.get("timestamp")
        text = record.get("review_text")
        rating = record.get("rating")
    if user is None or item is None or ts is None:
        raise ValueError("missing field")
    return RawInteraction(
        user_id=str(user),
        item_id=str(item),
        timestamp=int(ts),
        review_text=clean_text(text) or None if text else None,
        rating=float(rating) if rating is not None else None,
    )


def _parse_metadata(record: dict, fmt: str) -> ItemMetadata:
    if fmt == "amazon_jsonl":
        item_id = record.get("asin")
        attrs: list[tuple[str, str]] = []
        for key in ("category", "feature"):
            values = record.get(key) or []
            if isinstance(values, str):
                values = [values]
            attrs.extend((key, clean_text(v)) for v in values if clean_text(v))
        if record.get("brand"):
            attrs.append(("brand", clean_text(record["brand"])))
        data = {"item_id": item_id, "title": record.get("title"),
                "description": record.get("description"), "attributes": attrs}
    else:
        data = dict(record)
        item_id = data.get("item_id")
    if not item_id:
        raise ValueError("missing item_id")
    return ItemMetadata.from_dict(data)


def _check_ratio(skipped: int, total: int, what: str) -> None:
    if total and skipped / total > MALFORMED_CEILING:
        raise CorpusError(f"{skipped} of {total} {what} lines malformed (more than 10%)")


def build_review_field(snippets: Iterable[str]) -> str:
    """At most five snippets, longest first, capped at 2,000 characters."""
    chosen = sorted({s for s in snippets if s}, key=lambda s: (-len(s), s))[:MAX_REVIEW_SNIPPETS]
    return " | ".join(chosen)[:MAX_REVIEW_CHARS]


def load_corpus(path, format: str = "amazon_jsonl", meta_path=None) -> Corpus:
    """Load interactions (and item metadata, when present) from JSON Lines files.

    ``path`` is either an interaction file or a directory holding one interaction
    file plus an optional ``meta*.jsonl`` file. Items without metadata get a stub
    whose title is the item id.
    """
    if format not in FORMATS:
        raise CorpusError(f"unknown corpus format: {format}")
    data_path, meta_file = _resolve_paths(Path(path), Path(meta_path) if meta_path else None)
    report = LoadReport()
    interactions: list[RawInteraction] = []
    for record in _read_jsonl(data_path):
        report.lines += 1
        try:
            if record is None:
                raise ValueError("bad json")
            interactions.append(_parse_interaction(record, format))
        except (ValueError, TypeError):
            report.skipped += 1
    if report.lines == 0:
        raise CorpusError("empty corpus")
    _check_ratio(report.skipped, report.lines, "interaction")
    if not interactions:
        raise CorpusError("empty corpus")

    catalog: dict[str, ItemMetadata] = {}
    if meta_file is not None:
        for record in _read_jsonl(meta_file):
            report.meta_lines += 1
            try:
                if record is None:
                    raise ValueError("bad json")
                meta = _parse_metadata(record, format)
            except (ValueError, TypeError, KeyError):
                report.meta_skipped += 1
                continue
            catalog.setdefault(meta.item_id, meta)
        _check_ratio(report.meta_skipped, report.meta_lines, "metadata")

    reviews: dict[str, list[str]] = defaultdict(list)
    for it in interactions:
        if it.review_text:
            reviews[it.item_id].append(it.review_text)
    for it in interactions:
        if it.item_id not in catalog:
            catalog[it.item_id] = ItemMetadata(item_id=it.item_id, title=it.item_id)
            report.stubbed_items += 1
    for item_id, meta in catalog.items():
        if not meta.review and reviews.get(item_id):
            meta.review = build_review_field(reviews[item_id])
    if report.stubbed_items:
        logger.warning("%d items had no metadata record; stubs created", report.stubbed_items)
    return Corpus(interactions, catalog, report)


def core_filter(interactions: list[RawInteraction], threshold: int) -> list[RawInteraction]:
    """Prune users and items below ``threshold`` interactions until nothing changes."""
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    current = list(interactions)
    while True:
        users = Counter(it.user_id for it in current)
        items = Counter(it.item_id for it in current)
        kept = [it for it in current if users[it.user_id] >= threshold and items[it.item_id] >= threshold]
        if len(kept) == len(current):
            return kept
        current = kept


def designate_cold_items(interactions: list[RawInteraction], fraction: float) -> set[str]:
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    counts = Counter(it.item_id for it in interactions)
    if not counts:
        raise ValueError("no items present")
    n_cold = math.floor(fraction * len(counts))
    ranked = sorted(counts, key=lambda item: (counts[item], item))
    return set(ranked[:n_cold])


def user_sequences(interactions: list[RawInteraction]) -> dict[str, list[str]]:
    by_user: dict[str, list[RawInteraction]] = defaultdict(list)
    for it in interactions:
        by_user[it.user_id].append(it)
    return {
        user: [it.item_id for it in sorted(rows, key=lambda r: (r.timestamp, r.item_id))]
        for user, rows in sorted(by_user.items())
    }


def build_split(
    interactions: list[RawInteraction],
    catalog: dict[str, ItemMetadata],
    cold_items: set[str],
    sample_size: int = 500,
    seed: int = 0,
    filter_threshold: int = 1,
    fraction: float = 0.1,
) -> CorpusSplit:
    sequences = {u: items for u, items in user_sequences(interactions).items() if len(items) >= 2}
    eligible = sorted(u for u, items in sequences.items() if items[-1] in cold_items)
    if not eligible:
        raise CorpusError("no cold-ending sequences")
    rng = random.Random(seed)
    rng.shuffle(eligible)
    chosen = set(eligible[:sample_size])
    out = [
        UserSequence(user, items, "cold_test" if user in chosen else "train")
        for user, items in sequences.items()
    ]
    return CorpusSplit(
        sequences=out,
        cold_items=set(cold_items) & set(catalog),
        catalog=catalog,
        filter_threshold=filter_threshold,
        seed=seed,
        fraction=fraction,
        sample_size=sample_size,
        interaction_count=len(interactions),
    )


def prepare_split(corpus: Corpus, threshold: int, fraction: float, sample_size: int, seed: int) -> CorpusSplit:
    """Filter first, then designate cold items on the filtered corpus, then split."""
    filtered = core_filter(corpus.interactions, threshold)
    if not filtered:
        raise CorpusError(f"core filtering with threshold {threshold} removed every interaction")
    cold = designate_cold_items(filtered, fraction)
    kept_items = {it.item_id for it in filtered}
    catalog = {k: v for k, v in corpus.catalog.items() if k in kept_items}
    return build_split(filtered, catalog, cold, sample_size, seed, threshold, fraction)


def save_split(split: CorpusSplit, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "split.json", "w", encoding="utf-8") as fh:
        json.dump(split.manifest(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "sequences.jsonl", "w", encoding="utf-8") as fh:
        for seq in split.sequences:
            fh.write(json.dumps(asdict(seq), sort_keys=True) + "\n")
    write_catalog(split.catalog, out / "catalog.jsonl")
    return out / "split.json"


def write_catalog(catalog: dict[str, ItemMetadata], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item_id in sorted(catalog):
            fh.write(json.dumps(catalog[item_id].to_dict(), sort_keys=True) + "\n")


def read_catalog(path) -> dict[str, ItemMetadata]:
    catalog: dict[str, ItemMetadata] = {}
    for record in _read_jsonl(Path(path)):
        if record is None:
            raise CorpusError(f"malformed catalog line in {path}")
        meta = ItemMetadata.from_dict(record)
        catalog[meta.item_id] = meta
    return catalog


def load_split(out_dir) -> CorpusSplit:
    out = Path(out_dir)
    try:
        manifest = json.loads((out / "split.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusError(f"cannot read split manifest in {out}: {exc}") from exc
    sequences = []
    for record in _read_jsonl(out / "sequences.jsonl"):
        if record is None:
            raise CorpusError("malformed sequences.jsonl")
        sequences.append(UserSequence(record["user_id"], list(record["items"]), record["split"]))
    return CorpusSplit(
        sequences=sequences,
        cold_items=set(manifest["cold_items"]),
        catalog=read_catalog(out / "catalog.jsonl"),
        filter_threshold=manifest["threshold"],
        seed=manifest["seed"],
        fraction=manifest["fraction"],
        sample_size=manifest["sample_size"],
        interaction_count=manifest["counts"]["interactions"],
    )
