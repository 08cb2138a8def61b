"""Prompt composition, generation and catalog matching of the ranked output."""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from rapidfuzz.distance import Levenshtein

from .errors import KgRecError, ParseError, PipelineError
from .gateway import Gateway, render_template
from .retrieval import RetrievalConfig, RetrievalTrace, UserQuery, anchor, expand, rank_pool, similarity_fallback
from .store import KnowledgeBase
from .text import collapse_ws, normalize_title, stable_int

MODES = ("full", "wo_R", "wo_GR")
MATCH_KINDS = ("exact", "normalized", "fuzzy", "out_of_domain")

_RANK_LINE = re.compile(r"^\s*(?:#{1,6}\s*)?(?:\(?\d{1,3}\s*[.):\]]|\d{1,3}\s+-|[-*•+])\s*(.*\S)\s*$")
_TRAILERS = (" -- ", " — ", " – ", " - ", ": ", " (")


@dataclass
class RecommendConfig:
    k: int = 10
    history_window: int = 10
    fuzzy_threshold: float = 0.15
    temperature: float = 0.0
    shuffle_candidates: bool = True
    max_tokens: int | None = None


class TitleIndex:
    """Catalog titles indexed for exact and normalized lookup."""

    def __init__(self, titles: Mapping[str, str]):
        self.titles = dict(titles)
        self.exact: dict[str, str] = {}
        self.normalized: dict[str, str] = {}
        self.norm_of: dict[str, str] = {}
        for item_id in sorted(self.titles):
            title = collapse_ws(self.titles[item_id])
            self.norm_of[item_id] = normalize_title(title)
            self.exact.setdefault(title, item_id)
            self.normalized.setdefault(self.norm_of[item_id], item_id)

    @classmethod
    def from_kb(cls, kb: KnowledgeBase) -> "TitleIndex":
        return cls({e.item_id: e.name for e in kb.item_entities()})

    def __contains__(self, item_id: str) -> bool:
        return item_id in self.titles

    def title(self, item_id: str) -> str:
        return self.titles.get(item_id, item_id)


@dataclass
class RecEntry:
    rank: int
    raw_title: str
    matched_item_id: str | None
    match_kind: str
    distance: float | None = None

    def to_dict(self) -> dict:
        out = {"rank": self.rank, "raw_title": self.raw_title,
               "matched_item_id": self.matched_item_id, "match_kind": self.match_kind}
        if self.distance is not None:
            out["distance"] = round(self.distance, 6)
        return out


@dataclass
class RankedRecommendation:
    entries: list[RecEntry]
    k: int

    @property
    def ood_count(self) -> int:
        return sum(1 for e in self.entries if e.match_kind == "out_of_domain")

    def item_ids(self) -> list[str | None]:
        return [e.matched_item_id for e in self.entries]

    def serialize(self) -> str:
        return "\n".join(f"{e.rank}. {e.raw_title}" for e in self.entries)

    def to_dict(self) -> dict:
        return {"k": self.k, "entries": [e.to_dict() for e in self.entries]}

    @classmethod
    def from_dict(cls, data: dict) -> "RankedRecommendation":
        return cls([RecEntry(e["rank"], e["raw_title"], e["matched_item_id"], e["match_kind"], e.get("distance"))
                    for e in data["entries"]], data["k"])


@dataclass
class GenerationRecord:
    user_id: str
    mode: str
    prompts: tuple[str, str]
    raw_response: str
    recommendation: RankedRecommendation
    candidates: list[str] = field(default_factory=list)
    pool_size: int = 0
    fallback: bool = False
    flags: list[str] = field(default_factory=list)
    trace: RetrievalTrace | None = None

    @property
    def ood_count(self) -> int:
        return self.recommendation.ood_count

    def to_dict(self, audit: bool = False) -> dict:
        out = {
            "user_id": self.user_id,
            "mode": self.mode,
            "raw_response": self.raw_response,
            "recommendation": self.recommendation.to_dict(),
            "ood_count": self.ood_count,
            "entries_count": len(self.recommendation.entries),
            "candidates": self.candidates,
            "pool_size": self.pool_size,
            "fallback": self.fallback,
            "flags": self.flags,
        }
        if audit:
            out["prompts"] = {"system": self.prompts[0], "user": self.prompts[1]}
        return out

    def to_json(self, audit: bool = False) -> str:
        return json.dumps(self.to_dict(audit), ensure_ascii=False, sort_keys=True)


def _request(context_block, query, candidates, k, history_window=10, temperature=0.0, max_tokens=None):
    if k < 1:
        raise ValueError("k must be >= 1")
    return render_template("recommendation", {
        "context": context_block or "",
        "history": "\n".join(collapse_ws(t) for _, t in query.window(history_window)),
        "candidates": "\n".join(collapse_ws(t) for _, t in candidates),
        "k": str(k),
    }, temperature=temperature, max_tokens=max_tokens or 80 * k)


def compose_prompts(
    context_block: str,
    query: UserQuery,
    candidates: list[tuple[str, str]],
    k: int,
    history_window: int = 10,
) -> tuple[str, str]:
    """System prompt = retrieved context; user prompt = history, numbered candidates, task."""
    request = _request(context_block, query, candidates, k, history_window)
    return request.system_prompt, request.user_prompt


def _clean_title(text: str) -> str:
    text = collapse_ws(text.replace("**", "").replace("__", ""))
    return text.strip(" \"'`“”‘’*")


def _variants(title: str) -> list[str]:
    out = [title]
    for sep in _TRAILERS:
        if sep in title:
            head = _clean_title(title.split(sep, 1)[0])
            if head and head not in out:
                out.append(head)
    return out


def _normalized_distance(a: str, b: str) -> float:
    longest = max(len(a), len(b))
    return Levenshtein.distance(a, b) / longest if longest else 0.0


def match_title(
    title: str,
    index: TitleIndex,
    allowed: set[str] | None = None,
    fuzzy_threshold: float = 0.15,
) -> tuple[str | None, str, float | None]:
    """exact -> normalized -> fuzzy; anything else is out of domain."""
    def ok(item_id: str | None) -> bool:
        return item_id is not None and (allowed is None or item_id in allowed)

    variants = _variants(title)
    for v in variants:
        item_id = index.exact.get(v)
        if ok(item_id):
            return item_id, "exact", None
    for v in variants:
        item_id = index.normalized.get(normalize_title(v))
        if ok(item_id):
            return item_id, "normalized", None
    pool = sorted(allowed) if allowed is not None else sorted(index.titles)
    best: tuple[float, str] | None = None
    for v in variants:
        nv = normalize_title(v)
        if not nv:
            continue
        for item_id in pool:
            nt = index.norm_of.get(item_id) or normalize_title(index.title(item_id))
            # length gap alone already rules the pair out
            if abs(len(nt) - len(nv)) > fuzzy_threshold * max(len(nt), len(nv)):
                continue
            d = _normalized_distance(nv, nt)
            if d <= fuzzy_threshold and (best is None or d < best[0]):
                best = (d, item_id)
    if best is not None:
        return best[1], "fuzzy", best[0]
    return None, "out_of_domain", None


def parse_top_k(
    raw: str,
    index: TitleIndex,
    candidates: Iterable[str] | None = None,
    k: int = 10,
    fuzzy_threshold: float = 0.15,
) -> RankedRecommendation:
    """Extract ranked titles from a generation and match them to catalog items."""
    allowed = set(candidates) if candidates is not None else None
    titles = []
    for line in (raw or "").splitlines():
        m = _RANK_LINE.match(line)
        if m:
            title = _clean_title(m.group(1))
            if title:
                titles.append(title)
    if not titles:
        raise ParseError("unparseable recommendation")
    entries: list[RecEntry] = []
    seen_items: set[str] = set()
    seen_ood: set[str] = set()
    for title in titles:
        if len(entries) >= k:
            break
        item_id, kind, dist = match_title(title, index, allowed, fuzzy_threshold)
        if item_id is not None:
            if item_id in seen_items:
                continue
            seen_items.add(item_id)
        else:
            norm = normalize_title(title)
            if norm in seen_ood:
                continue
            seen_ood.add(norm)
        entries.append(RecEntry(len(entries) + 1, title, item_id, kind, dist))
    return RankedRecommendation(entries, k)


def _shuffled(candidates: list[str], seed: int, user_id: str) -> list[str]:
    rng = random.Random(stable_int(f"{seed}:{user_id}"))
    out = list(candidates)
    rng.shuffle(out)
    return out


def recommend(
    query: UserQuery,
    kb: KnowledgeBase | None,
    gateway: Gateway,
    retrieval: RetrievalConfig | None = None,
    config: RecommendConfig | None = None,
    mode: str = "full",
    seed: int = 0,
    index: TitleIndex | None = None,
) -> GenerationRecord:
    """Run retrieval (per ``mode``), generation and parsing for one user."""
    retrieval = retrieval or RetrievalConfig()
    config = config or RecommendConfig()
    if mode not in MODES:
        raise KgRecError(f"unknown mode: {mode}")
    if kb is None and mode != "wo_GR":
        raise KgRecError(f"mode {mode} needs a knowledge base")
    snap = kb.snapshot() if kb is not None else None
    if index is None:
        if snap is None:
            raise KgRecError("a title index is required without a knowledge base")
        index = TitleIndex.from_kb(snap)

    def stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except PipelineError:
            raise
        except (KgRecError, ValueError) as exc:
            raise PipelineError(name, exc) from exc

    trace = None
    fallback = False
    candidates: list[str] = []
    context = ""
    if mode == "full":
        anchors = stage("anchor", anchor, query, snap, retrieval, gateway)
        trace = stage("expand", expand, snap, query, retrieval, gateway, anchors)
        candidates, context = stage("rank_pool", rank_pool, trace, query, retrieval, gateway, snap)
        if not candidates:
            fallback = True
            candidates, context = stage("similarity_fallback", similarity_fallback, query, snap, retrieval, gateway)
            trace.fallback = True
            trace.final_candidates, trace.context_block = candidates, context
    elif mode == "wo_R":
        candidates, context = stage("similarity_fallback", similarity_fallback, query, snap, retrieval, gateway)

    ordered = _shuffled(candidates, seed, query.user_id) if config.shuffle_candidates else list(candidates)
    pairs = [(c, index.title(c)) for c in ordered]
    request = stage("compose", _request, context, query, pairs, config.k, config.history_window,
                    config.temperature, config.max_tokens)
    raw = stage("generate", gateway.chat, request)
    restriction = candidates if mode != "wo_GR" else None
    flags: list[str] = []
    try:
        rec = parse_top_k(raw, index, restriction, config.k, config.fuzzy_threshold)
    except ParseError:
        request.user_prompt += "\nYour previous answer had no numbered list. Reply only with the numbered list of titles.\n"
        raw = stage("generate", gateway.chat, request)
        try:
            rec = parse_top_k(raw, index, restriction, config.k, config.fuzzy_threshold)
        except ParseError:
            rec = RankedRecommendation([], config.k)
            flags.append("unparseable")
    return GenerationRecord(
        user_id=query.user_id,
        mode=mode,
        prompts=(request.system_prompt, request.user_prompt),
        raw_response=raw,
        recommendation=rec,
        candidates=list(candidates),
        pool_size=len(trace.pool) if trace is not None else 0,
        fallback=fallback,
        flags=flags,
        trace=trace,
    )


def hallucination_rate(records: Iterable[dict | GenerationRecord]) -> float:
    ood = entries = 0
    for rec in records:
        if isinstance(rec, GenerationRecord):
            ood += rec.ood_count
            entries += len(rec.recommendation.entries)
        else:
            ood += rec["ood_count"]
            entries += rec["entries_count"]
    return ood / entries if entries else 0.0


__all__ = [
    "GenerationRecord", "MODES", "RankedRecommendation", "RecEntry", "RecommendConfig",
    "TitleIndex", "compose_prompts", "hallucination_rate", "match_title", "parse_top_k", "recommend",
]
