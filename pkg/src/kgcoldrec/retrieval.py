"""Candidate retrieval by LLM-scored multi-hop traversal of the knowledge graph."""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .gateway import Gateway, render_template
from .store import KnowledgeBase, Relation
from .text import approx_tokens, collapse_ws

logger = logging.getLogger(__name__)

_SCORE_LINE = re.compile(r"^\s*[\[(]?(\d+)[\])]?\s*[:.)=\-]\s*\**\s*(-?\d+(?:\.\d+)?)")


@dataclass
class RetrievalConfig:
    lam: float = 7.0
    theta_pool: int = 300
    theta_top: int = 100
    max_hops: int = 3
    anchors_per_history_item: int = 3
    anchor_similarity_floor: float = 0.2
    history_window: int = 10
    edge_batch_size: int = 16
    hop_discount: float = 0.9
    evidence_per_item: int = 3
    context_token_budget: int = 3000
    undirected: bool = False
    expand_items: bool = True
    include_entity_names: bool = True
    llm_rerank: bool = False

    def validate(self) -> None:
        if not 0 <= self.lam <= 10:
            raise ConfigError("lambda must lie in [0, 10]")
        if self.theta_top > self.theta_pool:
            raise ConfigError("theta_top must not exceed theta_pool")
        if self.max_hops < 1:
            raise ConfigError("max_hops must be >= 1")
        if self.theta_top < 1 or self.edge_batch_size < 1 or self.history_window < 1:
            raise ConfigError("theta_top, edge_batch_size and history_window must be >= 1")


@dataclass
class UserQuery:
    history: list[tuple[str, str]]  # (item_id, title), oldest first
    free_text: str | None = None
    user_id: str = ""

    @property
    def history_ids(self) -> set[str]:
        return {item_id for item_id, _ in self.history}

    def window(self, size: int) -> list[tuple[str, str]]:
        return self.history[-size:]


@dataclass
class Anchor:
    title: str
    entity_key: str
    similarity: float


@dataclass
class ScoredEdge:
    relation: Relation
    score: float
    hop: int

    @property
    def source_key(self) -> str:
        return self.relation.source_key

    @property
    def target_key(self) -> str:
        return self.relation.target_key


@dataclass
class PoolEntry:
    item_id: str
    entity_key: str
    first_hop: int
    edges: list[ScoredEdge] = field(default_factory=list)


@dataclass
class RetrievalTrace:
    anchors: list[Anchor] = field(default_factory=list)
    frontiers: list[list[str]] = field(default_factory=list)
    scored_edges: list[ScoredEdge] = field(default_factory=list)
    pool: list[PoolEntry] = field(default_factory=list)
    final_candidates: list[str] = field(default_factory=list)
    context_block: str = ""
    parse_warnings: int = 0
    hops: int = 0
    fallback: bool = False
    error: str | None = None

    def retained(self, lam: float) -> set[tuple[str, str, str]]:
        return {e.relation.triple for e in self.scored_edges if e.score >= lam}

    def pool_ids(self) -> list[str]:
        return [p.item_id for p in self.pool]

    def to_dict(self) -> dict:
        return {
            "anchors": [[a.title, a.entity_key, a.similarity] for a in self.anchors],
            "frontiers": self.frontiers,
            "scored_edges": [
                {"source": e.source_key, "target": e.target_key, "description": e.relation.description,
                 "score": e.score, "hop": e.hop}
                for e in self.scored_edges
            ],
            "pool": [{"item_id": p.item_id, "first_hop": p.first_hop,
                      "evidence": [e.relation.description for e in p.edges]} for p in self.pool],
            "final_candidates": self.final_candidates,
            "context_block": self.context_block,
            "parse_warnings": self.parse_warnings,
            "hops": self.hops,
            "fallback": self.fallback,
            "error": self.error,
        }


def anchor(query: UserQuery, kb: KnowledgeBase, config: RetrievalConfig, gateway: Gateway) -> list[Anchor]:
    """Match the most recent history titles against entity embeddings."""
    if not kb.entities:
        raise DataError("empty knowledge base")
    titles = [title for _, title in query.window(config.history_window)]
    if not titles:
        raise DataError("query history is empty")
    vectors = gateway.embed_arrays(titles)
    hits = [kb.nearest_entities(vec, config.anchors_per_history_item) for vec in vectors]
    anchors: list[Anchor] = []
    seen: set[str] = set()
    for title, found in zip(titles, hits):
        for key, sim in found:
            if sim >= config.anchor_similarity_floor and key not in seen:
                seen.add(key)
                anchors.append(Anchor(title, key, sim))
    if not anchors:
        for title, found in zip(titles, hits):
            if found and found[0][0] not in seen:
                seen.add(found[0][0])
                anchors.append(Anchor(title, found[0][0], found[0][1]))
    return anchors


def _edge_line(kb: KnowledgeBase, rel: Relation, with_names: bool) -> str:
    desc = collapse_ws(rel.description)
    if not with_names:
        return desc
    src = collapse_ws(kb.entities[rel.source_key].name)
    tgt = collapse_ws(kb.entities[rel.target_key].name)
    return f"{src} -> {tgt}: {desc}"


def parse_scores(raw: str, n: int) -> tuple[list[float], int]:
    """Parse ``<number>: <score>`` lines. Missing/non-numeric entries score 0."""
    found: dict[int, float] = {}
    for line in raw.splitlines():
        m = _SCORE_LINE.match(line)
        if m:
            idx = int(m.group(1))
            if 1 <= idx <= n and idx not in found:
                found[idx] = min(10.0, max(0.0, float(m.group(2))))
    scores = [found.get(i, 0.0) for i in range(1, n + 1)]
    return scores, n - len(found)


def score_edges(
    edges: list[Relation],
    history: list[str],
    gateway: Gateway,
    kb: KnowledgeBase | None = None,
    batch_size: int = 16,
    include_entity_names: bool = True,
    hop: int = 1,
) -> tuple[list[ScoredEdge], int]:
    """Score edges in batches; returns (scored edges in input order, parse warnings)."""
    if not edges:
        raise ValueError("score_edges needs at least one edge")
    batches = [edges[i:i + batch_size] for i in range(0, len(edges), batch_size)]
    history_text = "\n".join(collapse_ws(t) for t in history)

    def run(batch: list[Relation]) -> tuple[list[float], int]:
        lines = [
            _edge_line(kb, rel, include_entity_names) if kb is not None else collapse_ws(rel.description)
            for rel in batch
        ]
        request = render_template("edge_scoring", {"history": history_text, "edges": "\n".join(lines)},
                                  max_tokens=8 * len(batch) + 32)
        return parse_scores(gateway.chat(request), len(batch))

    if len(batches) == 1:
        outcomes = [run(batches[0])]
    else:
        with ThreadPoolExecutor(max_workers=gateway.max_inflight) as pool:
            outcomes = list(pool.map(run, batches))  # map keeps batch order
    scored, warnings = [], 0
    for batch, (scores, warn) in zip(batches, outcomes):
        warnings += warn
        scored.extend(ScoredEdge(rel, s, hop) for rel, s in zip(batch, scores))
    return scored, warnings


def _outgoing(kb: KnowledgeBase, key: str, incoming: dict | None) -> list[Relation]:
    edges = list(kb.out_edges.get(key, ()))
    if incoming is not None:
        # walk reversed edges too, presented as source -> target from this node
        edges += [Relation(key, r.source_key, r.description, r.source_item_id) for r in incoming.get(key, ())]
    return edges


def expand(
    kb: KnowledgeBase,
    query: UserQuery,
    config: RetrievalConfig,
    gateway: Gateway,
    anchors: list[Anchor] | None = None,
) -> RetrievalTrace:
    """Hop-by-hop frontier expansion under the edge-score threshold."""
    config.validate()
    trace = RetrievalTrace()
    trace.anchors = anchors if anchors is not None else anchor(query, kb, config, gateway)
    frontier = sorted(dict.fromkeys(a.entity_key for a in trace.anchors))
    trace.frontiers.append(frontier)
    visited = set(frontier)
    scored: set[tuple[str, str, str]] = set()
    history_ids = query.history_ids
    history_titles = [t for _, t in query.window(config.history_window)]
    incoming = kb.in_edges() if config.undirected else None
    pool: dict[str, PoolEntry] = {}

    for hop in range(1, config.max_hops + 1):
        batch: list[Relation] = []
        for key in frontier:
            for rel in _outgoing(kb, key, incoming):
                if rel.triple not in scored:
                    scored.add(rel.triple)
                    batch.append(rel)
        trace.hops = hop
        if not batch:
            trace.frontiers.append([])
            break
        edges, warnings = score_edges(batch, history_titles, gateway, kb, config.edge_batch_size,
                                      config.include_entity_names, hop)
        trace.parse_warnings += warnings
        trace.scored_edges.extend(edges)
        nxt: list[str] = []
        for edge in edges:
            if edge.score < config.lam:
                continue
            target = kb.entities[edge.target_key]
            if target.item_id is not None and target.item_id not in history_ids:
                entry = pool.get(target.item_id)
                if entry is None:
                    entry = pool[target.item_id] = PoolEntry(target.item_id, target.key, hop)
                entry.edges.append(edge)
            if target.key in visited:
                continue
            if target.item_id is not None and not config.expand_items:
                continue
            visited.add(target.key)
            nxt.append(target.key)
        frontier = sorted(nxt)
        trace.frontiers.append(frontier)
        if len(pool) >= config.theta_pool or not frontier:
            break
    # overflow is checked per hop; trim to the cap in first-reached order
    trace.pool = list(pool.values())[: config.theta_pool]
    return trace


def aggregate_score(entry: PoolEntry, discount: float = 0.9) -> float:
    return sum(e.score * discount ** (e.hop - 1) for e in entry.edges)


def _budget(parts: list[str], budget: int) -> str:
    out, used = [], 0
    for part in parts:
        cost = approx_tokens(part)
        if used + cost > budget:
            words = part.split()[: max(0, budget - used)]
            if words:
                out.append(" ".join(words))
            break
        out.append(part)
        used += cost
    return "\n".join(out)


def _item_block(kb: KnowledgeBase, key: str, evidence: list[str]) -> str:
    ent = kb.entities[key]
    lines = [f"[{ent.name}] {collapse_ws(ent.description)}"]
    lines += [f"  - {collapse_ws(e)}" for e in evidence]
    return "\n".join(lines)


def rank_pool(
    trace: RetrievalTrace,
    query: UserQuery,
    config: RetrievalConfig,
    gateway: Gateway | None = None,
    kb: KnowledgeBase | None = None,
) -> tuple[list[str], str]:
    """Hop-discounted score aggregation, top-theta_top selection and context assembly."""
    if not trace.pool:
        trace.final_candidates, trace.context_block = [], ""
        return [], ""
    ranked = sorted(
        trace.pool,
        key=lambda p: (-aggregate_score(p, config.hop_discount), -max(e.score for e in p.edges), p.item_id),
    )
    if config.llm_rerank and gateway is not None and kb is not None:
        ranked = _llm_rerank(ranked, query, config, gateway, kb)
    chosen = ranked[: config.theta_top]
    blocks = []
    for entry in chosen:
        best = sorted(entry.edges, key=lambda e: -e.score)[: config.evidence_per_item]
        evidence = [f"{e.relation.description}" for e in best]
        if kb is not None:
            blocks.append(_item_block(kb, entry.entity_key, evidence))
        else:
            blocks.append(f"[{entry.item_id}]\n" + "\n".join(f"  - {collapse_ws(e)}" for e in evidence))
    context = _budget(blocks, config.context_token_budget)
    trace.final_candidates = [p.item_id for p in chosen]
    trace.context_block = context
    return trace.final_candidates, context


def _llm_rerank(ranked: list[PoolEntry], query: UserQuery, config: RetrievalConfig,
                gateway: Gateway, kb: KnowledgeBase) -> list[PoolEntry]:
    head = ranked[: config.theta_top]
    titles = [kb.entities[p.entity_key].name for p in head]
    request = render_template("recommendation", {
        "context": "",
        "history": "\n".join(t for _, t in query.window(config.history_window)),
        "candidates": "\n".join(titles),
        "k": str(len(head)),
    })
    raw = gateway.chat(request)
    order: list[int] = []
    by_title = {collapse_ws(t).casefold(): i for i, t in enumerate(titles)}
    for line in raw.splitlines():
        m = re.match(r"^\s*\d+\s*[.):]\s*(.+)$", line)
        if m:
            i = by_title.get(collapse_ws(m.group(1)).casefold())
            if i is not None and i not in order:
                order.append(i)
    order += [i for i in range(len(head)) if i not in order]
    return [head[i] for i in order] + ranked[config.theta_top:]


def similarity_fallback(
    query: UserQuery, kb: KnowledgeBase, config: RetrievalConfig, gateway: Gateway
) -> tuple[list[str], str]:
    """Items nearest to the centroid of the history-title embeddings."""
    if not kb.entities:
        raise DataError("empty knowledge base")
    titles = [t for _, t in query.window(config.history_window)]
    vectors = [v.astype(np.float64) for v in gateway.embed_arrays(titles)]
    unit = [v / n for v in vectors if (n := np.linalg.norm(v)) > 0]
    centroid = np.mean(unit, axis=0) if unit else vectors[0]
    if not np.any(centroid):
        centroid = vectors[0]
    history_ids = query.history_ids
    n_items = len(kb.item_entities())
    hits = kb.nearest_entities(centroid, max(1, min(n_items, config.theta_top + len(history_ids))), type_filter="item")
    chosen: list[str] = []
    blocks = []
    for key, _ in hits:
        ent = kb.entities[key]
        if ent.item_id is None or ent.item_id in history_ids:
            continue
        chosen.append(ent.item_id)
        blocks.append(_item_block(kb, key, []))
        if len(chosen) >= config.theta_top:
            break
    return chosen, _budget(blocks, config.context_token_budget)
