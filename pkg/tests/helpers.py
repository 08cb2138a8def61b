"""Builders for small scripted graphs and gateways used across the tests."""

from __future__ import annotations

import random
import re
from pathlib import Path

from kgcoldrec.gateway import FunctionBackend, Gateway, HashEmbedder, SyntheticResponder
from kgcoldrec.gateway.templates import sections
from kgcoldrec.retrieval import Anchor, RetrievalConfig, UserQuery, expand
from kgcoldrec.store import EntityCandidate, KnowledgeBase, RelationCandidate, entity_key

from oracles import walk_pool

FIXTURES = Path(__file__).parent / "fixtures"
DESK30 = FIXTURES / "desk30"

_EDGE_LINE = re.compile(r"^\s*(\d+)\.\s+(.*)$")


def scripted_gateway(edge_scores: dict[str, float] | None = None, default_score: float = 0,
                     recommend=None, max_inflight: int = 4) -> Gateway:
    """Edge scores are looked up by relation description (the text after the last ': ');
    everything else is answered by the synthetic responder unless overridden."""
    synthetic = SyntheticResponder()
    scores = edge_scores or {}

    def respond(request):
        if request.tag == "edge_scoring":
            out = []
            for line in sections(request.user_prompt).get("RELATIONS", "").splitlines():
                m = _EDGE_LINE.match(line)
                if m:
                    desc = m.group(2).rsplit(": ", 1)[-1]
                    out.append(f"{m.group(1)}: {scores.get(desc, default_score):g}")
            return "\n".join(out)
        if request.tag == "recommendation" and recommend is not None:
            return recommend(request)
        return synthetic.complete(request)[0]

    return Gateway(FunctionBackend(respond), HashEmbedder(64), kind="scripted", max_inflight=max_inflight)


def graph_kb(gateway: Gateway, nodes: list[tuple[str, str, str | None]],
             edges: list[tuple[str, str, str]]) -> KnowledgeBase:
    """nodes: (name, type, item_id); edges: (source name, target name, description)."""
    kb = KnowledgeBase(gateway.embed_model_id)
    kinds = {name: kind for name, kind, _ in nodes}
    kb.upsert_entities(
        [EntityCandidate(name, kind, f"{name} node", item_id or "", item_id) for name, kind, item_id in nodes],
        gateway.embed_arrays,
    )
    kb.upsert_relations(
        [RelationCandidate(entity_key(s, kinds[s]), entity_key(t, kinds[t]), d) for s, t, d in edges],
        gateway.embed_arrays,
    )
    return kb


def random_graph(rng: random.Random):
    n = rng.randint(5, 50)
    nodes = []
    for i in range(n):
        is_item = rng.random() < 0.5
        nodes.append((f"n{i}", "item" if is_item else "genre", f"i{i}" if is_item else None))
    edges, scores = [], {}
    for _ in range(rng.randint(n, 3 * n)):
        s, t = rng.sample(range(n), 2)
        desc = f"e{len(edges)}"
        edges.append((f"n{s}", f"n{t}", desc))
        scores[desc] = rng.randint(0, 10)
    anchors = rng.sample(range(n), rng.randint(1, 3))
    history = {nodes[i][2] for i in rng.sample(range(n), 2) if nodes[i][2]}
    return nodes, edges, scores, anchors, history


def run_both(seed, lam, max_hops):
    """Expand a seeded random graph; return (trace, pool from the walk oracle)."""
    rng = random.Random(seed)
    nodes, edges, scores, anchor_idx, history = random_graph(rng)
    gw = scripted_gateway(scores)
    kb = graph_kb(gw, nodes, edges)
    kind = {name: k for name, k, _ in nodes}
    key = {name: entity_key(name, kind[name]) for name, _, _ in nodes}
    anchors = [Anchor("h", key[nodes[i][0]], 1.0) for i in anchor_idx]
    query = UserQuery([(h, h) for h in sorted(history)] or [("none", "none")])
    cfg = RetrievalConfig(lam=lam, max_hops=max_hops, theta_pool=10_000, theta_top=100)
    trace = expand(kb, query, cfg, gw, anchors)
    item_of = {key[name]: item for name, _, item in nodes if item}
    want = walk_pool([(key[s], key[t], scores[d]) for s, t, d in edges],
                     {a.entity_key for a in anchors}, item_of, query.history_ids, lam, max_hops)
    return trace, want
