import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgcoldrec.errors import StoreError
from kgcoldrec.gateway import HashEmbedder
from kgcoldrec.store import (
    EntityCandidate,
    KnowledgeBase,
    RelationCandidate,
    entity_key,
    format_stats,
    stats,
)

from oracles import cosine_top_k

embed = HashEmbedder(32).embed


def small_kb():
    kb = KnowledgeBase("hash-synthetic-32")
    kb.upsert_entities([
        EntityCandidate("Tomb Raider", "item", "An action adventure game.", "i1", "i1"),
        EntityCandidate("Action", "genre", "Fast paced games.", "i1"),
        EntityCandidate("Lara Croft", "character", "An archaeologist.", "i1"),
    ], embed)
    kb.upsert_relations([
        RelationCandidate(entity_key("Tomb Raider", "item"), entity_key("Action", "genre"), "Tomb Raider is action."),
        RelationCandidate(entity_key("Tomb Raider", "item"), entity_key("Lara Croft", "character"), "Stars Lara."),
    ], embed)
    return kb


def edge_multiset(kb):
    return Counter(r.triple for r in kb.relations())


def test_entity_key_normalizes():
    assert entity_key("The  Witcher 3!", "Item") == "the witcher 3|item"


def test_merge_appends_descriptions_and_reembeds():
    kb = small_kb()
    before = kb.entities["action|genre"].embedding.copy()
    report = kb.upsert_entities([EntityCandidate("ACTION", "Genre", "Lots of combat.", "i2")], embed)
    ent = kb.entities["action|genre"]
    assert report.merged == 1 and report.inserted == 0
    assert [d for _, d in ent.descriptions] == ["Fast paced games.", "Lots of combat."]
    assert not np.array_equal(before, ent.embedding)
    # the same description again is a no-op
    again = kb.upsert_entities([EntityCandidate("Action", "genre", "Lots of combat.", "i3")], embed)
    assert again.merged == 1 and len(kb.entities["action|genre"].descriptions) == 2


def test_relations_dedupe_and_autocreate():
    kb = small_kb()
    src = entity_key("Tomb Raider", "item")
    report = kb.upsert_relations([
        RelationCandidate(src, entity_key("Action", "genre"), "Tomb Raider is action."),
        RelationCandidate(src, entity_key("Egypt", "setting"), "Set partly in Egypt.", "i1", "Egypt", "Egypt"),
    ], embed)
    assert report.relations_skipped == 1 and report.relations_inserted == 1 and report.auto_created == 1
    egypt = kb.entities["egypt|setting"]
    assert egypt.name == "Egypt" and egypt.type == "setting"
    with pytest.raises(StoreError):
        kb.upsert_relations([RelationCandidate(src, "egypt|setting", "  ")], embed)


def test_stats_shape():
    st_ = stats(small_kb())
    assert st_.type_histogram == {"item": 1, "genre": 1, "character": 1}
    assert st_.edge_type_matrix == {("item", "genre"): 1, ("item", "character"): 1}
    text = format_stats(st_)
    assert "Entity types" in text and "total edges: 2" in text


def test_nearest_type_filter_and_errors():
    kb = small_kb()
    q = embed(["Tomb Raider"])[0]
    assert kb.nearest_entities(q, 1)[0][0] == "tomb raider|item"
    assert [k for k, _ in kb.nearest_entities(q, 5, type_filter="genre")] == ["action|genre"]
    assert kb.nearest_entities(q, 5, type_filter="setting") == []
    with pytest.raises(StoreError, match="dimension"):
        kb.nearest_entities(np.ones(7), 1)
    with pytest.raises(ValueError):
        kb.nearest_entities(q, 0)


def test_save_load_roundtrip(tmp_path):
    kb = small_kb()
    kb.ingested["i1"] = "abc"
    kb.save(tmp_path / "kb")
    back = KnowledgeBase.load(tmp_path / "kb", "hash-synthetic-32")
    assert set(back.entities) == set(kb.entities)
    assert edge_multiset(back) == edge_multiset(kb)
    assert stats(back) == stats(kb)
    assert back.ingested == {"i1": "abc"}
    for key, ent in kb.entities.items():
        assert np.array_equal(back.entities[key].embedding, ent.embedding)


def test_load_rejects_wrong_embedder_and_tampering(tmp_path):
    kb = small_kb()
    kb.save(tmp_path / "kb")
    with pytest.raises(StoreError, match="embedder mismatch"):
        KnowledgeBase.load(tmp_path / "kb", "text-embedding-3-small")
    with open(tmp_path / "kb" / "relations.jsonl", "a") as fh:
        fh.write("\n")
    with pytest.raises(StoreError, match="checksum"):
        KnowledgeBase.load(tmp_path / "kb")
    (tmp_path / "kb" / "manifest.json").unlink()
    with pytest.raises(StoreError, match="partial write"):
        KnowledgeBase.load(tmp_path / "kb")


def test_interrupted_save_keeps_previous(tmp_path):
    kb = small_kb()
    kb.save(tmp_path / "kb")
    kb.upsert_entities([EntityCandidate("Egypt", "setting", "A country.", "i9")], embed)
    with pytest.raises(OSError, match="simulated crash"):
        kb.save(tmp_path / "kb", _fail_after="relations.jsonl")
    back = KnowledgeBase.load(tmp_path / "kb")
    assert "egypt|setting" not in back.entities
    assert len(back.entities) == 3
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".kb")]


def test_manifest_records_embedder(tmp_path):
    small_kb().save(tmp_path / "kb")
    manifest = json.loads((tmp_path / "kb" / "manifest.json").read_text())
    assert manifest["embed_model_id"] == "hash-synthetic-32"
    assert manifest["dimension"] == 32 and manifest["schema_version"] == 1


def random_kb(rng, n, dim, dup_every=0):
    kb = KnowledgeBase("rand", dim)
    vectors = rng.normal(size=(n, dim)).astype(np.float32)
    if dup_every:
        vectors[dup_every::dup_every] = vectors[0]  # exact ties
    fixed = iter(vectors)
    kb.upsert_entities([EntityCandidate(f"e{i:04d}", "etc", "d") for i in range(n)],
                       lambda texts: [next(fixed) for _ in texts])
    return kb, {f"e{i:04d}|etc": vectors[i].astype(np.float64).tolist() for i in range(n)}


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 40))
def test_nearest_matches_linear_scan(seed, k):
    rng = np.random.default_rng(seed)
    kb, rows = random_kb(rng, 60, 8, dup_every=7)
    q = rng.normal(size=8)
    got = kb.nearest_entities(q, k)
    want = cosine_top_k(q.astype(np.float32).astype(np.float64).tolist(), rows, k)
    assert [key for key, _ in got] == [key for key, _ in want]
    assert all(abs(a - b) < 1e-6 for (_, a), (_, b) in zip(got, want))
