"""Hybrid knowledge base: typed entity/relation graph plus an exact cosine index.

On-disk layout (one directory, written atomically)::

    manifest.json      counts, embedder id, dimension, schema version, checksums
    entities.jsonl     one entity per line
    relations.jsonl    one relation per line
    embeddings.bin     little-endian float32 rows (entities first, then relations)
    embeddings.idx     JSONL: row -> entity key or relation ordinal
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
import threading
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import StoreError
from .text import normalize_name, normalize_type

SCHEMA_VERSION = 1
RESERVED_TYPES = ("item", "genre", "feature", "target_user", "setting", "etc")
_FILES = ("entities.jsonl", "relations.jsonl", "embeddings.bin", "embeddings.idx")

Embed = Callable[[list[str]], list[np.ndarray]]


def entity_key(name: str, kind: str) -> str:
    return f"{normalize_name(name)}|{normalize_type(kind)}"


@dataclass(frozen=True)
class Entity:
    key: str
    name: str
    type: str
    descriptions: tuple[tuple[str, str], ...]
    embedding: np.ndarray | None = field(default=None, compare=False, repr=False)
    item_id: str | None = None

    @property
    def is_item(self) -> bool:
        return self.type == "item"

    @property
    def text(self) -> str:
        """Text that is embedded: the name followed by every description, oldest first."""
        return "\n".join([self.name] + [d for _, d in self.descriptions])

    @property
    def description(self) -> str:
        return " ".join(d for _, d in self.descriptions)


@dataclass(frozen=True)
class Relation:
    source_key: str
    target_key: str
    description: str
    source_item_id: str = ""
    embedding: np.ndarray | None = field(default=None, compare=False, repr=False)

    @property
    def triple(self) -> tuple[str, str, str]:
        return (self.source_key, self.target_key, self.description)


@dataclass
class EntityCandidate:
    name: str
    type: str
    description: str
    source_item_id: str = ""
    item_id: str | None = None

    @property
    def key(self) -> str:
        return entity_key(self.name, self.type)


@dataclass
class RelationCandidate:
    source_key: str
    target_key: str
    description: str
    source_item_id: str = ""
    source_name: str | None = None
    target_name: str | None = None


@dataclass
class MergeReport:
    inserted: int = 0
    merged: int = 0
    relations_inserted: int = 0
    relations_skipped: int = 0
    auto_created: int = 0

    def __iadd__(self, other: "MergeReport"):
        for name in self.__dataclass_fields__:
            setattr(self, name, getattr(self, name) + getattr(other, name))
        return self

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass
class KgStats:
    type_histogram: dict[str, int]
    edge_type_matrix: dict[tuple[str, str], int]

    @property
    def entity_count(self) -> int:
        return sum(self.type_histogram.values())

    @property
    def relation_count(self) -> int:
        return sum(self.edge_type_matrix.values())

    def as_dict(self) -> dict:
        return {
            "type_histogram": dict(sorted(self.type_histogram.items())),
            "edge_type_matrix": {f"{s}->{t}": n for (s, t), n in sorted(self.edge_type_matrix.items())},
        }


class KnowledgeBase:
    """In-memory knowledge base. Writes go through a single-writer lock;
    readers should work on ``snapshot()`` copies."""

    def __init__(self, embed_model_id: str = "", dimension: int = 0):
        self.entities: dict[str, Entity] = {}
        self.out_edges: dict[str, list[Relation]] = {}
        self._triples: set[tuple[str, str, str]] = set()
        self.ingested: dict[str, str] = {}  # item_id -> source hash of the metadata used
        now = _now()
        self.manifest = {
            "embed_model_id": embed_model_id,
            "dimension": dimension,
            "schema_version": SCHEMA_VERSION,
            "entity_count": 0,
            "relation_count": 0,
            "created": now,
            "updated": now,
        }
        self._lock = threading.RLock()
        self._matrix: tuple | None = None

    # -- read side -----------------------------------------------------

    @property
    def relation_count(self) -> int:
        return sum(len(edges) for edges in self.out_edges.values())

    @property
    def dimension(self) -> int:
        return int(self.manifest["dimension"])

    def relations(self) -> Iterable[Relation]:
        for edges in self.out_edges.values():
            yield from edges

    def item_entities(self) -> list[Entity]:
        return [e for e in self.entities.values() if e.item_id is not None]

    def item_key(self, item_id: str) -> str | None:
        for ent in self.entities.values():
            if ent.item_id == item_id:
                return ent.key
        return None

    def keys_by_name(self, name: str) -> list[str]:
        norm = normalize_name(name)
        return sorted(k for k in self.entities if k.rsplit("|", 1)[0] == norm)

    def in_edges(self) -> dict[str, list[Relation]]:
        out: dict[str, list[Relation]] = {}
        for rel in self.relations():
            out.setdefault(rel.target_key, []).append(rel)
        return out

    def snapshot(self) -> "KnowledgeBase":
        """Consistent read-only copy; entities and relations are immutable and shared."""
        with self._lock:
            snap = KnowledgeBase.__new__(KnowledgeBase)
            snap.entities = dict(self.entities)
            snap.out_edges = {k: list(v) for k, v in self.out_edges.items()}
            snap._triples = set(self._triples)
            snap.ingested = dict(self.ingested)
            snap.manifest = dict(self.manifest)
            snap._lock = threading.RLock()
            snap._matrix = self._matrix
            return snap

    def _index(self) -> tuple[list[str], np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        if self._matrix is None:
            keys = [k for k, e in self.entities.items() if e.embedding is not None]
            if keys:
                mat = np.vstack([self.entities[k].embedding for k in keys]).astype(np.float64)
            else:
                mat = np.zeros((0, max(self.dimension, 1)))
            types = np.array([self.entities[k].type for k in keys], dtype=object)
            self._matrix = (keys, mat, np.linalg.norm(mat, axis=1), np.array(keys, dtype=str), types)
        return self._matrix

    def nearest_entities(self, query, k: int, type_filter: str | None = None) -> list[tuple[str, float]]:
        """Exact cosine top-k; ties broken by ascending entity key."""
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(getattr(query, "values", query), dtype=np.float32).astype(np.float64)
        if q.ndim != 1 or q.shape[0] != self.dimension:
            raise StoreError(f"dimension mismatch: query has {q.shape[-1]}, index has {self.dimension}")
        keys, mat, norms, key_arr, types = self._index()
        if not keys:
            return []
        denom = norms * np.linalg.norm(q)
        safe = np.where(denom > 0, denom, 1.0)
        sims = np.where(denom > 0, (mat @ q) / safe, 0.0)
        idx = np.arange(len(keys))
        if type_filter is not None:
            idx = idx[types == normalize_type(type_filter)]
            if idx.size == 0:
                return []
        # rounding makes bit-level BLAS noise irrelevant to tie ordering
        rounded = np.round(sims[idx], 9)
        order = np.lexsort((key_arr[idx], -rounded))[:k]
        return [(keys[idx[j]], float(sims[idx[j]])) for j in order]

    def stats(self) -> KgStats:
        return stats(self)

    # -- write side ----------------------------------------------------

    def _check_dim(self, vectors: list[np.ndarray]) -> None:
        for vec in vectors:
            if self.manifest["dimension"] == 0:
                self.manifest["dimension"] = int(vec.shape[0])
            elif vec.shape[0] != self.manifest["dimension"]:
                raise StoreError(f"dimension mismatch: got {vec.shape[0]}, expected {self.manifest['dimension']}")

    def _touch(self) -> None:
        self.manifest["entity_count"] = len(self.entities)
        self.manifest["relation_count"] = self.relation_count
        self.manifest["updated"] = _now()
        self._matrix = None

    def upsert_entities(self, batch: list[EntityCandidate], embed: Embed) -> MergeReport:
        """Insert new entities; merge descriptions into existing ones with the same key.

        Embeddings of touched entities are recomputed from their full text.
        """
        report = MergeReport()
        with self._lock:
            staged: dict[str, Entity] = {}
            for cand in batch:
                if not cand.name.strip() or not cand.description.strip():
                    raise StoreError("entity candidates need a name and a description")
                key = cand.key
                kind = normalize_type(cand.type)
                current = staged.get(key) or self.entities.get(key)
                desc = (cand.source_item_id, cand.description.strip())
                if current is None:
                    staged[key] = Entity(
                        key=key, name=cand.name.strip(), type=kind, descriptions=(desc,),
                        item_id=cand.item_id if kind == "item" else None,
                    )
                    report.inserted += 1
                    continue
                report.merged += 1
                if any(text == desc[1] for _, text in current.descriptions):
                    continue
                item_id = current.item_id
                if kind == "item" and item_id is None:
                    item_id = cand.item_id
                staged[key] = replace(current, descriptions=current.descriptions + (desc,), item_id=item_id)
            if staged:
                keys = list(staged)
                vectors = [np.asarray(v, dtype=np.float32) for v in embed([staged[k].text for k in keys])]
                self._check_dim(vectors)
                for key, vec in zip(keys, vectors):
                    self.entities[key] = replace(staged[key], embedding=vec)
                    self.out_edges.setdefault(key, [])
                self._touch()
        return report

    def upsert_relations(self, batch: list[RelationCandidate], embed: Embed) -> MergeReport:
        report = MergeReport()
        with self._lock:
            missing: list[EntityCandidate] = []
            pending: list[Relation] = []
            seen = set(self._triples)
            for cand in batch:
                desc = cand.description.strip()
                if not desc:
                    raise StoreError("relation description must be non-empty")
                for key, name in ((cand.source_key, cand.source_name), (cand.target_key, cand.target_name)):
                    if key not in self.entities and all(m.key != key for m in missing):
                        label, _, kind = key.rpartition("|")
                        kind = kind or "etc"
                        if not name or entity_key(name, kind) != key:
                            name = label
                        missing.append(EntityCandidate(name, kind, desc, cand.source_item_id))
                triple = (cand.source_key, cand.target_key, desc)
                if triple in seen:
                    report.relations_skipped += 1
                    continue
                seen.add(triple)
                pending.append(Relation(cand.source_key, cand.target_key, desc, cand.source_item_id))
            if missing:
                sub = self.upsert_entities(missing, embed)
                report.auto_created += sub.inserted
            if pending:
                vectors = [np.asarray(v, dtype=np.float32) for v in embed([r.description for r in pending])]
                self._check_dim(vectors)
                for rel, vec in zip(pending, vectors):
                    self.out_edges.setdefault(rel.source_key, []).append(replace(rel, embedding=vec))
                    self._triples.add(rel.triple)
                report.relations_inserted += len(pending)
                self._touch()
        return report

    # -- persistence ---------------------------------------------------

    def save(self, path, *, _fail_after: str | None = None) -> None:
        """Write the KB atomically: build in a temp directory, then swap it in.

        ``_fail_after`` names a file after which a simulated crash is raised
        (fault-injection hook for tests).
        """
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        with self._lock:
            tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.tmp-", dir=target.parent))
            try:
                self._write_files(tmp, _fail_after)
                backup = None
                if target.exists():
                    backup = target.with_name(f".{target.name}.old-{os.getpid()}")
                    if backup.exists():
                        shutil.rmtree(backup)
                    os.replace(target, backup)
                os.replace(tmp, target)
                if backup is not None:
                    shutil.rmtree(backup, ignore_errors=True)
            except BaseException:
                shutil.rmtree(tmp, ignore_errors=True)
                raise

    def _write_files(self, root: Path, fail_after: str | None) -> None:
        ent_lines, rel_lines, idx_lines, rows = [], [], [], []
        for ent in self.entities.values():
            ent_lines.append(json.dumps({
                "key": ent.key, "name": ent.name, "type": ent.type, "item_id": ent.item_id,
                "descriptions": [list(d) for d in ent.descriptions],
            }, ensure_ascii=False, sort_keys=True))
            if ent.embedding is not None:
                idx_lines.append(json.dumps({"row": len(rows), "kind": "entity", "key": ent.key}))
                rows.append(ent.embedding)
        for ordinal, rel in enumerate(self.relations()):
            rel_lines.append(json.dumps({
                "source": rel.source_key, "target": rel.target_key,
                "description": rel.description, "source_item_id": rel.source_item_id,
            }, ensure_ascii=False, sort_keys=True))
            if rel.embedding is not None:
                idx_lines.append(json.dumps({"row": len(rows), "kind": "relation", "ordinal": ordinal}))
                rows.append(rel.embedding)
        blobs = {
            "entities.jsonl": _lines(ent_lines),
            "relations.jsonl": _lines(rel_lines),
            "embeddings.bin": (np.vstack(rows).astype("<f4").tobytes() if rows else b""),
            "embeddings.idx": _lines(idx_lines),
        }
        checksums = {}
        for name in _FILES:
            (root / name).write_bytes(blobs[name])
            checksums[name] = hashlib.sha256(blobs[name]).hexdigest()
            if fail_after == name:
                raise OSError(f"simulated crash after writing {name}")
        manifest = dict(self.manifest)
        manifest.update(entity_count=len(self.entities), relation_count=self.relation_count,
                        checksums=checksums, ingested=dict(sorted(self.ingested.items())))
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, expected_embed_model_id: str | None = None) -> "KnowledgeBase":
        root = Path(path)
        manifest_path = root / "manifest.json"
        if not manifest_path.exists():
            raise StoreError(f"partial write detected: no manifest in {root}")
        try:
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise StoreError(f"partial write detected: unreadable manifest ({exc})") from exc
        if manifest.get("schema_version") != SCHEMA_VERSION:
            raise StoreError(f"unsupported schema_version {manifest.get('schema_version')}")
        if expected_embed_model_id is not None and manifest.get("embed_model_id") != expected_embed_model_id:
            raise StoreError(
                f"embedder mismatch: KB built with {manifest.get('embed_model_id')!r}, "
                f"runtime uses {expected_embed_model_id!r}"
            )
        blobs = {}
        for name in _FILES:
            try:
                blobs[name] = (root / name).read_bytes()
            except OSError as exc:
                raise StoreError(f"partial write detected: {name} missing") from exc
            if hashlib.sha256(blobs[name]).hexdigest() != manifest.get("checksums", {}).get(name):
                raise StoreError(f"checksum failure for {name}")

        dim = int(manifest["dimension"])
        matrix = np.frombuffer(blobs["embeddings.bin"], dtype="<f4")
        matrix = matrix.reshape(-1, dim) if dim and matrix.size else np.zeros((0, max(dim, 1)), dtype=np.float32)
        entity_rows, relation_rows = {}, {}
        for line in blobs["embeddings.idx"].decode("utf-8").splitlines():
            rec = json.loads(line)
            if rec["kind"] == "entity":
                entity_rows[rec["key"]] = rec["row"]
            else:
                relation_rows[rec["ordinal"]] = rec["row"]

        kb = cls(manifest["embed_model_id"], dim)
        kb.manifest.update({k: v for k, v in manifest.items() if k not in ("checksums", "ingested")})
        kb.ingested = dict(manifest.get("ingested", {}))
        for line in blobs["entities.jsonl"].decode("utf-8").splitlines():
            rec = json.loads(line)
            row = entity_rows.get(rec["key"])
            kb.entities[rec["key"]] = Entity(
                key=rec["key"], name=rec["name"], type=rec["type"], item_id=rec.get("item_id"),
                descriptions=tuple((a, b) for a, b in rec["descriptions"]),
                embedding=np.array(matrix[row], dtype=np.float32) if row is not None else None,
            )
            kb.out_edges.setdefault(rec["key"], [])
        for ordinal, line in enumerate(blobs["relations.jsonl"].decode("utf-8").splitlines()):
            rec = json.loads(line)
            row = relation_rows.get(ordinal)
            rel = Relation(rec["source"], rec["target"], rec["description"], rec.get("source_item_id", ""),
                           np.array(matrix[row], dtype=np.float32) if row is not None else None)
            if rel.source_key not in kb.entities or rel.target_key not in kb.entities:
                raise StoreError("referential integrity violated in relations.jsonl")
            kb.out_edges.setdefault(rel.source_key, []).append(rel)
            kb._triples.add(rel.triple)
        if len(kb.entities) != manifest["entity_count"] or kb.relation_count != manifest["relation_count"]:
            raise StoreError("manifest counts do not match stored collections")
        return kb


def stats(kb: KnowledgeBase) -> KgStats:
    hist = Counter(e.type for e in kb.entities.values())
    matrix = Counter(
        (kb.entities[r.source_key].type, kb.entities[r.target_key].type) for r in kb.relations()
    )
    return KgStats(dict(hist), dict(matrix))


def format_stats(st: KgStats) -> str:
    """Text rendering: type distribution plus a source-type x target-type edge table."""
    total = st.entity_count or 1
    lines = ["Entity types", "------------"]
    for kind, n in sorted(st.type_histogram.items(), key=lambda kv: (-kv[1], kv[0])):
        lines.append(f"{kind:<16}{n:>8}  {100.0 * n / total:6.2f}%")
    lines.append(f"{'total':<16}{st.entity_count:>8}")
    types = sorted({t for pair in st.edge_type_matrix for t in pair})
    lines += ["", "Edges (rows: source type, columns: target type)"]
    width = max([10] + [len(t) + 2 for t in types])
    lines.append(" " * width + "".join(f"{t:>{width}}" for t in types))
    for src in types:
        row = "".join(f"{st.edge_type_matrix.get((src, tgt), 0):>{width}}" for tgt in types)
        lines.append(f"{src:<{width}}{row}")
    lines.append(f"total edges: {st.relation_count}")
    return "\n".join(lines)


def _lines(lines: list[str]) -> bytes:
    return ("".join(line + "\n" for line in lines)).encode("utf-8")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")
