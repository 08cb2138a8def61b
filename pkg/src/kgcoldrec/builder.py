"""Item profiles -> entity/relation extraction -> knowledge-base upserts."""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .errors import BackendError, ExtractionError, KgRecError, StoreError
from .gateway import Gateway, render_template
from .gateway.templates import COMPLETE_MARKER, RECORD_DELIM
from .ingest import ItemMetadata
from .store import EntityCandidate, KnowledgeBase, MergeReport, RelationCandidate, entity_key, stats
from .text import collapse_ws, normalize_name, normalize_type, stable_hash

logger = logging.getLogger(__name__)

PROFILE_CAP = 1200
MAX_ENTITIES = 20
MAX_RELATIONS = 30
FAILURE_CEILING = 0.05


@dataclass
class ItemProfile:
    item_id: str
    title: str
    text: str
    source_hash: str


@dataclass
class ExtractedEntity:
    name: str
    type: str
    description: str


@dataclass
class ExtractedRelation:
    source_name: str
    target_name: str
    description: str


@dataclass
class ExtractionResult:
    item_id: str
    title: str
    entities: list[ExtractedEntity]
    relations: list[ExtractedRelation]
    raw_response: str
    dropped: int = 0
    synthesized_item: bool = False

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "title": self.title,
            "entities": [[e.name, e.type, e.description] for e in self.entities],
            "relations": [[r.source_name, r.target_name, r.description] for r in self.relations],
            "raw_response": self.raw_response,
            "dropped": self.dropped,
            "synthesized_item": self.synthesized_item,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExtractionResult":
        return cls(
            item_id=data["item_id"],
            title=data["title"],
            entities=[ExtractedEntity(*e) for e in data["entities"]],
            relations=[ExtractedRelation(*r) for r in data["relations"]],
            raw_response=data.get("raw_response", ""),
            dropped=data.get("dropped", 0),
            synthesized_item=data.get("synthesized_item", False),
        )


@dataclass
class BuildReport:
    items_total: int = 0
    items_ok: int = 0
    items_failed: int = 0
    items_skipped: int = 0
    entities_inserted: int = 0
    entities_merged: int = 0
    relations_inserted: int = 0
    auto_created: int = 0
    llm_calls: int = 0
    tokens: int = 0
    failed: bool = False
    outcomes: dict[str, str] = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    @property
    def failures(self) -> int:
        return self.items_failed

    def to_dict(self) -> dict:
        return {
            "items_total": self.items_total,
            "items_ok": self.items_ok,
            "items_failed": self.items_failed,
            "items_skipped": self.items_skipped,
            "entities_inserted": self.entities_inserted,
            "entities_merged": self.entities_merged,
            "relations_inserted": self.relations_inserted,
            "auto_created": self.auto_created,
            "llm_calls": self.llm_calls,
            "tokens": self.tokens,
            "status": "failed" if self.failed else "ok",
            "outcomes": dict(sorted(self.outcomes.items())),
            "stats": self.stats,
        }


def source_hash(meta: ItemMetadata) -> str:
    return stable_hash(json.dumps(meta.to_dict(), sort_keys=True, ensure_ascii=False), 20)


def _attributes_text(meta: ItemMetadata) -> str:
    return "\n".join(f"{k}: {collapse_ws(v)}" for k, v in meta.attributes)


def generate_profile(meta: ItemMetadata, gateway: Gateway, cap: int = PROFILE_CAP) -> ItemProfile:
    if not meta.title.strip():
        raise ExtractionError(f"item {meta.item_id} has an empty title")
    request = render_template("profile", {
        "title": meta.title,
        "description": meta.description,
        "attributes": _attributes_text(meta),
        "review": meta.review,
    })
    text = ""
    for _ in range(2):  # one retry on an empty completion
        text = collapse_ws(gateway.chat(request))
        if text:
            break
    if not text:
        raise ExtractionError("empty profile")
    return ItemProfile(meta.item_id, meta.title, text[:cap], source_hash(meta))


_RECORD_PREFIX = re.compile(r"^[\s\-*•(\"'`]*(ENTITY|RELATION)\b", re.IGNORECASE)


def parse_extraction(raw: str) -> tuple[list[ExtractedEntity], list[ExtractedRelation], int]:
    """Parse delimiter records. Returns (entities, relations, dropped_record_count)."""
    entities, relations, dropped = [], [], 0
    for line in raw.splitlines():
        line = line.strip()
        if not line or COMPLETE_MARKER in line:
            continue
        match = _RECORD_PREFIX.match(line)
        if not match:
            if RECORD_DELIM in line:
                dropped += 1
            continue
        body = line[match.start(1):].rstrip(")\"'`")
        fields = [collapse_ws(f).strip("\"'`") for f in body.split(RECORD_DELIM)]
        kind = fields[0].upper()
        if kind == "ENTITY" and len(fields) == 4 and fields[1] and fields[3]:
            entities.append(ExtractedEntity(fields[1], normalize_type(fields[2] or "etc"), fields[3]))
        elif kind == "RELATION" and len(fields) == 4 and fields[1] and fields[2] and fields[3]:
            relations.append(ExtractedRelation(fields[1], fields[2], fields[3]))
        else:
            dropped += 1
    return entities, relations, dropped


def _finalize(profile: ItemProfile, raw: str, entities, relations, dropped) -> ExtractionResult:
    title_norm = normalize_name(profile.title)
    out_entities: list[ExtractedEntity] = []
    seen = set()
    item_entity = None
    for ent in entities:
        if ent.type == "item" and normalize_name(ent.name) == title_norm:
            if item_entity is None:
                item_entity = ExtractedEntity(profile.title, "item", ent.description)
            continue
        key = entity_key(ent.name, ent.type)
        if key in seen:
            continue
        seen.add(key)
        out_entities.append(ent)
    synthesized = item_entity is None
    if synthesized:
        item_entity = ExtractedEntity(profile.title, "item", _lead(profile.text))
    out_entities = [item_entity] + out_entities[: MAX_ENTITIES - 1]
    return ExtractionResult(
        item_id=profile.item_id,
        title=profile.title,
        entities=out_entities,
        relations=relations[:MAX_RELATIONS],
        raw_response=raw,
        dropped=dropped,
        synthesized_item=synthesized,
    )


def _lead(text: str, limit: int = 300) -> str:
    match = re.match(r"(.+?[.!?])(\s|$)", text)
    return (match.group(1) if match else text)[:limit]


def extract_graph(profile: ItemProfile, gateway: Gateway) -> ExtractionResult:
    """Ask for ENTITY/RELATION records; one repair round-trip if nothing parses."""
    slots = {"profile": profile.text, "title": profile.title}
    raw = gateway.chat(render_template("extraction", slots))
    entities, relations, dropped = parse_extraction(raw)
    if not entities and not relations:
        slots["repair"] = "no ENTITY or RELATION records were found"
        raw = gateway.chat(render_template("extraction", slots))
        entities, relations, dropped = parse_extraction(raw)
        if not entities and not relations:
            raise ExtractionError("extraction failed")
    return _finalize(profile, raw, entities, relations, dropped)


def _item_entity_name(kb: KnowledgeBase, title: str, item_id: str) -> str:
    key = entity_key(title, "item")
    existing = kb.entities.get(key)
    if existing is not None and existing.item_id not in (None, item_id):
        # another catalog item already owns this title
        return f"{title} [{item_id}]"
    return title


def apply_extraction(kb: KnowledgeBase, result: ExtractionResult, gateway: Gateway) -> MergeReport:
    """Resolve names to entity keys and upsert into the KB (caller holds the write gate)."""
    item_id = result.item_id
    item_name = _item_entity_name(kb, result.title, item_id)
    item_key = entity_key(item_name, "item")
    local: dict[str, str] = {normalize_name(result.title): item_key}
    candidates = [EntityCandidate(item_name, "item", result.entities[0].description, item_id, item_id)]
    for ent in result.entities[1:]:
        kind = ent.type
        if kind == "item":
            # mention of another item: link to it if the KB knows it, otherwise keep as generic
            known = [k for k in kb.keys_by_name(ent.name) if kb.entities[k].is_item]
            if known:
                local.setdefault(normalize_name(ent.name), known[0])
                continue
            kind = "etc"
        cand = EntityCandidate(ent.name, kind, ent.description, item_id)
        local.setdefault(normalize_name(ent.name), cand.key)
        candidates.append(cand)
    report = kb.upsert_entities(candidates, gateway.embed_arrays)

    def resolve(name: str) -> str:
        norm = normalize_name(name)
        if norm in local:
            return local[norm]
        known = kb.keys_by_name(name)
        if known:
            return known[0]
        return entity_key(name, "etc")

    rels = []
    for rel in result.relations:
        src, tgt = resolve(rel.source_name), resolve(rel.target_name)
        if src == tgt:
            continue
        rels.append(RelationCandidate(src, tgt, rel.description, item_id, rel.source_name, rel.target_name))
    if rels:
        report += kb.upsert_relations(rels, gateway.embed_arrays)
    return report


class Journal:
    """Append-only JSONL log of per-item outcomes, including the LLM outputs,
    so an interrupted build can resume without repeating calls."""

    def __init__(self, path):
        self.path = Path(path) if path else None
        self.entries: dict[tuple[str, str], dict] = {}
        if self.path and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    continue  # torn final line from a crash
                if rec.get("status") == "ok":
                    self.entries[(rec["item_id"], rec["source_hash"])] = rec

    def get(self, item_id: str, shash: str) -> dict | None:
        return self.entries.get((item_id, shash))

    def append(self, rec: dict) -> None:
        if rec.get("status") == "ok":
            self.entries[(rec["item_id"], rec["source_hash"])] = rec
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def _claim_embedder(kb: KnowledgeBase, gateway: Gateway) -> None:
    current = kb.manifest.get("embed_model_id")
    if not current:
        kb.manifest["embed_model_id"] = gateway.embed_model_id
    elif current != gateway.embed_model_id:
        raise StoreError(f"embedder mismatch: KB uses {current!r}, gateway uses {gateway.embed_model_id!r}")


def _process(meta: ItemMetadata, gateway: Gateway) -> tuple[ItemProfile, ExtractionResult]:
    profile = generate_profile(meta, gateway)
    return profile, extract_graph(profile, gateway)


def build_kb(
    catalog: dict[str, ItemMetadata],
    gateway: Gateway,
    kb: KnowledgeBase | None = None,
    journal_path=None,
    failure_ceiling: float = FAILURE_CEILING,
    workers: int | None = None,
) -> tuple[KnowledgeBase, BuildReport]:
    """Profile and extract every catalog item, then upsert in catalog order.

    LLM stages run concurrently; upserts are applied sequentially in sorted
    item order so the resulting KB does not depend on completion order.
    """
    if not catalog:
        raise ExtractionError("catalog is empty")
    kb = kb if kb is not None else KnowledgeBase(gateway.embed_model_id)
    _claim_embedder(kb, gateway)
    journal = Journal(journal_path)
    report = BuildReport(items_total=len(catalog))
    calls0, tokens0 = gateway.meter.calls, gateway.meter.tokens

    todo, replay = [], {}
    for item_id in sorted(catalog):
        meta = catalog[item_id]
        shash = source_hash(meta)
        if kb.ingested.get(item_id) == shash:
            report.items_skipped += 1
            report.outcomes[item_id] = "skipped"
            continue
        cached = journal.get(item_id, shash)
        if cached is not None:
            replay[item_id] = cached
        todo.append((item_id, shash))

    pending = [catalog[i] for i, _ in todo if i not in replay]
    results: dict[str, tuple | Exception] = {}
    with ThreadPoolExecutor(max_workers=workers or gateway.max_inflight) as pool:
        futures = {m.item_id: pool.submit(_process, m, gateway) for m in pending}
        for item_id, fut in futures.items():
            try:
                results[item_id] = fut.result()
            except BackendError:
                raise
            except KgRecError as exc:
                results[item_id] = exc

    merge = MergeReport()
    for item_id, shash in todo:
        if item_id in replay:
            extraction = ExtractionResult.from_dict(replay[item_id]["extraction"])
            profile_text = replay[item_id].get("profile", "")
        else:
            outcome = results[item_id]
            if isinstance(outcome, Exception):
                logger.warning("item %s failed: %s", item_id, outcome)
                report.items_failed += 1
                report.outcomes[item_id] = f"failed: {outcome}"
                journal.append({"item_id": item_id, "source_hash": shash, "status": "failed", "error": str(outcome)})
                continue
            profile, extraction = outcome
            profile_text = profile.text
            journal.append({"item_id": item_id, "source_hash": shash, "status": "ok",
                            "profile": profile_text, "extraction": extraction.to_dict()})
        with kb._lock:
            merge += apply_extraction(kb, extraction, gateway)
            kb.ingested[item_id] = shash
        report.items_ok += 1
        report.outcomes[item_id] = "ok"

    report.entities_inserted = merge.inserted
    report.entities_merged = merge.merged
    report.relations_inserted = merge.relations_inserted
    report.auto_created = merge.auto_created
    report.llm_calls = gateway.meter.calls - calls0
    report.tokens = gateway.meter.tokens - tokens0
    attempted = report.items_total - report.items_skipped
    report.failed = attempted > 0 and report.items_failed / attempted > failure_ceiling
    report.stats = stats(kb).as_dict()
    return kb, report


def add_item(meta: ItemMetadata, gateway: Gateway, kb: KnowledgeBase, journal_path=None) -> MergeReport:
    """Insert one new item into an existing KB without touching anything else."""
    _claim_embedder(kb, gateway)
    shash = source_hash(meta)
    if kb.ingested.get(meta.item_id) == shash:
        return MergeReport()
    journal = Journal(journal_path)
    cached = journal.get(meta.item_id, shash)
    if cached is not None:
        extraction = ExtractionResult.from_dict(cached["extraction"])
    else:
        profile, extraction = _process(meta, gateway)
        journal.append({"item_id": meta.item_id, "source_hash": shash, "status": "ok",
                        "profile": profile.text, "extraction": extraction.to_dict()})
    with kb._lock:
        report = apply_extraction(kb, extraction, gateway)
        kb.ingested[meta.item_id] = shash
    return report
