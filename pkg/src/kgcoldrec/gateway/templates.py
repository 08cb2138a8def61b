"""Prompt templates for the four LLM stages.

Prompts are split into ``### NAME`` sections. Slot values are escaped so that
a value can never open a new section or forge an extraction record.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from ..errors import ConfigError

TAGS = ("profile", "extraction", "edge_scoring", "recommendation")

RECORD_DELIM = "<|>"
COMPLETE_MARKER = "<|COMPLETE|>"

REQUIRED_SLOTS = {
    "profile": ("title", "description", "attributes", "review"),
    "extraction": ("profile", "title"),
    "edge_scoring": ("history", "edges"),
    "recommendation": ("context", "history", "candidates", "k"),
}

DEFAULT_MAX_TOKENS = {
    "profile": 400,
    "extraction": 1500,
    "edge_scoring": 256,
    "recommendation": 800,
}

FALLBACK_SYSTEM_PROMPT = (
    "You are a recommendation assistant for an online product catalog. "
    "Suggest the items a user is most likely to interact with next."
)

_SECTION_START = re.compile(r"(?m)^(\s*)#")


@dataclass
class ChatRequest:
    system_prompt: str
    user_prompt: str
    tag: str
    max_tokens: int = 512
    temperature: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ConfigError(f"unknown request tag: {self.tag}")
        if not self.user_prompt.strip() or not self.system_prompt.strip():
            raise ConfigError("prompts must be non-empty")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")


def escape(value: str) -> str:
    value = str(value).replace(RECORD_DELIM, "< | >").replace("<|", "< |").replace("|>", "| >")
    return _SECTION_START.sub(r"\1\\#", value)


def _section(name: str, body: str) -> str:
    return f"### {name}\n{body.strip() or '(none)'}\n"


def _bullets(value: str) -> str:
    lines = [ln.strip() for ln in value.splitlines() if ln.strip()]
    return "\n".join(f"- {ln}" for ln in lines)


def _numbered(value: str) -> str:
    lines = [ln.strip() for ln in value.splitlines() if ln.strip()]
    return "\n".join(f"{i}. {ln}" for i, ln in enumerate(lines, 1))


def _profile(s: dict) -> tuple[str, str]:
    system = "You are a product catalog analyst who writes concise, factual item profiles."
    user = (
        "Write a short profile (at most 150 words) of the item below. Use the metadata and the "
        "reviews, and fill obvious gaps with well-established knowledge about the item. Mention "
        "its genre, key features, notable entities such as characters, brands or franchises, the "
        "audience it targets and its setting. Reply with the profile text only.\n\n"
        + _section("TITLE", s["title"])
        + _section("DESCRIPTION", s["description"])
        + _section("ATTRIBUTES", s["attributes"])
        + _section("REVIEWS", s["review"])
        + "### END\n"
    )
    return system, user


def _extraction(s: dict) -> tuple[str, str]:
    system = "You turn item descriptions into knowledge-graph records."
    user = (
        "Extract the entities and the relations between them from the item profile below.\n"
        "Entity types: item, genre, feature, target_user, setting, etc. Use another short type "
        "only when none of these fits.\n"
        f"The item itself must be one entity of type item named exactly: {s['title']}\n"
        "Write one record per line and nothing else:\n"
        f"ENTITY{RECORD_DELIM}name{RECORD_DELIM}type{RECORD_DELIM}one-sentence description\n"
        f"RELATION{RECORD_DELIM}source name{RECORD_DELIM}target name{RECORD_DELIM}"
        "one sentence explaining the connection\n"
        f"End with the line {COMPLETE_MARKER}\n\n"
        + _section("TITLE", s["title"])
        + _section("PROFILE", s["profile"])
        + "### END\n"
    )
    if s.get("repair"):
        user += (
            "\nYour previous answer could not be parsed: "
            f"{s['repair']}\nAnswer again using only ENTITY and RELATION lines.\n"
        )
    return system, user


def _edge_scoring(s: dict) -> tuple[str, str]:
    system = "You judge how well knowledge-graph relations match a user's interests."
    user = (
        "The user interacted with the items listed under HISTORY (oldest first). For each "
        "relation under RELATIONS, rate how useful following it would be for finding items this "
        "user will like, as an integer from 0 (irrelevant) to 10 (highly relevant).\n"
        "Reply with one line per relation in the form <number>: <score> and nothing else.\n\n"
        + _section("HISTORY", _bullets(s["history"]))
        + _section("RELATIONS", _numbered(s["edges"]))
        + "### END\n"
    )
    return system, user


def _recommendation(s: dict) -> tuple[str, str]:
    system = s["context"].strip() or FALLBACK_SYSTEM_PROMPT
    k = s["k"]
    body = _section("HISTORY", _bullets(s["history"]))
    if s["candidates"].strip():
        body += _section("CANDIDATES", _numbered(s["candidates"]))
        task = (
            f"Recommend the top {k} items among the given candidate list, based on the user's "
            "history and the retrieved context. "
        )
    else:
        task = f"Recommend the top {k} items this user is most likely to interact with next. "
    task += (
        f"Answer with a numbered list of exactly {k} item titles, one per line, best first, "
        "copying each title exactly and adding nothing else."
    )
    user = (
        "The user's interaction history is listed under HISTORY, oldest first.\n\n"
        + body
        + _section("TASK", task)
        + "### END\n"
    )
    return system, user


_BUILDERS = {
    "profile": _profile,
    "extraction": _extraction,
    "edge_scoring": _edge_scoring,
    "recommendation": _recommendation,
}


def render_template(template_id: str, slots: dict, *, temperature: float = 0.0, max_tokens: int | None = None) -> ChatRequest:
    if template_id not in _BUILDERS:
        raise ConfigError(f"unknown template: {template_id}")
    for name in REQUIRED_SLOTS[template_id]:
        if name not in slots or slots[name] is None:
            raise ConfigError(f"missing slot: {name}")
    escaped = {name: escape(value) for name, value in slots.items() if value is not None}
    system, user = _BUILDERS[template_id](escaped)
    return ChatRequest(
        system_prompt=system,
        user_prompt=user,
        tag=template_id,
        max_tokens=max_tokens or DEFAULT_MAX_TOKENS[template_id],
        temperature=temperature,
    )


def sections(prompt: str) -> dict[str, str]:
    """Split a rendered prompt back into its ``### NAME`` sections."""
    out: dict[str, str] = {}
    current = None
    lines: list[str] = []
    for line in prompt.splitlines():
        if line.startswith("### "):
            if current is not None:
                out[current] = "\n".join(lines).strip()
            current = line[4:].strip()
            lines = []
        elif current is not None:
            lines.append(line)
    if current is not None and current != "END":
        out[current] = "\n".join(lines).strip()
    return out
