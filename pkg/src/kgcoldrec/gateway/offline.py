"""Deterministic backends that need no network.

* ``HashEmbedder``: signed feature hashing of the normalized token multiset.
* ``SyntheticResponder``: heuristic answers for the four templates, computed
  only from the prompt text, so it also works behind an HTTP stub.
* ``ScriptedBackend``: replays recorded responses keyed on the prompt.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from pathlib import Path
from typing import Callable

import numpy as np

from ..errors import ConfigError, UnscriptedPromptError
from ..text import collapse_ws, stable_hash, stable_int, tokens
from .templates import COMPLETE_MARKER, RECORD_DELIM, ChatRequest, sections

logger = logging.getLogger(__name__)


class HashEmbedder:
    def __init__(self, dimension: int = 256):
        if dimension < 2:
            raise ConfigError("embedding dimension must be >= 2")
        self.dimension = dimension
        self.model_id = f"hash-synthetic-{dimension}"

    def embed_one(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        counts = Counter(tokens(text)) or Counter({"<empty>": 1})
        for tok in sorted(counts):
            h = stable_int(tok)
            sign = 1.0 if (h >> 63) & 1 else -1.0
            vec[h % self.dimension] += sign * counts[tok]
        norm = np.linalg.norm(vec)
        if norm == 0:
            # every token collided and cancelled; fall back to a fixed axis
            vec[stable_int(text) % self.dimension] = 1.0
            norm = 1.0
        return (vec / norm).astype(np.float32)

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        return [self.embed_one(t) for t in texts]


def prompt_key(request: ChatRequest, strict: bool = False) -> str:
    """Fixture key for a request: tag plus a hash of the (normalized) prompt text."""
    if strict:
        return f"{request.tag}:strict:{stable_hash(request.system_prompt + chr(0) + request.user_prompt, 32)}"
    text = collapse_ws(request.system_prompt) + "\n" + collapse_ws(request.user_prompt)
    return f"{request.tag}:{stable_hash(text, 24)}"


class ScriptedBackend:
    """Serves responses from fixture files of ``{"key": ..., "response": ...}`` objects.

    A fixture file may hold a single object or a list of them.
    """

    def __init__(self, fixtures: dict[str, str] | None = None, fixture_dir=None, strict: bool = False):
        self.strict = strict
        self.fixtures: dict[str, str] = dict(fixtures or {})
        if fixture_dir is not None:
            self.fixtures.update(load_fixtures(fixture_dir))

    def complete(self, request: ChatRequest) -> tuple[str, dict]:
        key = prompt_key(request, self.strict)
        if key not in self.fixtures:
            raise UnscriptedPromptError(key)
        return self.fixtures[key], {}


def load_fixtures_file(path) -> dict[str, str]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return {e["key"]: e["response"] for e in (data if isinstance(data, list) else [data])}
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"malformed fixture file {path}: {exc}") from exc


def load_fixtures(fixture_dir) -> dict[str, str]:
    root = Path(fixture_dir)
    if not root.is_dir():
        raise ConfigError(f"fixture directory not found: {root}")
    out: dict[str, str] = {}
    for path in sorted(root.glob("*.json")):
        out.update(load_fixtures_file(path))
    return out


class RecordingBackend:
    """Wraps another backend and remembers every (key, response) pair it serves."""

    def __init__(self, inner, strict: bool = False):
        self.inner = inner
        self.strict = strict
        self.recorded: dict[str, dict] = {}

    def complete(self, request: ChatRequest) -> tuple[str, dict]:
        text, usage = self.inner.complete(request)
        self.recorded[prompt_key(request, self.strict)] = {"tag": request.tag, "response": text}
        return text, usage

    def dump(self, fixture_dir) -> list[Path]:
        """Write one JSON list per tag, sorted by key; entries already on disk are kept."""
        root = Path(fixture_dir)
        root.mkdir(parents=True, exist_ok=True)
        by_tag: dict[str, dict[str, str]] = {}
        for key, entry in self.recorded.items():
            by_tag.setdefault(entry["tag"], {})[key] = entry["response"]
        written = []
        for tag, entries in sorted(by_tag.items()):
            path = root / f"{tag}.json"
            if path.exists():
                entries = {**load_fixtures_file(path), **entries}
            payload = [{"key": k, "response": entries[k]} for k in sorted(entries)]
            path.write_text(json.dumps(payload, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
            written.append(path)
        return written


class FunctionBackend:
    """Answers with a plain callable; handy for tests that script by content."""

    def __init__(self, fn: Callable[[ChatRequest], str]):
        self.fn = fn

    def complete(self, request: ChatRequest) -> tuple[str, dict]:
        return self.fn(request), {}


# -- synthetic responder ---------------------------------------------------

_ATTR_TYPES = {
    "genre": "genre",
    "genres": "genre",
    "category": "genre",
    "categories": "genre",
    "feature": "feature",
    "features": "feature",
    "setting": "setting",
    "platform": "setting",
    "theme": "setting",
    "audience": "target_user",
    "target_user": "target_user",
    "target user": "target_user",
}
_NUMBERED = re.compile(r"^\s*(\d+)\.\s+(.*)$")


def _first_sentence(text: str, limit: int = 200) -> str:
    text = collapse_ws(text)
    match = re.match(r"(.+?[.!?])(\s|$)", text)
    sentence = match.group(1) if match else text
    return sentence[:limit]


def _unescape(text: str) -> str:
    return re.sub(r"(?m)^(\s*)\\#", r"\1#", text)


class SyntheticResponder:
    """Rule-based stand-in for an instruction-following model.

    Answers are a pure function of the prompt text. Quality is beside the
    point; the responses only have to exercise every parser and stage.
    """

    def complete(self, request: ChatRequest) -> tuple[str, dict]:
        handler = getattr(self, f"_{request.tag}")
        return handler(request), {}

    def _profile(self, request: ChatRequest) -> str:
        s = sections(request.user_prompt)
        title = _unescape(s.get("TITLE", "")).strip()
        desc = collapse_ws(s.get("DESCRIPTION", ""))
        if desc == "(none)":
            desc = ""
        attrs = []
        for line in s.get("ATTRIBUTES", "").splitlines():
            if ":" in line:
                key, value = line.split(":", 1)
                attrs.append(f"{key.strip().lower()}: {collapse_ws(value)}")
        words = desc.split()
        summary = " ".join(words[:60])
        parts = [f"{title} is a catalog item."]
        if summary:
            parts.append(summary if summary.endswith(".") else summary + ".")
        if attrs:
            parts.append("Attributes: " + " | ".join(attrs) + ".")
        review = collapse_ws(s.get("REVIEWS", ""))
        if review and review != "(none)":
            parts.append("Reviewers mention: " + " ".join(review.split()[:25]) + ".")
        return " ".join(parts)

    def _extraction(self, request: ChatRequest) -> str:
        s = sections(request.user_prompt)
        title = _unescape(s.get("TITLE", "")).strip()
        profile = s.get("PROFILE", "")
        lines = [f"ENTITY{RECORD_DELIM}{title}{RECORD_DELIM}item{RECORD_DELIM}{_first_sentence(profile.split('Attributes:')[0])}"]
        match = re.search(r"Attributes: (.*?)\.(?:\s|$)", profile)
        seen = set()
        if match:
            for chunk in match.group(1).split(" | "):
                if ":" not in chunk:
                    continue
                key, value = (part.strip() for part in chunk.split(":", 1))
                if not value or value.lower() in seen:
                    continue
                seen.add(value.lower())
                kind = _ATTR_TYPES.get(key, "feature")
                label = kind.replace("_", " ")
                lines.append(f"ENTITY{RECORD_DELIM}{value}{RECORD_DELIM}{kind}{RECORD_DELIM}{value} is a {label} found in catalog items.")
                lines.append(f"RELATION{RECORD_DELIM}{title}{RECORD_DELIM}{value}{RECORD_DELIM}{title} has the {label} {value}.")
                lines.append(f"RELATION{RECORD_DELIM}{value}{RECORD_DELIM}{title}{RECORD_DELIM}{value} is a {label} of {title}.")
        lines.append(COMPLETE_MARKER)
        return "\n".join(lines)

    def _edge_scoring(self, request: ChatRequest) -> str:
        s = sections(request.user_prompt)
        history = set(tokens(s.get("HISTORY", "")))
        out = []
        for line in s.get("RELATIONS", "").splitlines():
            m = _NUMBERED.match(line)
            if not m:
                continue
            edge_tokens = tokens(m.group(2)) or ["<empty>"]
            overlap = sum(1 for t in edge_tokens if t in history) / len(edge_tokens)
            jitter = stable_int(m.group(2)) % 5
            score = max(0, min(10, round(2 + 7 * overlap + jitter)))
            out.append(f"{m.group(1)}: {score}")
        return "\n".join(out)

    def _recommendation(self, request: ChatRequest) -> str:
        s = sections(request.user_prompt)
        k = 10
        km = re.search(r"exactly (\d+) item titles", s.get("TASK", ""))
        if km:
            k = int(km.group(1))
        history = [_unescape(ln[2:]).strip() for ln in s.get("HISTORY", "").splitlines() if ln.startswith("- ")]
        interest = Counter(tokens(" ".join(history)))
        interest.update(tokens(request.system_prompt))
        candidates = []
        for line in s.get("CANDIDATES", "").splitlines():
            m = _NUMBERED.match(line)
            if m:
                candidates.append(_unescape(m.group(2)).strip())
        if candidates:
            def score(title: str) -> tuple:
                toks = tokens(title) or ["<empty>"]
                return (-sum(interest[t] for t in toks) / len(toks), stable_int(title))
            ranked = sorted(dict.fromkeys(candidates), key=score)[:k]
        else:
            ranked = [f"{title} Remastered" for title in reversed(history)][:k]
        return "\n".join(f"{i}. {title}" for i, title in enumerate(ranked, 1))
