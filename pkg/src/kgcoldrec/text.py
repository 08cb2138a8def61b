"""Small text helpers: normalization, tokenization and stable hashing."""

from __future__ import annotations

import hashlib
import re
import unicodedata

_WS = re.compile(r"\s+")
_PUNCT = re.compile(r"[^\w\s]", re.UNICODE)
_TOKEN = re.compile(r"[a-z0-9]+")


def collapse_ws(text: str) -> str:
    return _WS.sub(" ", text or "").strip()


def normalize_name(name: str) -> str:
    """Case-fold, strip punctuation and collapse whitespace (entity identity)."""
    text = unicodedata.normalize("NFKC", name or "").casefold()
    text = _PUNCT.sub(" ", text).replace("_", " ")
    return collapse_ws(text)


def normalize_type(kind: str) -> str:
    text = normalize_name(kind)
    return text.replace(" ", "_") or "etc"


def normalize_title(title: str) -> str:
    """Title matching key: case-folded with punctuation and all whitespace removed."""
    return normalize_name(title).replace(" ", "")


def tokens(text: str) -> list[str]:
    text = unicodedata.normalize("NFKC", text or "").casefold()
    return _TOKEN.findall(text)


def stable_hash(text: str, length: int = 16) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:length]


def stable_int(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def approx_tokens(text: str) -> int:
    """Rough token count used for metering and budgets (whitespace words)."""
    return len((text or "").split())
