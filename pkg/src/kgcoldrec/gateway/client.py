"""The gateway: one object every stage talks to for chat and embeddings."""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import BackendError, ConfigError
from ..text import approx_tokens, stable_hash
from .http import HttpBackend
from .offline import HashEmbedder, RecordingBackend, ScriptedBackend, SyntheticResponder
from .templates import ChatRequest

logger = logging.getLogger(__name__)

BACKEND_KINDS = ("http_openai_compatible", "scripted", "hash_synthetic")
MAX_EMBED_CHARS = 8000


@dataclass
class BackendConfig:
    kind: str = "hash_synthetic"
    base_url: str | None = None
    api_key_env: str = "OPENAI_API_KEY"
    model_name: str = "gpt-4o-mini"
    embed_model_name: str = "text-embedding-3-small"
    max_inflight: int = 4
    retry_limit: int = 4
    timeout: float = 60.0
    fixture_path: str | None = None
    strict_fixtures: bool = False
    embed_dimension: int = 256
    cache: bool = False
    meter_log: str | None = None

    def validate(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"unknown backend kind: {self.kind}")
        if self.kind == "http_openai_compatible" and not self.base_url:
            raise ConfigError("http backend requires base_url")
        if self.kind == "scripted" and not self.fixture_path:
            raise ConfigError("scripted backend requires fixture_path")
        if self.max_inflight < 1:
            raise ConfigError("max_inflight must be >= 1")


@dataclass
class EmbeddingVector:
    values: np.ndarray
    model_id: str


@dataclass
class MeterRecord:
    timestamp: float
    tag: str
    prompt_tokens: int
    completion_tokens: int
    retries: int


@dataclass
class Meter:
    records: list[MeterRecord] = field(default_factory=list)
    embed_calls: int = 0
    log_path: str | None = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def add(self, record: MeterRecord) -> None:
        with self._lock:
            self.records.append(record)
            if self.log_path:
                with open(self.log_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(asdict(record)) + "\n")

    @property
    def calls(self) -> int:
        return len(self.records)

    @property
    def retries(self) -> int:
        return sum(r.retries for r in self.records)

    @property
    def tokens(self) -> int:
        return sum(r.prompt_tokens + r.completion_tokens for r in self.records)

    def calls_by_tag(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            out[r.tag] = out.get(r.tag, 0) + 1
        return out


class Gateway:
    """Uniform chat/embedding access with metering and an admission gate.

    ``chat_backend`` must expose ``complete(request) -> (text, usage)``;
    ``embedder`` must expose ``embed(texts) -> list[array]`` and ``model_id``.
    """

    def __init__(self, chat_backend, embedder, *, kind: str = "custom", max_inflight: int = 4,
                 cache: bool = False, meter_log: str | None = None):
        self.chat_backend = chat_backend
        self.embedder = embedder
        self.kind = kind
        self.meter = Meter(log_path=meter_log)
        self.max_inflight = max_inflight
        self._gate = threading.BoundedSemaphore(max_inflight)
        self._cache: dict[str, str] | None = {} if cache else None

    @property
    def embed_model_id(self) -> str:
        return self.embedder.model_id

    @property
    def deterministic(self) -> bool:
        return self.kind in ("scripted", "hash_synthetic")

    def chat(self, request: ChatRequest) -> str:
        cache_key = None
        if self._cache is not None:
            cache_key = request.tag + ":" + stable_hash(request.system_prompt + "\0" + request.user_prompt, 32)
            if cache_key in self._cache:
                return self._cache[cache_key]
        with self._gate:
            text, usage = self.chat_backend.complete(request)
        self.meter.add(MeterRecord(
            timestamp=time.time(),
            tag=request.tag,
            prompt_tokens=int(usage.get("prompt_tokens", approx_tokens(request.system_prompt) + approx_tokens(request.user_prompt))),
            completion_tokens=int(usage.get("completion_tokens", approx_tokens(text))),
            retries=int(usage.get("retries", 0)),
        ))
        if cache_key is not None:
            self._cache[cache_key] = text
        return text

    def embed(self, texts: list[str]) -> list[EmbeddingVector]:
        if not texts:
            raise BackendError("embed() needs at least one text")
        clipped = []
        for text in texts:
            if len(text) > MAX_EMBED_CHARS:
                logger.warning("truncating %d-character text before embedding", len(text))
                text = text[:MAX_EMBED_CHARS]
            clipped.append(text)
        with self._gate:
            vectors = self.embedder.embed(clipped)
        self.meter.embed_calls += 1
        out = []
        for vec in vectors:
            arr = np.asarray(vec, dtype=np.float32)
            if not np.all(np.isfinite(arr)):
                raise BackendError("embedding contains non-finite values")
            out.append(EmbeddingVector(arr, self.embed_model_id))
        return out

    def embed_arrays(self, texts: list[str]) -> list[np.ndarray]:
        return [v.values for v in self.embed(texts)]


class _HttpEmbedder:
    def __init__(self, backend: HttpBackend):
        self.backend = backend
        self.model_id = backend.embed_model_name

    def embed(self, texts):
        return self.backend.embed(texts)


def create_gateway(config: BackendConfig, *, record: bool = False, transport=None, sleep=None) -> Gateway:
    """Build a gateway from configuration.

    ``record=True`` wraps the chat backend in a RecordingBackend (used to
    produce fixtures for later scripted replays).
    """
    config.validate()
    if config.kind == "http_openai_compatible":
        kwargs = {"transport": transport}
        if sleep is not None:
            kwargs["sleep"] = sleep
        backend = HttpBackend(
            config.base_url, config.model_name, config.embed_model_name,
            api_key_env=config.api_key_env, retry_limit=config.retry_limit,
            timeout=config.timeout, **kwargs,
        )
        chat, embedder = backend, _HttpEmbedder(backend)
    elif config.kind == "scripted":
        chat = ScriptedBackend(fixture_dir=Path(config.fixture_path), strict=config.strict_fixtures)
        embedder = HashEmbedder(config.embed_dimension)
    else:
        chat = SyntheticResponder()
        embedder = HashEmbedder(config.embed_dimension)
    if record:
        chat = RecordingBackend(chat, strict=config.strict_fixtures)
    return Gateway(chat, embedder, kind=config.kind, max_inflight=config.max_inflight,
                   cache=config.cache, meter_log=config.meter_log)
