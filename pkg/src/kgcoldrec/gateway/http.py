"""OpenAI-compatible HTTP client for chat completions and embeddings."""

from __future__ import annotations

import logging
import os
import time
from typing import Callable

import httpx
import numpy as np

from ..errors import BackendError, ConfigError
from .templates import ChatRequest

logger = logging.getLogger(__name__)

RETRYABLE_STATUS = {408, 409, 429, 500, 502, 503, 504}
EMBED_BATCH = 64


class RetryExhausted(BackendError):
    pass


class HttpBackend:
    def __init__(
        self,
        base_url: str,
        model_name: str,
        embed_model_name: str,
        api_key_env: str = "OPENAI_API_KEY",
        retry_limit: int = 4,
        timeout: float = 60.0,
        backoff_base: float = 1.0,
        backoff_cap: float = 30.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not base_url:
            raise ConfigError("http backend requires base_url")
        root = base_url.rstrip("/")
        self.root = root if root.endswith("/v1") else root + "/v1"
        self.model_name = model_name
        self.embed_model_name = embed_model_name
        self.retry_limit = retry_limit
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.sleep = sleep
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self.client = httpx.Client(headers=headers, timeout=timeout, transport=transport)
        self.last_retries = 0

    def _post(self, path: str, payload: dict) -> tuple[dict, int]:
        retries = 0
        while True:
            try:
                resp = self.client.post(self.root + path, json=payload)
            except httpx.TransportError as exc:
                error: Exception = exc
                status = None
            else:
                if resp.status_code < 400:
                    try:
                        return resp.json(), retries
                    except ValueError as exc:
                        raise BackendError(f"invalid JSON from {path}: {exc}") from exc
                status = resp.status_code
                error = BackendError(f"HTTP {status} from {path}: {resp.text[:200]}")
                if status not in RETRYABLE_STATUS:
                    raise error
            if retries >= self.retry_limit:
                raise RetryExhausted(f"exhausted retries ({retries}) for {path}: {error}")
            delay = min(self.backoff_cap, self.backoff_base * (2 ** retries))
            logger.warning("transient failure on %s (%s); retry %d in %.1fs", path, status or error, retries + 1, delay)
            self.sleep(delay)
            retries += 1

    def complete(self, request: ChatRequest) -> tuple[str, dict]:
        payload = {
            "model": self.model_name,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        data, retries = self._post("/chat/completions", payload)
        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed chat response: {exc}") from exc
        usage = dict(data.get("usage") or {})
        usage["retries"] = retries
        return text, usage

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for start in range(0, len(texts), EMBED_BATCH):
            batch = texts[start:start + EMBED_BATCH]
            data, _ = self._post("/embeddings", {"model": self.embed_model_name, "input": batch})
            try:
                rows = sorted(data["data"], key=lambda row: row["index"])
                out.extend(np.asarray(row["embedding"], dtype=np.float32) for row in rows)
            except (KeyError, TypeError) as exc:
                raise BackendError(f"malformed embedding response: {exc}") from exc
        if len(out) != len(texts):
            raise BackendError("embedding response length mismatch")
        return out

    def close(self) -> None:
        self.client.close()
