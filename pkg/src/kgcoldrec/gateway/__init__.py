"""LLM and embedding access: live HTTP, scripted replay and synthetic offline backends."""

from .client import BackendConfig, EmbeddingVector, Gateway, Meter, MeterRecord, create_gateway
from .http import HttpBackend
from .offline import (
    FunctionBackend,
    HashEmbedder,
    RecordingBackend,
    ScriptedBackend,
    SyntheticResponder,
    load_fixtures,
    prompt_key,
)
from .templates import FALLBACK_SYSTEM_PROMPT, TAGS, ChatRequest, render_template, sections

__all__ = [
    "BackendConfig", "ChatRequest", "EmbeddingVector", "FALLBACK_SYSTEM_PROMPT", "FunctionBackend",
    "Gateway", "HashEmbedder", "HttpBackend", "Meter", "MeterRecord", "RecordingBackend",
    "ScriptedBackend", "SyntheticResponder", "TAGS", "create_gateway", "load_fixtures",
    "prompt_key", "render_template", "sections",
]
