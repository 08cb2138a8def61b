"""Run configuration: defaults, then a YAML/JSON file, then command-line flags."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .evaluation import EvalConfig
from .gateway import BackendConfig
from .recommender import RecommendConfig
from .retrieval import RetrievalConfig


@dataclass
class IngestConfig:
    format: str = "amazon_jsonl"
    threshold: int = 5
    fraction: float = 0.1
    sample_size: int = 500


@dataclass
class Paths:
    corpus: str | None = None
    kb: str | None = None
    out: str | None = None


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    backend: BackendConfig = field(default_factory=BackendConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    recommend: RecommendConfig = field(default_factory=RecommendConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, directory) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "run_config.json"
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    def validate(self) -> None:
        self.backend.validate()
        self.retrieval.validate()
        self.eval.validate()
        if not 0 < self.ingest.fraction < 1:
            raise ConfigError("ingest.fraction must lie in (0, 1)")
        if self.ingest.threshold < 1 or self.ingest.sample_size < 1:
            raise ConfigError("ingest.threshold and ingest.sample_size must be >= 1")


_SECTIONS = {"paths": Paths, "backend": BackendConfig, "ingest": IngestConfig, "retrieval": RetrievalConfig,
             "recommend": RecommendConfig, "eval": EvalConfig}


def _apply(target, values: dict, where: str) -> None:
    known = {f.name for f in fields(target)}
    for key, value in values.items():
        name = key.replace("-", "_")
        if name == "lambda":
            name = "lam"
        if name not in known:
            raise ConfigError(f"unknown config key: {where}.{key}")
        setattr(target, name, value)


def from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in (data or {}).items():
        if key == "seed":
            cfg.seed = int(value)
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key} must be a mapping")
            _apply(getattr(cfg, key), value, key)
        else:
            raise ConfigError(f"unknown config section: {key}")
    return cfg


def load_config(path=None) -> RunConfig:
    """Defaults overlaid with an optional YAML or JSON file (JSON is valid YAML)."""
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid config file {p}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"config file {p} must hold a mapping")
    return from_dict(data or {})


def override(cfg: RunConfig, section: str, name: str, value) -> None:
    """Apply one flag value; ``None`` means the flag was not given."""
    if value is None:
        return
    target = cfg if section == "" else getattr(cfg, section)
    setattr(target, name, value)
