"""Run configuration: one YAML (or JSON) file, overridable from the command line.

Relative paths are resolved against the directory holding the config file.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from narco.errors import ValidationError
from narco.gateway import MODES, ProviderConfig


@dataclass
class ChatSettings:
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    credential_env: str = "OPENAI_API_KEY"
    retry_budget: int = 3
    timeout: float = 60.0
    backoff_base: float = 1.0
    requests_per_second: float = 2.0
    burst: int = 4
    generation_model: str = "gpt-4-1106-preview"
    verification_model: str = "gpt-3.5-turbo"
    scoring_model: str = "gpt-4-1106-preview"
    qa_model: str = "gpt-3.5-turbo"
    parallelism: int = 4


@dataclass
class EmbeddingSettings:
    provider: str = "hashing"  # hashing | mock | http
    dim: int = 256
    endpoint: str = "https://api.openai.com/v1/embeddings"
    credential_env: str = "OPENAI_API_KEY"
    model: str = "text-embedding-3-small"
    cache_dir: str | None = None


@dataclass
class PathSettings:
    fixtures: str | None = None
    corpus: str | None = None
    graph: str | None = None
    pairs: str | None = None
    checkpoints: str | None = None
    instance: str | None = None
    queries: str | None = None
    questions: str | None = None
    params: str | None = None
    output: str | None = None


@dataclass
class GraphSettings:
    max_words: int = 240
    window: int = 4
    cap: int = 4


@dataclass
class RecapSettings:
    alpha: float = 1.0
    beta: float = 1.0
    lambda_boost: float = 3.0
    k: int = 5


@dataclass
class RetrievalSettings:
    lambda_fuse: float = 0.1
    k: int = 10


@dataclass
class RerankSettings:
    epochs: int = 20
    learning_rate: float = 2e-5
    queries_per_batch: int = 20
    warmup_ratio: float = 0.05
    top_n: int = 50
    d: int | None = None


@dataclass
class QASettings:
    budget: int = 1150
    lambda_fuse: float = 0.1
    include_options: bool = False


@dataclass
class RunConfig:
    mode: str = "replay_strict"
    seed: int = 0
    chat: ChatSettings = field(default_factory=ChatSettings)
    embedding: EmbeddingSettings = field(default_factory=EmbeddingSettings)
    paths: PathSettings = field(default_factory=PathSettings)
    graph: GraphSettings = field(default_factory=GraphSettings)
    recap: RecapSettings = field(default_factory=RecapSettings)
    retrieval: RetrievalSettings = field(default_factory=RetrievalSettings)
    rerank: RerankSettings = field(default_factory=RerankSettings)
    qa: QASettings = field(default_factory=QASettings)

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ValidationError(f"mode: must be one of {MODES}, got {self.mode!r}")
        if self.embedding.provider not in ("hashing", "mock", "http"):
            raise ValidationError(f"embedding.provider: unknown provider {self.embedding.provider!r}")
        return self

    def provider_config(self) -> ProviderConfig:
        if self.mode != "live" and not self.paths.fixtures:
            raise ValidationError(f"paths.fixtures: required in {self.mode} mode")
        c = self.chat
        return ProviderConfig(
            endpoint=c.endpoint, credential_ref=c.credential_env, retry_budget=c.retry_budget,
            timeout=c.timeout, mode=self.mode, fixture_dir=self.paths.fixtures,
            backoff_base=c.backoff_base, requests_per_second=c.requests_per_second, burst=c.burst,
        )

    def require(self, dotted: str) -> Any:
        section, name = dotted.split(".")
        value = getattr(getattr(self, section), name)
        if value in (None, ""):
            raise ValidationError(f"{dotted}: required for this command (set it in the config or on the command line)")
        return value


def _build(cls, data: Any, prefix: str):
    if not isinstance(data, dict):
        raise ValidationError(f"{prefix or 'config'}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ValidationError(f"{prefix}{key}: unknown setting")
        f = known[key]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[key] = _build(sub, value or {}, f"{prefix}{key}.")
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _resolve_paths(cfg: RunConfig, base: Path) -> None:
    for f in dataclasses.fields(cfg.paths):
        value = getattr(cfg.paths, f.name)
        if value and not Path(value).is_absolute():
            setattr(cfg.paths, f.name, str((base / value).resolve()))
    if cfg.embedding.cache_dir and not Path(cfg.embedding.cache_dir).is_absolute():
        cfg.embedding.cache_dir = str((base / cfg.embedding.cache_dir).resolve())


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except FileNotFoundError:
        raise ValidationError(f"config: file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ValidationError(f"config: cannot parse {path}: {exc}") from None
    cfg = _build(RunConfig, data, "")
    _resolve_paths(cfg, path.parent)
    return cfg
