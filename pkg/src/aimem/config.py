"""YAML configuration.

Minimal example::

    providers:
      gpt4o:
        model: gpt-4o
        endpoint: https://api.openai.com/v1
        api_key_env: OPENAI_API_KEY
        max_context_tokens: 128000
      offline:
        kind: mock
        model: mock
        mock: {rules: [{match: "numerical score", response: "10"}], default: "ok"}
    niah:
      providers: [gpt4o]
      judge: gpt4o
      synthetic_corpora: 8
      context_lengths: [2000, 8000]

Relative paths are resolved against the config file's directory. Unknown
keys are rejected, and every provider named by a section must exist.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .corpus import COUNTERS
from .errors import ConfigError
from .niah import DEFAULT_CONTEXT_LENGTHS, DEFAULT_MODES
from .providers import MockScript, MockTransport, Provider, ProviderConfig, RetryPolicy, RunLog


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RetryModel(_Strict):
    max_attempts: int = Field(3, ge=1)
    backoff_base: float = Field(1.0, ge=0)
    backoff_factor: float = Field(2.0, ge=1)


class MockModel(_Strict):
    rules: list[dict] = []
    default: str = ""


class ProviderModel(_Strict):
    kind: Literal["openai", "mock"] = "openai"
    model: str
    endpoint: str = "https://api.openai.com/v1"
    api_key_env: Optional[str] = None
    max_context_tokens: int = Field(128_000, gt=0)
    temperature: float = Field(0.0, ge=0.0, le=2.0)
    max_parallel: int = Field(4, ge=1)
    retry: RetryModel = RetryModel()
    timeout: float = Field(60.0, gt=0)
    cost_per_1k_tokens: float = Field(0.0, ge=0)
    embedding_dim: int = Field(8, ge=1)
    script: Optional[str] = None
    mock: Optional[MockModel] = None


class NiahModel(_Strict):
    providers: list[str]
    judge: str
    pairs: Optional[str] = None
    corpora: list[str] = []
    synthetic_corpora: int = Field(0, ge=0)
    synthetic_items: int = Field(120, ge=1)
    context_lengths: list[int] = list(DEFAULT_CONTEXT_LENGTHS)
    modes: list[str] = list(DEFAULT_MODES)


class MemoryModel(_Strict):
    provider: str
    store: str = "memory"
    max_levels: int = Field(2, ge=0)


class RagModel(_Strict):
    generator: str
    embedder: Optional[str] = None
    k1: float = 1.2
    b: float = Field(0.75, ge=0, le=1)
    initial_k: int = Field(20, ge=1)
    final_k: int = Field(5, ge=1)
    rewrite_hits: int = Field(3, ge=1)


class LpmModel(_Strict):
    generator: str
    base_model: str = "Qwen2-7B-Instruct"
    chunk_window: int = Field(256, ge=1)
    chunk_overlap: int = Field(32, ge=0)
    max_skeleton_share: float = Field(0.30, gt=0, le=1)
    min_gate_size: int = Field(10, ge=1)
    size_multiplier: float = Field(10.0, gt=0)
    lora_rank: int = Field(64, ge=1)
    epochs: int = Field(5, ge=1)
    lr_schedule: str = "cosine"
    max_learning_rate: float = Field(1e-4, gt=0)
    decode_temperature: float = Field(0.0, ge=0)


class MethodModel(_Strict):
    type: Literal["ragpp", "long_context"]
    generator: str
    embedder: Optional[str] = None
    label: Optional[str] = None


class BenchModel(_Strict):
    judge: str
    methods: dict[str, MethodModel] = {}
    criteria: Optional[str] = None
    corpus: Optional[str] = None
    max_parallel: int = Field(1, ge=1)


class AppConfig(_Strict):
    providers: dict[str, ProviderModel] = {}
    counter: str = "wordpunct"
    output_dir: str = "runs"
    seed: int = 0
    niah: Optional[NiahModel] = None
    memory: Optional[MemoryModel] = None
    rag: Optional[RagModel] = None
    lpm: Optional[LpmModel] = None
    bench: Optional[BenchModel] = None

    base_dir: Path = Field(default=Path("."), exclude=True)

    @model_validator(mode="after")
    def _check_references(self):
        if self.counter not in COUNTERS:
            raise ValueError(f"unknown counter {self.counter!r}")
        refs: list[tuple[str, str]] = []
        if self.niah:
            refs += [("niah.providers", p) for p in self.niah.providers]
            refs.append(("niah.judge", self.niah.judge))
        if self.memory:
            refs.append(("memory.provider", self.memory.provider))
        if self.rag:
            refs.append(("rag.generator", self.rag.generator))
            if self.rag.embedder:
                refs.append(("rag.embedder", self.rag.embedder))
        if self.lpm:
            refs.append(("lpm.generator", self.lpm.generator))
        if self.bench:
            refs.append(("bench.judge", self.bench.judge))
            for name, m in self.bench.methods.items():
                refs.append((f"bench.methods.{name}.generator", m.generator))
                if m.embedder:
                    refs.append((f"bench.methods.{name}.embedder", m.embedder))
        for where, name in refs:
            if name not in self.providers:
                raise ValueError(f"{where}: provider {name!r} is not defined under providers")
        for name, p in self.providers.items():
            if p.kind == "mock" and p.script and p.mock:
                raise ValueError(f"providers.{name}: give either script or mock, not both")
        return self

    def path(self, value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def snapshot(self) -> dict:
        return self.model_dump(mode="json", exclude={"base_dir"})


def _format_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        msg = err["msg"]
        if err["type"] == "extra_forbidden":
            msg = "unknown key"
        parts.append(f"{loc}: {msg}")
    return "; ".join(parts)


def parse_config(data: dict, base_dir: Path | str = ".") -> AppConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at the top level")
    try:
        cfg = AppConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from None
    cfg.base_dir = Path(base_dir)
    return cfg


def load_config(path: str | Path) -> AppConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return parse_config(data, path.parent)


def provider_config(cfg: AppConfig, name: str) -> ProviderConfig:
    if name not in cfg.providers:
        raise ConfigError(f"provider {name!r} is not defined")
    p = cfg.providers[name]
    return ProviderConfig(
        name=name, model=p.model, kind=p.kind, endpoint=p.endpoint, api_key_env=p.api_key_env,
        max_context_tokens=p.max_context_tokens, temperature=p.temperature,
        max_parallel=p.max_parallel,
        retry=RetryPolicy(p.retry.max_attempts, p.retry.backoff_base, p.retry.backoff_factor),
        timeout=p.timeout, cost_per_1k_tokens=p.cost_per_1k_tokens, embedding_dim=p.embedding_dim,
    )


def build_provider(
    cfg: AppConfig, name: str, run_log: RunLog | None = None, resume: bool = False
) -> Provider:
    pc = provider_config(cfg, name)
    p = cfg.providers[name]
    counter = COUNTERS[cfg.counter]
    if p.kind == "mock":
        if p.script:
            script = MockScript.load(cfg.path(p.script))
        else:
            script = MockScript.from_dict((p.mock or MockModel()).model_dump())
        return Provider(pc, MockTransport(script=script), counter, run_log, resume, sleep=lambda s: None)
    from .providers import HttpTransport

    return Provider(pc, HttpTransport(), counter, run_log, resume)
