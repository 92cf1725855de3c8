"""Typed configuration with TOML/JSON loading and provider factories.

A config file holds only the sections it wants to change; everything
else keeps the defaults below. Unknown keys are rejected rather than
ignored so typos fail loudly. Dotted-path overrides support command
line flags.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib

from .embed import OfflineHashingEmbedder, RemoteEmbedder
from .errors import ConfigError
from .logproc import LlmFeatureExtractor, RuleBasedExtractor
from .prompts import EXTRACTION_PROMPT
from .providers import HttpChatProvider


@dataclass
class EmbeddingConfig:
    provider: str = "offline"  # offline | remote
    dimension: int = 3072
    seed: int = 0
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "ARCA_API_KEY"


@dataclass
class LogProcConfig:
    extractor: str = "rules"  # rules | llm
    char_budget: int = 8000
    rare_templates: int = 20
    metrics_max_lines: int = 40
    histogram_max: int = 30


@dataclass
class TelemetryConfig:
    grid_step: float = 1.0


@dataclass
class AnnConfig:
    n_clusters: int = 0  # 0 means ceil(sqrt(N))
    nprobe: int = 0  # 0 means ceil(C / 4)
    seed: int = 0


@dataclass
class PipelineConfig:
    k: int = 300
    retain_fraction: float = 0.8
    token_budget: int = 30000
    chars_per_token: int = 4
    judge: str = "offline"  # offline | remote
    planner: str = "offline"  # offline | remote
    chat_endpoint: str = ""
    chat_model: str = ""
    api_key_env: str = "ARCA_API_KEY"


@dataclass
class PromptsConfig:
    """Operator-editable prompt texts; empty string keeps the built-in."""

    extraction: str = ""  # log feature-extraction instruction
    judge_instruction: str = ""  # closest-bug selection instruction
    judge_exemplars: list = field(default_factory=list)  # worked judge examples
    plan: str = ""  # remote mitigation-plan prompt
    describe: str = ""  # remote ticket-description prompt


@dataclass
class CorpusConfig:
    configs_per_category: int = 100
    duration_s: int = 120
    seed: int = 0


@dataclass
class EvalConfig:
    n_queries: int = 100
    seed: int = 0
    repeats: int = 1
    ks: list = field(default_factory=list)  # extra K values for the per-K table


@dataclass
class ArcaConfig:
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    logproc: LogProcConfig = field(default_factory=LogProcConfig)
    telemetry: TelemetryConfig = field(default_factory=TelemetryConfig)
    ann: AnnConfig = field(default_factory=AnnConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    prompts: PromptsConfig = field(default_factory=PromptsConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    prices: dict = field(default_factory=dict)  # provider tag -> [in, out] per token

    def validate(self) -> "ArcaConfig":
        e, p = self.embedding, self.pipeline
        if e.provider not in ("offline", "remote"):
            raise ConfigError(f"embedding.provider must be offline or remote, got {e.provider!r}")
        if e.dimension < 8:
            raise ConfigError(f"embedding.dimension must be >= 8, got {e.dimension}")
        if e.provider == "remote" and not (e.endpoint and e.model):
            raise ConfigError("remote embedding needs embedding.endpoint and embedding.model")
        if self.logproc.extractor not in ("rules", "llm"):
            raise ConfigError(f"logproc.extractor must be rules or llm, got {self.logproc.extractor!r}")
        if self.logproc.char_budget < 1:
            raise ConfigError("logproc.char_budget must be positive")
        if self.telemetry.grid_step <= 0:
            raise ConfigError("telemetry.grid_step must be positive")
        if self.ann.n_clusters < 0 or self.ann.nprobe < 0:
            raise ConfigError("ann.n_clusters and ann.nprobe must be >= 0")
        if p.k < 1:
            raise ConfigError("pipeline.k must be >= 1")
        if not 0.0 < p.retain_fraction <= 1.0:
            raise ConfigError(
                f"pipeline.retain_fraction must be in (0, 1], got {p.retain_fraction}"
            )
        if p.token_budget < 1 or p.chars_per_token < 1:
            raise ConfigError("pipeline token budget settings must be positive")
        for role, value in (("judge", p.judge), ("planner", p.planner)):
            if value not in ("offline", "remote"):
                raise ConfigError(f"pipeline.{role} must be offline or remote, got {value!r}")
        needs_chat = self.logproc.extractor == "llm" or "remote" in (p.judge, p.planner)
        if needs_chat and not (p.chat_endpoint and p.chat_model):
            raise ConfigError(
                "remote judge/planner or llm extractor needs pipeline.chat_endpoint "
                "and pipeline.chat_model"
            )
        if self.corpus.configs_per_category < 1:
            raise ConfigError("corpus.configs_per_category must be >= 1")
        if self.corpus.duration_s < 2:
            raise ConfigError("corpus.duration_s must be >= 2")
        if self.eval.n_queries < 1:
            raise ConfigError("eval.n_queries must be >= 1")
        if self.eval.repeats < 1:
            raise ConfigError("eval.repeats must be >= 1")
        if not all(isinstance(k, int) and k >= 1 for k in self.eval.ks):
            raise ConfigError("eval.ks must hold integers >= 1")
        if not all(isinstance(x, str) for x in self.prompts.judge_exemplars):
            raise ConfigError("prompts.judge_exemplars must hold strings")
        for tag, pair in self.prices.items():
            if (
                not isinstance(pair, (list, tuple))
                or len(pair) != 2
                or not all(isinstance(x, (int, float)) for x in pair)
            ):
                raise ConfigError(
                    f"prices[{tag!r}] must be a two-number list [in, out] per token"
                )
        return self


def _hydrate(dc_type, data: dict, path: str):
    names = {f.name: f for f in dataclasses.fields(dc_type)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown config key {path}.{unknown[0]}")
    kwargs = {}
    for name, value in data.items():
        f = names[name]
        if dataclasses.is_dataclass(f.type) or (
            isinstance(f.type, str) and f.type.endswith("Config")
        ):
            sub_type = _SECTION_TYPES[name]
            if not isinstance(value, dict):
                raise ConfigError(f"{path}.{name} must be a table/object")
            kwargs[name] = _hydrate(sub_type, value, f"{path}.{name}")
        else:
            kwargs[name] = value
    return dc_type(**kwargs)


_SECTION_TYPES = {
    "embedding": EmbeddingConfig,
    "logproc": LogProcConfig,
    "telemetry": TelemetryConfig,
    "ann": AnnConfig,
    "pipeline": PipelineConfig,
    "prompts": PromptsConfig,
    "corpus": CorpusConfig,
    "eval": EvalConfig,
}


def config_from_dict(data: dict) -> ArcaConfig:
    return _hydrate(ArcaConfig, data, "config").validate()


def load_config(path: str | Path | None) -> ArcaConfig:
    """TOML or JSON by file suffix; None gives the defaults."""
    if path is None:
        return ArcaConfig().validate()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    suffix = p.suffix.lower()
    if suffix == ".toml":
        try:
            data = tomllib.loads(p.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p} is not valid TOML: {exc}") from exc
    elif suffix == ".json":
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p} is not valid JSON: {exc}") from exc
    else:
        raise ConfigError(f"config file {p} must end in .toml or .json")
    if not isinstance(data, dict):
        raise ConfigError(f"config root in {p} must be a table/object")
    return config_from_dict(data)


def apply_overrides(config: ArcaConfig, overrides: dict[str, object]) -> ArcaConfig:
    """Dotted-path overrides, e.g. {'pipeline.k': 100}."""
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        target = config
        for part in parts[:-1]:
            if not hasattr(target, part):
                raise ConfigError(f"unknown config section {dotted!r}")
            target = getattr(target, part)
        leaf = parts[-1]
        if not dataclasses.is_dataclass(target) or not hasattr(target, leaf):
            raise ConfigError(f"unknown config key {dotted!r}")
        current = getattr(target, leaf)
        if current is not None and not isinstance(value, type(current)):
            try:
                value = type(current)(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {dotted!r}: {value!r}") from exc
        setattr(target, leaf, value)
    return config.validate()


def make_embedder(config: ArcaConfig):
    e = config.embedding
    if e.provider == "offline":
        return OfflineHashingEmbedder(e.dimension, seed=e.seed)
    return RemoteEmbedder(
        endpoint=e.endpoint,
        model=e.model,
        dimension=e.dimension,
        api_key_env=e.api_key_env,
    )


def make_chat_provider(config: ArcaConfig) -> HttpChatProvider:
    p = config.pipeline
    if not (p.chat_endpoint and p.chat_model):
        raise ConfigError(
            "pipeline.chat_endpoint and pipeline.chat_model are required "
            "for remote chat calls"
        )
    return HttpChatProvider(
        endpoint=p.chat_endpoint, model=p.chat_model, api_key_env=p.api_key_env
    )


def make_extractor(config: ArcaConfig):
    lp = config.logproc
    if lp.extractor == "rules":
        return RuleBasedExtractor(
            char_budget=lp.char_budget,
            rare_templates=lp.rare_templates,
            metrics_max_lines=lp.metrics_max_lines,
            histogram_max=lp.histogram_max,
        )
    return LlmFeatureExtractor(
        provider=make_chat_provider(config),
        prompt=config.prompts.extraction or EXTRACTION_PROMPT,
        char_budget=lp.char_budget,
        metrics_max_lines=lp.metrics_max_lines,
        histogram_max=lp.histogram_max,
    )


def judge_provider(config: ArcaConfig):
    return make_chat_provider(config) if config.pipeline.judge == "remote" else None


def plan_provider(config: ArcaConfig):
    return make_chat_provider(config) if config.pipeline.planner == "remote" else None


def price_table(config: ArcaConfig) -> dict[str, tuple[float, float]]:
    return {tag: (float(a), float(b)) for tag, (a, b) in config.prices.items()}


def judge_instruction(config: ArcaConfig) -> str | None:
    """Configured judge instruction, or None to use the built-in."""
    return config.prompts.judge_instruction or None


def judge_exemplars(config: ArcaConfig) -> tuple[str, ...] | None:
    return tuple(config.prompts.judge_exemplars) or None


def plan_prompt(config: ArcaConfig) -> str | None:
    return config.prompts.plan or None
