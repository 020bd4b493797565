"""Run configuration as nested dataclasses, stored as flat ``section.key=value`` text."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_type_hints

PREDICTION_MODES = ("token_specific", "sample_wise")
ROUTINGS = ("learned", "handcrafted_even", "final_layer_only", "mot_one_to_one")
TIMESTEP_STRATEGIES = ("uniform", "logit_normal", "mode")
SPACINGS = ("linear", "linear_quadratic")
TASKS = ("t2i", "edit")
EDIT_CONTEXTS = ("full", "no_gen", "no_und")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class TowerConfig:
    depth: int
    hidden_dim: int
    heads: int = 4
    vocab_size: int = 64
    patch_size: int = 2
    register_tokens: int = 4

    def validate(self, prefix: str) -> None:
        if self.depth < 1:
            raise ConfigError(f"{prefix}.depth", "must be >= 1")
        if self.heads < 1 or self.hidden_dim % self.heads:
            raise ConfigError(f"{prefix}.heads", f"hidden_dim {self.hidden_dim} not divisible by {self.heads}")
        if self.patch_size < 1:
            raise ConfigError(f"{prefix}.patch_size", "must be >= 1")
        if self.register_tokens < 0:
            raise ConfigError(f"{prefix}.register_tokens", "must be >= 0")


@dataclass
class RouterConfig:
    hidden_dim: int = 16
    heads: int = 1
    blocks: int = 2
    k: int = 2
    epsilon: float = 0.05
    prediction_mode: str = "token_specific"
    separate_norms: bool = True
    use_latent: bool = True
    use_timestep: bool = True


@dataclass
class ModelConfig:
    und: TowerConfig = field(default_factory=lambda: TowerConfig(depth=8, hidden_dim=128, register_tokens=0))
    gen: TowerConfig = field(default_factory=lambda: TowerConfig(depth=4, hidden_dim=96))
    router: RouterConfig = field(default_factory=RouterConfig)

    @property
    def m(self) -> int:
        return self.und.depth

    @property
    def n(self) -> int:
        return self.gen.depth


@dataclass
class TimestepSampler:
    strategy: str = "mode"
    mode_scale: float = 0.8
    mode_shift: float = 3.0


@dataclass
class SampleSchedule:
    steps: int = 25
    spacing: str = "linear"
    guidance_scale: float = 0.0
    context_dropout_p: float = 0.1


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    warmup_steps: int = 200
    min_lr: float = 1.5e-5
    routing: str = "learned"
    log_every: int = 50
    checkpoint_every: int = 0
    eval_every: int = 0


@dataclass
class DataConfig:
    task: str = "t2i"
    seed: int = 0
    size: int = 64
    eval_size: int = 64
    eval_seed: int = -1
    edit_context: str = "full"


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    timesteps: TimestepSampler = field(default_factory=TimestepSampler)
    schedule: SampleSchedule = field(default_factory=SampleSchedule)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "RunConfig":
        m = self.model
        m.und.validate("model.und")
        m.gen.validate("model.gen")
        r = m.router
        _choice("model.router.prediction_mode", r.prediction_mode, PREDICTION_MODES)
        if not 1 <= r.k <= m.m:
            raise ConfigError("model.router.k", f"must be in [1, {m.m}] (m = und depth)")
        if not 0.0 <= r.epsilon <= 1.0:
            raise ConfigError("model.router.epsilon", "must be in [0, 1]")
        if r.hidden_dim % r.heads:
            raise ConfigError("model.router.heads", f"hidden_dim {r.hidden_dim} not divisible by {r.heads}")
        _choice("timesteps.strategy", self.timesteps.strategy, TIMESTEP_STRATEGIES)
        _choice("schedule.spacing", self.schedule.spacing, SPACINGS)
        if self.schedule.steps < 1:
            raise ConfigError("schedule.steps", "must be >= 1")
        if self.schedule.guidance_scale < 0:
            raise ConfigError("schedule.guidance_scale", "must be >= 0")
        if not 0.0 <= self.schedule.context_dropout_p < 1.0:
            raise ConfigError("schedule.context_dropout_p", "must be in [0, 1)")
        _choice("train.routing", self.train.routing, ROUTINGS)
        if self.train.routing == "mot_one_to_one" and m.m != m.n:
            raise ConfigError("train.routing", f"mot_one_to_one needs symmetric towers, got m={m.m}, n={m.n}")
        if self.train.steps < 0:
            raise ConfigError("train.steps", "must be >= 0")
        if self.train.batch_size < 1:
            raise ConfigError("train.batch_size", "must be >= 1")
        _choice("data.task", self.data.task, TASKS)
        _choice("data.edit_context", self.data.edit_context, EDIT_CONTEXTS)
        if self.data.size < 1:
            raise ConfigError("data.size", "must be >= 1")
        return self


def _choice(key: str, value: str, options: tuple[str, ...]) -> None:
    if value not in options:
        raise ConfigError(key, f"{value!r} not one of {options}")


def _flatten(obj: Any, prefix: str = "") -> list[tuple[str, Any]]:
    items = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            items += _flatten(value, key + ".")
        else:
            items.append((key, value))
    return items


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize(config: RunConfig) -> str:
    return "".join(f"{k}={_format(v)}\n" for k, v in _flatten(config))


def _convert(key: str, text: str, kind: type) -> Any:
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {kind.__name__}") from None


def apply_overrides(config: RunConfig, pairs: dict[str, str]) -> RunConfig:
    for key, text in pairs.items():
        *path, leaf = key.split(".")
        target = config
        for part in path:
            if not dataclasses.is_dataclass(target) or part not in {f.name for f in dataclasses.fields(target)}:
                raise ConfigError(key, "unknown key")
            target = getattr(target, part)
        hints = get_type_hints(type(target)) if dataclasses.is_dataclass(target) else {}
        if leaf not in hints or dataclasses.is_dataclass(getattr(target, leaf)):
            raise ConfigError(key, "unknown key")
        setattr(target, leaf, _convert(key, text.strip(), hints[leaf]))
    return config


def parse(text: str) -> RunConfig:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value
    return apply_overrides(RunConfig(), pairs).validate()


def load(path: str | Path) -> RunConfig:
    return parse(Path(path).read_text())


def save(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(serialize(config))
