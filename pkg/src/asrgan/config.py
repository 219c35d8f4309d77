"""Training configuration and its flat ``key = value`` text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .models import DiscriminatorConfig, GeneratorConfig, LossWeights

PHASES = ("resnet", "gan")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    phase: str = "resnet"
    steps: int = 1000
    learning_rate: float = 1e-4
    batch_size: int = 8
    crop_size: int = 24
    pool_size: int = 1
    workers: int = 1
    seed: int = 0
    content_weight: float = 1.0
    adversarial_weight: float = 1e-3
    checkpoint_interval: int = 0
    # generator
    residual_blocks: int = 4
    base_features: int = 32
    use_attention: bool = True
    attention_position: int = -1   # -1: after the last residual block
    use_spectral_norm: bool = True
    sn_iterations: int = 1
    # discriminator
    d_base_features: int = 16
    d_dense_features: int = 128
    d_use_attention: bool = True
    # adaptive-moment optimizer
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # execution
    threaded_workers: bool = True
    frozen_batch_norm: bool = False   # BN uses running stats while training
    collapse_window: int = 500

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.batch_size < 1 or self.batch_size % self.workers:
            raise ConfigError(f"batch_size {self.batch_size} not divisible by workers {self.workers}")
        if self.crop_size < 1 or self.pool_size < 1:
            raise ConfigError("crop_size and pool_size must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.content_weight < 0 or self.adversarial_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be >= 0")
        if self.attention_position < -1 or self.attention_position > self.residual_blocks:
            raise ConfigError(f"attention_position {self.attention_position} outside [-1, {self.residual_blocks}]")

    def generator_config(self) -> GeneratorConfig:
        pos = None if self.attention_position == -1 else self.attention_position
        return GeneratorConfig(
            residual_blocks=self.residual_blocks, base_features=self.base_features,
            attention_position=pos, use_spectral_norm=self.use_spectral_norm,
            use_attention=self.use_attention, pool_size=self.pool_size, seed=self.seed)

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(
            base_features=self.d_base_features, input_size=4 * self.crop_size,
            use_spectral_norm=self.use_spectral_norm, use_attention=self.d_use_attention,
            pool_size=self.pool_size, dense_features=self.d_dense_features, seed=self.seed + 1)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.content_weight, self.adversarial_weight)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    # -- text form ------------------------------------------------------
    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, **overrides) -> "TrainConfig":
        values = parse_config_text(text)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.loads(text, **overrides)


def _convert(name: str, raw: str, kind: type):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    known = {f.name: _TYPES[f.type] for f in fields(TrainConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _convert(key, value, known[key])
    return out
