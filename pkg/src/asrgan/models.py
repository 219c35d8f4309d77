"""A-SRResNet generator, SRGAN-style discriminator and the training losses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import SelfAttention
from .layers import (
    BatchNorm2d,
    Conv2d,
    Dense,
    LeakyReLU,
    Module,
    PixelShuffle,
    PReLU,
    Sequential,
)
from .tensor import Tensor

SCALE = 4
VGG_FACTOR = 0.0061


class ModelConfigError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    residual_blocks: int = 16
    base_features: int = 64
    attention_position: int | None = None   # None -> after the last block
    use_spectral_norm: bool = True
    use_attention: bool = True
    pool_size: int = 1
    seed: int = 0
    scale: int = field(default=SCALE, init=False)

    def __post_init__(self) -> None:
        if self.residual_blocks < 1:
            raise ModelConfigError("generator needs at least one residual block")
        if self.attention_position is None:
            self.attention_position = self.residual_blocks
        if not 0 <= self.attention_position <= self.residual_blocks:
            raise ModelConfigError(
                f"attention_position {self.attention_position} outside [0, {self.residual_blocks}]")


@dataclass
class DiscriminatorConfig:
    base_features: int = 64
    input_size: int = 96
    use_spectral_norm: bool = True
    use_attention: bool = True
    pool_size: int = 1
    dense_features: int = 1024
    seed: int = 1

    def __post_init__(self) -> None:
        if self.input_size < 16:
            raise ModelConfigError(f"discriminator input {self.input_size}px is too small for 4 stride-2 stages")


@dataclass
class LossWeights:
    content_weight: float = 1.0
    adversarial_weight: float = 1e-3
    vgg_factor: float = VGG_FACTOR  # recorded only; no feature-space loss here

    def __post_init__(self) -> None:
        if min(self.content_weight, self.adversarial_weight, self.vgg_factor) < 0:
            raise ValueError("loss weights must be non-negative")


class ResidualBlock(Module):
    def __init__(self, n: int, sn: bool, rng: np.random.Generator) -> None:
        super().__init__()
        self.conv1 = Conv2d(n, n, 3, spectral_norm=sn, rng=rng)
        self.bn1 = BatchNorm2d(n)
        self.act = PReLU(n)
        self.conv2 = Conv2d(n, n, 3, spectral_norm=sn, rng=rng)
        self.bn2 = BatchNorm2d(n)

    def forward(self, x: Tensor) -> Tensor:
        y = self.act(self.bn1(self.conv1(x)))
        return x + self.bn2(self.conv2(y))


class UpsampleBlock(Module):
    """conv to 4n channels, 2x pixel shuffle, PReLU."""

    def __init__(self, n: int, sn: bool, rng: np.random.Generator) -> None:
        super().__init__()
        self.conv = Conv2d(n, 4 * n, 3, spectral_norm=sn, rng=rng)
        self.shuffle = PixelShuffle(2)
        self.act = PReLU(n)

    def forward(self, x: Tensor) -> Tensor:
        return self.act(self.shuffle(self.conv(x)))


class Generator(Module):
    """LR image in [0, 1] -> SR image in [-1, 1] at 4x the spatial size."""

    def __init__(self, config: GeneratorConfig) -> None:
        super().__init__()
        self.config = config
        n, sn = config.base_features, config.use_spectral_norm
        rng = np.random.default_rng(config.seed)
        self.head = Conv2d(3, n, 9, spectral_norm=sn, rng=rng)
        self.head_act = PReLU(n)
        self.blocks = Sequential(*[ResidualBlock(n, sn, rng) for _ in range(config.residual_blocks)])
        self.attention = (SelfAttention(n, spectral_norm=sn, pool_size=config.pool_size, rng=rng)
                          if config.use_attention else None)
        self.post_conv = Conv2d(n, n, 3, spectral_norm=sn, rng=rng)
        self.post_bn = BatchNorm2d(n)
        self.up1 = UpsampleBlock(n, sn, rng)
        self.up2 = UpsampleBlock(n, sn, rng)
        self.tail = Conv2d(n, 3, 9, spectral_norm=sn, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        head = self.head_act(self.head(x))
        y = head
        pos = self.config.attention_position
        for i, block in enumerate(self.blocks.layers):
            if self.attention is not None and i == pos:
                y = self.attention(y)
            y = block(y)
        if self.attention is not None and pos == len(self.blocks.layers):
            y = self.attention(y)
        y = self.post_bn(self.post_conv(y)) + head
        y = self.up2(self.up1(y))
        return T.tanh(self.tail(y))

    def set_pool_size(self, p: int) -> None:
        if self.attention is not None:
            self.attention.pool_size = p


D_STAGES = ((1, 2), (2, 1), (2, 2), (4, 1), (4, 2), (8, 1), (8, 2))
D_ATTENTION_AFTER = 4  # index into D_STAGES: after the second 4n block


class Discriminator(Module):
    """Image in [-1, 1] -> probability of being a real HR crop, shape (N, 1)."""

    def __init__(self, config: DiscriminatorConfig) -> None:
        super().__init__()
        self.config = config
        n, sn = config.base_features, config.use_spectral_norm
        rng = np.random.default_rng(config.seed)
        self.head = Conv2d(3, n, 3, spectral_norm=sn, rng=rng)
        self.head_act = LeakyReLU(0.2)
        stages = []
        cin = n
        for mult, stride in D_STAGES:
            cout = n * mult
            stages.append(Sequential(Conv2d(cin, cout, 3, stride=stride, spectral_norm=sn, rng=rng),
                                     BatchNorm2d(cout), LeakyReLU(0.2)))
            cin = cout
        self.stages = Sequential(*stages)
        att_channels = n * D_STAGES[D_ATTENTION_AFTER][0]
        self.attention = (SelfAttention(att_channels, spectral_norm=sn, pool_size=config.pool_size, rng=rng)
                          if config.use_attention else None)
        side = config.input_size
        for _, stride in D_STAGES:
            side = math.ceil(side / stride)
        self.flat_features = cin * side * side
        self.fc1 = Dense(self.flat_features, config.dense_features, spectral_norm=sn, rng=rng)
        self.fc1_act = LeakyReLU(0.2)
        self.fc2 = Dense(config.dense_features, 1, spectral_norm=sn, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        size = self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (3, size, size):
            raise T.ShapeError(f"discriminator expects (N, 3, {size}, {size}), got {x.shape}")
        y = self.head_act(self.head(x))
        for i, stage in enumerate(self.stages.layers):
            y = stage(y)
            if self.attention is not None and i == D_ATTENTION_AFTER:
                y = self.attention(y)
        y = T.reshape(y, (x.shape[0], -1))
        return T.sigmoid(self.fc2(self.fc1_act(self.fc1(y))))

    def set_pool_size(self, p: int) -> None:
        if self.attention is not None:
            self.attention.pool_size = p


def build_generator(config: GeneratorConfig) -> Generator:
    if config.use_attention and config.base_features % 8:
        raise ModelConfigError("attention needs base_features divisible by 8")
    return Generator(config)


def build_discriminator(config: DiscriminatorConfig) -> Discriminator:
    if config.use_attention and (config.base_features * D_STAGES[D_ATTENTION_AFTER][0]) % 8:
        raise ModelConfigError("discriminator attention stage needs channels divisible by 8")
    return Discriminator(config)


def summarize(model: Module) -> str:
    """One line per leaf layer: name, k/n/s descriptor, parameter count."""
    lines = [f"{'layer':<32} {'spec':<22} {'params':>10}"]
    for name, mod in model.named_modules():
        describe = getattr(mod, "describe", None)
        if describe is None:
            continue
        count = sum(p.size for _, p in mod.named_parameters())
        lines.append(f"{name.rstrip('.'):<32} {describe():<22} {count:>10}")
    lines.append(f"{'total':<32} {'':<22} {model.num_parameters():>10}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# losses

PROB_CLAMP = 1e-8


def content_loss_mse(sr: Tensor, hr) -> Tensor:
    """Mean squared error between the SR output and the HR target (both in [-1, 1])."""
    hr = T.as_tensor(hr)
    if sr.shape != hr.shape:
        raise T.ShapeError(f"content loss shape mismatch: {sr.shape} vs {hr.shape}")
    return T.mean(T.square(sr - hr))


def gan_losses(d_real, d_fake) -> tuple[Tensor, Tensor]:
    """Discriminator loss and non-saturating generator adversarial loss.

    Inputs are probabilities (any shape); losses are batch means.
    """
    real = T.clip(T.as_tensor(d_real), PROB_CLAMP, 1 - PROB_CLAMP)
    fake = T.clip(T.as_tensor(d_fake), PROB_CLAMP, 1 - PROB_CLAMP)
    d_loss = T.mean(-T.log(real) - T.log(1.0 - fake))
    return d_loss, T.mean(-T.log(fake))


def adversarial_loss(d_fake) -> Tensor:
    """-log D(G(x)), batch mean."""
    fake = T.clip(T.as_tensor(d_fake), PROB_CLAMP, 1 - PROB_CLAMP)
    return T.mean(-T.log(fake))


def perceptual_loss(content, g_adv, weights: LossWeights) -> Tensor:
    return weights.content_weight * T.as_tensor(content) + weights.adversarial_weight * T.as_tensor(g_adv)
