"""Self-attention over feature-map positions and its pooled (flexible) wrapper.

For an input with ``Np`` spatial positions, query and key projections ``f``
and ``g`` (1x1 convolutions to C/8 channels) give scores
``s[i, j] = f(x_i) . g(x_j)``. The attention map normalizes each column over
the source index ``i``::

    beta[i, j] = exp(s[i, j]) / sum_i exp(s[i, j])

and position ``j`` receives ``o_j = sum_i beta[i, j] h(x_i)``. The layer
returns ``gamma * o + x``.

The flexible wrapper max-pools the input by ``p`` before attending, so the map
has ``(H*W/p^2)^2`` entries instead of ``(H*W)^2``, then nearest-resizes the
attention residual back to full resolution. It reuses the layer's parameters
unchanged; ``p = 1`` reproduces plain self-attention exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Conv2d, Module, Parameter
from .tensor import Tensor

REDUCTION = 8


class AttentionConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FSAConfig:
    pool_size: int = 1

    def __post_init__(self) -> None:
        if self.pool_size < 1:
            raise AttentionConfigError(f"pool size must be >= 1, got {self.pool_size}")


class SelfAttention(Module):
    """Query/key/value 1x1 projections plus the learnable skip weight ``gamma``.

    ``pool_size`` selects the flexible wrapper at forward time; it is not a
    parameter and can be changed freely between training and inference.
    """

    def __init__(self, channels: int, spectral_norm: bool = False, pool_size: int = 1, rng=None) -> None:
        super().__init__()
        if channels % REDUCTION:
            raise AttentionConfigError(f"attention channels ({channels}) must be divisible by {REDUCTION}")
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.channels = channels
        self.query = Conv2d(channels, channels // REDUCTION, 1, bias=False, spectral_norm=spectral_norm, rng=rng)
        self.key = Conv2d(channels, channels // REDUCTION, 1, bias=False, spectral_norm=spectral_norm, rng=rng)
        self.value = Conv2d(channels, channels, 1, bias=False, spectral_norm=spectral_norm, rng=rng)
        self.gamma = Parameter(np.zeros(()))
        self.pool_size = FSAConfig(pool_size).pool_size
        self.keep_map = False     # when set, forward stores beta of the first image
        self.last_map = None

    def forward(self, x: Tensor) -> Tensor:
        if self.pool_size == 1:
            return self_attention(x, self)
        return fsa(x, self, FSAConfig(self.pool_size))

    def describe(self) -> str:
        return f"attention(c={self.channels}, p={self.pool_size})"


def _check(x: Tensor, layer: SelfAttention) -> None:
    if x.ndim != 4:
        raise T.ShapeError(f"attention expects N,C,H,W input, got {x.shape}")
    if x.shape[1] != layer.channels:
        raise AttentionConfigError(f"attention built for {layer.channels} channels, got {x.shape[1]}")


def _attend(x: Tensor, layer: SelfAttention) -> tuple[Tensor, Tensor]:
    """Return (beta, o) for ``x``: beta is (N, Np, Np), o is (N, C, H, W)."""
    n, c, h, w = x.shape
    npos = h * w
    f = T.reshape(layer.query(x), (n, -1, npos))
    g = T.reshape(layer.key(x), (n, -1, npos))
    v = T.reshape(layer.value(x), (n, c, npos))
    scores = T.matmul(T.transpose(f, (0, 2, 1)), g)     # [n, i, j]
    beta = T.softmax(scores, axis=1)                     # normalize over source i
    o = T.matmul(v, beta)                                # o[:, :, j] = sum_i v[:, :, i] beta[i, j]
    if layer.keep_map:
        layer.last_map = beta.data[0].copy()
    return beta, T.reshape(o, (n, c, h, w))


def self_attention(x: Tensor, layer: SelfAttention) -> Tensor:
    _check(x, layer)
    _, o = _attend(x, layer)
    return layer.gamma * o + x


def _pad_to_multiple(x: Tensor, p: int) -> Tensor:
    h, w = x.shape[2:]
    ph, pw = (-h) % p, (-w) % p
    if ph or pw:
        return T.pad2d(x, 0, ph, 0, pw)
    return x


def fsa(x: Tensor, layer: SelfAttention, config: FSAConfig) -> Tensor:
    """Flexible self-attention: pool by p, attend, resize the residual back.

    Spatial dims that are not multiples of p are zero-padded on the bottom and
    right before pooling, and the resized residual is cropped back.
    """
    _check(x, layer)
    p = config.pool_size
    h, w = x.shape[2:]
    xp = _pad_to_multiple(x, p)
    pooled = T.max_pool2d(xp, p)
    _, o = _attend(pooled, layer)
    up = T.resize_nearest(o, xp.shape[2], xp.shape[3])
    if up.shape[2:] != (h, w):
        up = up[:, :, :h, :w]
    return x + layer.gamma * up


def attention_map(x: Tensor, layer: SelfAttention, config: FSAConfig | None = None) -> Tensor:
    """The column-stochastic map beta, shape (N, Np, Np), for the (pooled) input."""
    _check(x, layer)
    p = (config or FSAConfig(layer.pool_size)).pool_size
    if p > 1:
        x = T.max_pool2d(_pad_to_multiple(x, p), p)
    beta, _ = _attend(x, layer)
    return beta


def pooled_positions(height: int, width: int, pool_size: int) -> int:
    """Number of attended positions after pooling (with pad-to-multiple)."""
    return math.ceil(height / pool_size) * math.ceil(width / pool_size)


def attention_map_elements(height: int, width: int, pool_size: int = 1, batch: int = 1) -> int:
    """Entries of the attention map: batch * Np^2."""
    return batch * pooled_positions(height, width, pool_size) ** 2


def map_to_image(beta: np.ndarray) -> np.ndarray:
    """Scale one (Np, Np) map to an 8-bit grayscale array for inspection."""
    beta = np.asarray(beta, dtype=np.float64)
    top = beta.max()
    scaled = beta / top if top > 0 else beta
    return np.floor(scaled * 255.0 + 0.5).astype(np.uint8)
