"""Learnable layers: convolution, dense, PReLU, batch norm, pixel shuffle.

Convolution and dense layers can be spectrally normalized. The power-iteration
vector ``u`` is a persistent buffer; forward passes read it but never advance
it. Advancing it is an explicit owner operation (:meth:`Module.power_iterate`)
so that several workers can share one parameter snapshot.
"""

from __future__ import annotations

import logging
import threading
from collections import OrderedDict
from contextlib import contextmanager
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)

SN_EPS = 1e-12
PRELU_INIT = 0.25
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Parameter(Tensor):
    """A leaf tensor that always requires a gradient."""

    __slots__ = ()

    def __init__(self, data) -> None:
        super().__init__(np.array(data, dtype=T.DTYPE), requires_grad=True)


class Module:
    """Minimal module tree with ordered parameters and buffers."""

    def __init__(self) -> None:
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value) -> None:
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = None
        object.__setattr__(self, name, np.asarray(value, dtype=T.DTYPE))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # -- traversal ------------------------------------------------------
    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}{name}.")

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = []
        for prefix, mod in self.named_modules():
            out.extend((prefix + name, p) for name, p in mod._params.items())
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for prefix, mod in self.named_modules():
            out.extend((prefix + name, getattr(mod, name)) for name in mod._buffers)
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def power_iterate(self, iterations: int = 1) -> None:
        """Advance every spectral-norm estimate in the tree."""
        for _, mod in self.named_modules():
            if isinstance(mod, _SpectralMixin):
                mod.advance_spectral_state(iterations)

    # -- state ----------------------------------------------------------
    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, p.data.copy()) for k, p in self.named_parameters())
        state.update((k, b.copy()) for k, b in self.named_buffers())
        return state

    def load_state_dict(self, state: dict) -> None:
        """Strict load: names and shapes must match exactly."""
        targets = {}
        for prefix, mod in self.named_modules():
            for name in mod._params:
                targets[prefix + name] = (mod, name, True)
            for name in mod._buffers:
                targets[prefix + name] = (mod, name, False)
        missing = [k for k in targets if k not in state]
        unexpected = [k for k in state if k not in targets]
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for key, (mod, name, is_param) in targets.items():
            value = np.asarray(state[key], dtype=T.DTYPE)
            current = getattr(mod, name)
            cur_shape = current.shape
            if value.shape != cur_shape:
                raise ValueError(f"tensor '{key}': expected shape {cur_shape}, got {value.shape}")
            if is_param:
                current.data = value.copy()
            else:
                object.__setattr__(mod, name, value.copy())


class Sequential(Module):
    def __init__(self, *layers: Module) -> None:
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)
        object.__setattr__(self, "layers", list(layers))

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


# ---------------------------------------------------------------------------
# spectral normalization


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > SN_EPS else v


def power_iteration(wmat: np.ndarray, u: np.ndarray, iterations: int) -> np.ndarray:
    """Run ``iterations`` rounds of u <- normalize(W normalize(W^T u))."""
    for _ in range(iterations):
        v = _unit(wmat.T @ u)
        u = _unit(wmat @ v)
    return u


def spectral_normalize(weight: Tensor, u: np.ndarray, iterations: int = 1):
    """Divide ``weight`` by its power-iteration estimate of the top singular value.

    ``weight`` is viewed as a (rows, everything-else) matrix. ``u`` is advanced
    ``iterations`` times, then ``v = normalize(W^T u)`` and
    ``sigma = u^T W v``. The division keeps ``sigma`` in the graph (with u, v
    held constant), so gradients flow through the normalized weight.

    Returns ``(normalized_weight, new_u, sigma, degenerate)``. A numerically
    zero matrix is returned unchanged with ``degenerate=True``.
    """
    rows = weight.shape[0]
    wmat = weight.data.reshape(rows, -1)
    u = power_iteration(wmat, np.asarray(u, dtype=T.DTYPE), iterations)
    v = _unit(wmat.T @ u)
    sigma_val = float(u @ wmat @ v)
    if not sigma_val > SN_EPS:
        return weight, u, sigma_val, True
    wm = T.reshape(weight, (rows, -1))
    sigma = T.tsum(T.matmul(wm, v.reshape(-1, 1)) * u.reshape(-1, 1))
    return weight / sigma, u, sigma_val, False


class _SpectralMixin:
    """Shared spectral-norm plumbing for layers owning a ``weight``."""

    def _init_spectral(self, enabled: bool, rng: np.random.Generator) -> None:
        object.__setattr__(self, "use_spectral_norm", enabled)
        object.__setattr__(self, "sn_degenerate", False)
        if enabled:
            u = rng.standard_normal(self.weight.shape[0])
            self.register_buffer("sn_u", u / np.linalg.norm(u))

    def advance_spectral_state(self, iterations: int) -> None:
        if self.use_spectral_norm:
            wmat = self.weight.data.reshape(self.weight.shape[0], -1)
            object.__setattr__(self, "sn_u", power_iteration(wmat, self.sn_u, iterations))

    def effective_weight(self) -> Tensor:
        if not self.use_spectral_norm:
            return self.weight
        w, _, _, degenerate = spectral_normalize(self.weight, self.sn_u, iterations=0)
        if degenerate and not self.sn_degenerate:
            logger.warning("spectral norm: degenerate (zero) weight in %s", type(self).__name__)
        object.__setattr__(self, "sn_degenerate", degenerate)
        return w


# ---------------------------------------------------------------------------
# layers


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


class Conv2d(_SpectralMixin, Module):
    """k x k convolution with "same" padding; He-normal initialization."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 bias: bool = True, spectral_norm: bool = False, rng=None) -> None:
        super().__init__()
        rng = _rng(rng)
        fan_in = in_channels * kernel_size * kernel_size
        self.kernel_size = kernel_size
        self.stride = stride
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                           (out_channels, in_channels, kernel_size, kernel_size)))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self._init_spectral(spectral_norm, rng)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.effective_weight(), self.bias, stride=self.stride)

    def describe(self) -> str:
        return f"k{self.kernel_size}n{self.out_channels}s{self.stride}"


class Dense(_SpectralMixin, Module):
    """Affine map y = x W^T + b with weight shape (out, in)."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 spectral_norm: bool = False, rng=None) -> None:
        super().__init__()
        rng = _rng(rng)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(rng.normal(0.0, np.sqrt(1.0 / in_features), (out_features, in_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None
        self._init_spectral(spectral_norm, rng)

    def forward(self, x: Tensor) -> Tensor:
        return dense(x, self.effective_weight(), self.bias)

    def describe(self) -> str:
        return f"dense{self.out_features}"


def dense(x, weight, bias=None) -> Tensor:
    x, weight = T.as_tensor(x), T.as_tensor(weight)
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise T.ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    y = T.matmul(x, T.transpose(weight))
    return y + bias if bias is not None else y


class PReLU(Module):
    def __init__(self, channels: int, init: float = PRELU_INIT) -> None:
        super().__init__()
        self.slope = Parameter(np.full(channels, init))

    def forward(self, x: Tensor) -> Tensor:
        return T.prelu(x, self.slope, axis=1)


class LeakyReLU(Module):
    def __init__(self, slope: float = 0.2) -> None:
        super().__init__()
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        return T.leaky_relu(x, self.slope)


# ---------------------------------------------------------------------------
# batch normalization


class _StatsCollector(threading.local):
    def __init__(self) -> None:
        self.active: list | None = None


_collector = _StatsCollector()


@contextmanager
def collect_batch_stats():
    """Capture train-mode batch statistics instead of updating running stats.

    Yields a list that receives ``(layer, mean, var)`` tuples. Used by workers
    that must not mutate shared state; the owner applies the updates.
    """
    prev = _collector.active
    _collector.active = []
    try:
        yield _collector.active
    finally:
        _collector.active = prev


class BatchNorm2d(Module):
    """Per-channel batch normalization over (N, H, W).

    Running statistics follow ``running = momentum * running + (1 - momentum) * batch``
    with the unbiased batch variance.
    """

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> None:
        super().__init__()
        if eps <= 0:
            raise ValueError("batch norm epsilon must be positive")
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        self.register_buffer("num_batches", np.zeros(()))

    def forward(self, x: Tensor) -> Tensor:
        c = x.shape[1]
        if c != self.gamma.shape[0]:
            raise T.ShapeError(f"batch norm expects {self.gamma.shape[0]} channels, got {c}")
        shape = (1, c, 1, 1)
        if self.training:
            mu = T.mean(x, axis=(0, 2, 3), keepdims=True)
            xc = x - mu
            var = T.mean(T.square(xc), axis=(0, 2, 3), keepdims=True)
            xhat = xc * T.power(var + self.eps, -0.5)
            n = x.size // c
            batch_var = var.data.reshape(c) * (n / max(n - 1, 1))
            self._record(mu.data.reshape(c).copy(), batch_var)
        else:
            if float(self.num_batches) == 0:
                logger.info("batch norm used in eval mode before any training step")
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean.reshape(shape)) * inv.reshape(shape)
        return xhat * T.reshape(self.gamma, shape) + T.reshape(self.beta, shape)

    def _record(self, mean: np.ndarray, var: np.ndarray) -> None:
        if _collector.active is not None:
            _collector.active.append((self, mean, var))
        else:
            self.update_running(mean, var)

    def update_running(self, mean: np.ndarray, var: np.ndarray) -> None:
        m = self.momentum
        object.__setattr__(self, "running_mean", m * self.running_mean + (1 - m) * mean)
        object.__setattr__(self, "running_var", m * self.running_var + (1 - m) * var)
        object.__setattr__(self, "num_batches", np.asarray(self.num_batches + 1))


def batch_norm(x: Tensor, state: BatchNorm2d, mode: str = "train") -> Tensor:
    """Functional entry point: apply ``state`` in ``"train"`` or ``"eval"`` mode."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batch norm mode {mode!r}")
    prev = state.training
    object.__setattr__(state, "training", mode == "train")
    try:
        return state(x)
    finally:
        object.__setattr__(state, "training", prev)


# ---------------------------------------------------------------------------
# sub-pixel rearrangement


def pixel_shuffle(x, r: int) -> Tensor:
    """(N, C*r*r, H, W) -> (N, C, r*H, r*W).

    out[n, c, r*h + dy, r*w + dx] = in[n, c*r*r + dy*r + dx, h, w]
    """
    x = T.as_tensor(x)
    n, crr, h, w = x.shape
    if crr % (r * r):
        raise T.ShapeError(f"pixel_shuffle: {crr} channels not divisible by r^2={r * r}")
    c = crr // (r * r)
    y = T.reshape(x, (n, c, r, r, h, w))
    y = T.transpose(y, (0, 1, 4, 2, 5, 3))
    return T.reshape(y, (n, c, h * r, w * r))


def pixel_unshuffle(x, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    x = T.as_tensor(x)
    n, c, hr, wr = x.shape
    if hr % r or wr % r:
        raise T.ShapeError(f"pixel_unshuffle: {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    y = T.reshape(x, (n, c, h, r, w, r))
    y = T.transpose(y, (0, 1, 3, 5, 2, 4))
    return T.reshape(y, (n, c * r * r, h, w))


class PixelShuffle(Module):
    def __init__(self, r: int) -> None:
        super().__init__()
        self.r = r

    def forward(self, x: Tensor) -> Tensor:
        return pixel_shuffle(x, self.r)
