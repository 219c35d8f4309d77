"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When any input requires a gradient the
output carries a node recording the op name, its inputs and a closure that maps
the output gradient to input gradients. :func:`backward` linearizes the graph
reachable from a scalar loss into a :class:`Tape` and replays it in reverse.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

# Upper bound on the im2col buffer (elements) built in one piece; larger
# convolutions are processed in batch chunks.
IM2COL_MAX_ELEMENTS = 1 << 24


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class _State(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True
        self.trackers: list[AllocationTracker] = []


_state = _State()


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple, backward: Callable) -> None:
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """N-dimensional float64 array plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    # make ``ndarray <op> Tensor`` dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    # -- metadata -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def op(self) -> str | None:
        return self._node.op if self._node is not None else None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# graph-mode switches and allocation tracking


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _state.grad_enabled


class AllocationTracker:
    """Counts elements of every tensor produced by an op while active.

    Only op outputs are counted: the buffers an op materializes as its result.
    Trackers are thread-local and may be nested.
    """

    def __init__(self) -> None:
        self.peak = 0
        self.total = 0
        self.peak_by_op: dict[str, int] = {}
        self.count_by_op: dict[str, int] = {}

    def record(self, op: str, n: int) -> None:
        self.total += n
        self.peak = max(self.peak, n)
        self.peak_by_op[op] = max(self.peak_by_op.get(op, 0), n)
        self.count_by_op[op] = self.count_by_op.get(op, 0) + 1

    def __enter__(self) -> "AllocationTracker":
        _state.trackers.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.trackers.remove(self)


def _make(out: np.ndarray, op: str, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    for tracker in _state.trackers:
        tracker.record(op, out.size)
    t = Tensor(out)
    if _state.grad_enabled and any(x.requires_grad for x in inputs):
        t.requires_grad = True
        t._node = _Node(op, tuple(inputs), backward)
    return t


# ---------------------------------------------------------------------------
# tape and backward pass


class Tape:
    """Topologically ordered op records reachable from a root tensor.

    ``records[i]`` is a tensor produced by an op; all of its op-produced inputs
    appear at smaller indices.
    """

    def __init__(self, records: list[Tensor]) -> None:
        self.records = records

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for x in reversed(t._node.inputs):
                if x._node is not None and id(x) not in seen:
                    stack.append((x, False))
        return cls(order)

    def run(self, root: Tensor, seed: np.ndarray) -> dict[int, tuple[Tensor, np.ndarray]]:
        """Propagate ``seed`` from ``root``; return leaf gradients keyed by id."""
        grads: dict[int, np.ndarray] = {id(root): seed}
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
        for t in reversed(self.records):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            node = t._node
            for x, gx in zip(node.inputs, node.backward(g)):
                if gx is None or not x.requires_grad:
                    continue
                if x._node is None:
                    prev = leaves.get(id(x))
                    leaves[id(x)] = (x, gx if prev is None else prev[1] + gx)
                else:
                    prev = grads.get(id(x))
                    grads[id(x)] = gx if prev is None else prev + gx
        if root._node is None and root.requires_grad:
            leaves[id(root)] = (root, seed)
        return leaves


def _check_scalar(loss: Tensor) -> None:
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    _check_scalar(loss)
    leaves = Tape.from_root(loss).run(loss, np.ones_like(loss.data))
    for x, g in leaves.values():
        x.grad = g.copy() if x.grad is None else x.grad + g


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Return gradients of ``loss`` for ``wrt`` without touching ``.grad``.

    Tensors the loss does not depend on get zeros.
    """
    _check_scalar(loss)
    leaves = Tape.from_root(loss).run(loss, np.ones_like(loss.data))
    out = []
    for x in wrt:
        hit = leaves.get(id(x))
        out.append(np.zeros_like(x.data) if hit is None else np.array(hit[1], dtype=DTYPE))
    return out


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, "div", (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(x ** exponent, "power", (a,),
                 lambda g: (g * exponent * x ** (exponent - 1),))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(x * x, "square", (a,), lambda g: (2.0 * g * x,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _make(out, "log", (a,), lambda g: (g / x,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    x = a.data
    scale = np.where(x >= 0, 1.0, slope)
    return _make(x * scale, "leaky_relu", (a,), lambda g: (g * scale,))


def prelu(x, slope, axis: int = 1) -> Tensor:
    """``x`` where non-negative, ``slope * x`` elsewhere; ``slope`` indexed by ``axis``."""
    x, slope = as_tensor(x), as_tensor(slope)
    xd = x.data
    axis = axis % xd.ndim
    if slope.ndim != 1 or slope.shape[0] != xd.shape[axis]:
        raise ShapeError(f"prelu slope {slope.shape} does not match axis {axis} of {xd.shape}")
    bshape = [1] * xd.ndim
    bshape[axis] = -1
    a = slope.data.reshape(bshape)
    neg_mask = xd < 0
    out = np.where(neg_mask, a * xd, xd)
    reduce_axes = tuple(i for i in range(xd.ndim) if i != axis)

    def bw(g):
        gx = np.where(neg_mask, a * g, g)
        ga = np.where(neg_mask, g * xd, 0.0).sum(axis=reduce_axes)
        return gx, ga

    return _make(out, "prelu", (x, slope), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where clamping was active."""
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), "clip", (a,), lambda g: (g * inside,))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out), "sum", (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), "transpose", (a,),
                 lambda g: (g.transpose(inv),))


def getitem(a, index) -> Tensor:
    """Basic (slice/int) indexing."""
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[index] = g
        return (full,)

    return _make(np.array(a.data[index]), "getitem", (a,), bw)


def matmul(a, b) -> Tensor:
    """Matrix product of 2-D operands, or batched product over matching leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2] or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, "matmul", (a, b), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (a,), bw)


# ---------------------------------------------------------------------------
# spatial ops on N,C,H,W feature maps


def _check_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects N,C,H,W input, got shape {x.shape}")


def same_padding(k: int) -> int:
    """Symmetric padding giving output size ceil(H / stride) for odd ``k``."""
    if k % 2 == 0:
        raise ValueError(f"'same' padding needs an odd kernel, got {k}")
    return (k - 1) // 2


def pad2d(x, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the two trailing spatial axes."""
    x = as_tensor(x)
    _check_4d(x, "pad2d")
    H, W = x.shape[2:]
    out = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    return _make(out, "pad2d", (x,),
                 lambda g: (g[:, :, top:top + H, left:left + W],))


def _conv_windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """View of shape (N, C, Ho, Wo, k, k) over a padded input."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = _conv_windows(xp, k, stride)
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def _conv_im2col(xp: np.ndarray, w: np.ndarray, stride: int, ho: int, wo: int):
    """Patch-matrix convolution; buffer size scales with Cin * k * k."""
    n = xp.shape[0]
    cout, cin, k, _ = w.shape
    wmat = w.reshape(cout, -1)
    chunk = max(1, IM2COL_MAX_ELEMENTS // (ho * wo * cin * k * k))
    out = np.empty((n, ho, wo, cout), dtype=DTYPE)
    saved = None
    for s in range(0, n, chunk):
        cols = _im2col(xp[s:s + chunk], k, stride)
        out[s:s + chunk] = (cols @ wmat.T).reshape(-1, ho, wo, cout)
        if chunk >= n:
            saved = cols

    wkk = w.transpose(2, 3, 1, 0).reshape(-1, cout)   # rows (i, j, ci)

    def bw(g: np.ndarray, need_x: bool):
        gm = g.transpose(0, 2, 3, 1)
        gw = np.zeros_like(wmat)
        # accumulate dx channel-major so each kernel offset adds a contiguous slab
        gxp = np.zeros((cin, n) + xp.shape[2:], dtype=DTYPE) if need_x else None
        span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for s in range(0, n, chunk):
            gs = gm[s:s + chunk].reshape(-1, cout)
            cols = saved if saved is not None else _im2col(xp[s:s + chunk], k, stride)
            gw += gs.T @ cols
            if need_x:
                gcols = (wkk @ gs.T).reshape(k, k, cin, -1, ho, wo)
                dst = gxp[:, s:s + chunk]
                for i in range(k):
                    for j in range(k):
                        dst[:, :, i:i + span_h:stride, j:j + span_w:stride] += gcols[i, j]
        return (gxp.transpose(1, 0, 2, 3) if need_x else None), gw.reshape(w.shape)

    return out.transpose(0, 3, 1, 2), bw


def _conv_output_shift(xp: np.ndarray, w: np.ndarray, ho: int, wo: int):
    """Stride-1 convolution that mixes channels first, then shift-adds k*k planes.

    The intermediate holds Cout * k * k values per padded pixel, which is far
    smaller than an im2col buffer when Cout < Cin (e.g. a 9x9 conv to RGB).
    """
    n, cin, hp, wp = xp.shape
    cout, _, k, _ = w.shape
    xm = xp.transpose(1, 0, 2, 3).reshape(cin, -1)              # (Cin, N*Hp*Wp)
    wr = w.transpose(0, 2, 3, 1).reshape(cout * k * k, cin)       # rows (co, i, j)
    planes = (wr @ xm).reshape(cout, k, k, n, hp, wp)
    out = np.zeros((cout, n, ho, wo), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            out += planes[:, i, j, :, i:i + ho, j:j + wo]
    del planes

    def bw(g: np.ndarray, need_x: bool):
        gt = g.transpose(1, 0, 2, 3)
        q = np.zeros((cout, k, k, n, hp, wp), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                q[:, i, j, :, i:i + ho, j:j + wo] = gt
        qm = q.reshape(cout * k * k, -1)
        gw = (qm @ xm.T).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        gxp = None
        if need_x:
            gxp = (wr.T @ qm).reshape(cin, n, hp, wp).transpose(1, 0, 2, 3)
        return gxp, gw

    return out.transpose(1, 0, 2, 3), bw


def conv2d(x, weight, bias=None, stride: int = 1, padding="same") -> Tensor:
    """2-D cross-correlation.

    ``x`` is (N, Cin, H, W), ``weight`` is (Cout, Cin, k, k). ``padding`` is an
    int or ``"same"`` (zero padding of (k-1)/2, giving ceil(H/stride) outputs).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check_4d(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d weight must be (Cout, Cin, k, k), got {weight.shape}")
    cout, cin, k, _ = weight.shape
    n, c, h, w = x.shape
    if c != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {cin}")
    pad = same_padding(k) if padding == "same" else int(padding)
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError(f"conv2d input {h}x{w} smaller than kernel {k} after padding")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    if stride == 1 and cout <= cin:
        out, core_bw = _conv_output_shift(xp, weight.data, ho, wo)
    else:
        out, core_bw = _conv_im2col(xp, weight.data, stride, ho, wo)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)
    need_x = x.requires_grad

    def bw(g):
        gxp, gw = core_bw(g, need_x)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, "conv2d", inputs, bw)


def max_pool2d(x, p: int) -> Tensor:
    """Non-overlapping max pooling with kernel = stride = ``p``.

    Ties route the gradient to the first maximal element in row-major window order.
    """
    x = as_tensor(x)
    _check_4d(x, "max_pool2d")
    n, c, h, w = x.shape
    if p < 1 or h % p or w % p:
        raise ShapeError(f"max_pool2d: {h}x{w} not divisible by pool size {p}")
    hp, wp = h // p, w // p
    win = x.data.reshape(n, c, hp, p, wp, p).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hp, wp, p * p)
    idx = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((n, c, hp, wp, p * p), dtype=DTYPE)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        return (gw.reshape(n, c, hp, wp, p, p).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _make(out, "max_pool2d", (x,), bw)


def resize_nearest(x, height: int, width: int) -> Tensor:
    """Nearest-neighbour upsampling by integer factors."""
    x = as_tensor(x)
    _check_4d(x, "resize_nearest")
    n, c, h, w = x.shape
    if height < h or width < w or height % h or width % w:
        raise ValueError(f"resize_nearest needs integer upscale factors: {h}x{w} -> {height}x{width}")
    sh, sw = height // h, width // w
    out = np.repeat(np.repeat(x.data, sh, axis=2), sw, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, sh, w, sw).sum(axis=(3, 5)),)

    return _make(out, "resize_nearest", (x,), bw)
