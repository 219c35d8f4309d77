import numpy as np
import pytest

from asrgan import tensor as T
from asrgan.tensor import Tensor

FD_STEP = 1e-5


def numeric_grad(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)


def gradcheck(build, tensors, seed: int = 0) -> float:
    """Max relative error between tape gradients and finite differences.

    ``build()`` returns the output tensor; it is reduced against a fixed random
    projection so every output element contributes.
    """
    out = build()
    proj = np.random.default_rng(seed).standard_normal(out.shape)

    def loss():
        return T.tsum(build() * proj)

    analytic = T.grad(loss(), tensors)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        num = numeric_grad(lambda: loss().item(), t.data)
        worst = max(worst, rel_error(a, num))
    return worst


def conv_naive(x, w, b=None, stride=1, pad=0):
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for a in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[a, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[a, o, i, j] = np.sum(patch * w[o]) + (0 if b is None else b[o])
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
