"""PSNR and SSIM on 8-bit images, and test-set evaluation."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .imaging import Image, ImageError, load_pair

MAX_VALUE = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * MAX_VALUE) ** 2
SSIM_C2 = (0.03 * MAX_VALUE) ** 2
LUMA = np.array([0.299, 0.587, 0.114])

PSNR_TARGET = 25.0
SSIM_TARGET = 0.75


def _check_same(a: Image, b: Image) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"image dims differ: {a.data.shape} vs {b.data.shape}")


def mse(a: Image, b: Image) -> float:
    _check_same(a, b)
    d = a.data.astype(np.float64) - b.data.astype(np.float64)
    return float(np.mean(d * d))


def psnr(a: Image, b: Image) -> float:
    """10 log10(255^2 / MSE) over all RGB values; ``inf`` for identical images."""
    err = mse(a, b)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(MAX_VALUE ** 2 / err)


def luminance(image: Image) -> np.ndarray:
    return image.data.astype(np.float64) @ LUMA


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian; the 2-D window is its outer product."""
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-window SSIM over all fully contained 11x11 windows of two 2-D arrays."""
    g = gaussian_window()
    mu_x, mu_y = _filter_valid(x, g), _filter_valid(y, g)
    var_x = _filter_valid(x * x, g) - mu_x * mu_x
    var_y = _filter_valid(y * y, g) - mu_y * mu_y
    cov = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return num / den


def ssim(a: Image, b: Image) -> float:
    """Mean SSIM on BT.601 luminance with an 11x11, sigma 1.5 Gaussian window."""
    _check_same(a, b)
    if min(a.height, a.width) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}px, got {a.height}x{a.width}")
    return float(np.mean(ssim_map(luminance(a), luminance(b))))


# ---------------------------------------------------------------------------
# set evaluation


@dataclass
class MetricsRecord:
    image_id: str
    psnr: float = math.nan
    ssim: float = math.nan
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


@dataclass
class EvaluationResult:
    rows: list[MetricsRecord]
    mean: MetricsRecord
    infinite_psnr: int = 0
    failed: int = 0
    extra: dict = field(default_factory=dict)


def summarize_rows(rows: list[MetricsRecord], label: str = "mean") -> tuple[MetricsRecord, int, int]:
    """Arithmetic means in row order; infinite PSNR rows are left out of the PSNR mean."""
    good = [r for r in rows if r.ok]
    finite = [r.psnr for r in good if math.isfinite(r.psnr)]
    inf_count = sum(1 for r in good if math.isinf(r.psnr))
    if finite:
        mean_psnr = math.fsum(finite) / len(finite)
    else:
        mean_psnr = math.inf if inf_count else math.nan
    mean_ssim = math.fsum(r.ssim for r in good) / len(good) if good else math.nan
    return MetricsRecord(label, mean_psnr, mean_ssim), inf_count, len(rows) - len(good)


def evaluate_set(model: Callable[[Image], Image], manifest_rows, workers: int = 1) -> EvaluationResult:
    """Super-resolve each LR image with ``model`` and score against its HR image.

    ``manifest_rows`` are ``(hr_path, lr_path_or_None)`` tuples. Unreadable
    images produce a failed row instead of aborting. Per-image work may run on
    ``workers`` threads; rows and means are always reported in manifest order.
    """

    def one(row) -> MetricsRecord:
        hr_path, lr_path = row
        name = str(hr_path)
        try:
            pair = load_pair(hr_path, lr_path)
            sr = model(pair.lr)
            return MetricsRecord(name, psnr(sr, pair.hr), ssim(sr, pair.hr))
        except (ImageError, OSError, ValueError) as exc:
            return MetricsRecord(name, error=f"{type(exc).__name__}: {exc}")

    rows = list(manifest_rows)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(one, rows))
    else:
        records = [one(r) for r in rows]
    mean, inf_count, failed = summarize_rows(records)
    return EvaluationResult(records, mean, inf_count, failed)
