import math

import numpy as np
import pytest

from asrgan.imaging import Image, save_image, upscale
from asrgan.metrics import (
    SSIM_C1,
    SSIM_C2,
    MetricsRecord,
    evaluate_set,
    gaussian_window,
    luminance,
    psnr,
    ssim,
    summarize_rows,
)


def random_image(rng, h=32, w=32):
    return Image(rng.integers(0, 256, (h, w, 3), dtype=np.uint8))


def test_psnr_identical_is_inf(rng):
    a = random_image(rng)
    assert psnr(a, a) == math.inf


def test_psnr_off_by_one():
    a = Image(np.full((8, 8, 3), 100, dtype=np.uint8))
    b = Image(np.full((8, 8, 3), 101, dtype=np.uint8))
    assert abs(psnr(a, b) - 48.1308) < 1e-3
    assert psnr(a, b) == pytest.approx(20 * math.log10(255), abs=1e-12)


def test_psnr_matches_loop_oracle(rng):
    a, b = random_image(rng), random_image(rng)
    total = 0.0
    for i in range(32):
        for j in range(32):
            for c in range(3):
                d = float(a.data[i, j, c]) - float(b.data[i, j, c])
                total += d * d
    expected = 10 * math.log10(255 ** 2 / (total / (32 * 32 * 3)))
    assert abs(psnr(a, b) - expected) < 1e-10


def test_psnr_dim_mismatch(rng):
    with pytest.raises(ValueError):
        psnr(random_image(rng, 8, 8), random_image(rng, 8, 9))


def test_ssim_identical_exactly_one(rng):
    a = random_image(rng)
    assert ssim(a, a) == 1.0


def test_ssim_symmetric(rng):
    a, b = random_image(rng), random_image(rng)
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12


def test_ssim_constant_images_closed_form():
    c, d = 90.0, 25.0
    a = Image(np.full((16, 16, 3), int(c), dtype=np.uint8))
    b = Image(np.full((16, 16, 3), int(c + d), dtype=np.uint8))
    la, lb = luminance(a)[0, 0], luminance(b)[0, 0]
    expected = (2 * la * lb + SSIM_C1) / (la ** 2 + lb ** 2 + SSIM_C1)
    assert abs(ssim(a, b) - expected) < 1e-12
    assert abs(la - c) < 1e-9 and abs(lb - (c + d)) < 1e-9


def ssim_oracle(a: Image, b: Image) -> float:
    x, y = luminance(a), luminance(b)
    g = gaussian_window()
    w = np.outer(g, g)
    scores = []
    for i in range(x.shape[0] - 10):
        for j in range(x.shape[1] - 10):
            px, py = x[i:i + 11, j:j + 11], y[i:i + 11, j:j + 11]
            mx, my = (w * px).sum(), (w * py).sum()
            vx = (w * (px - mx) ** 2).sum()
            vy = (w * (py - my) ** 2).sum()
            cv = (w * (px - mx) * (py - my)).sum()
            scores.append((2 * mx * my + SSIM_C1) * (2 * cv + SSIM_C2)
                          / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)))
    return float(np.mean(scores))


def test_ssim_matches_window_oracle(rng):
    a = random_image(rng)
    b = Image(np.clip(a.data.astype(int) + rng.integers(-30, 31, a.data.shape), 0, 255).astype(np.uint8))
    assert abs(ssim(a, b) - ssim_oracle(a, b)) < 1e-9
    c = random_image(rng)
    assert abs(ssim(a, c) - ssim_oracle(a, c)) < 1e-9


def test_ssim_too_small(rng):
    with pytest.raises(ValueError, match="at least"):
        ssim(random_image(rng, 10, 20), random_image(rng, 10, 20))


def test_gaussian_window():
    g = gaussian_window()
    assert g.size == 11 and abs(g.sum() - 1) < 1e-15
    assert g[5] == g.max() and g[0] == g[10]


def test_summary_excludes_infinite_psnr():
    rows = [MetricsRecord("a", 30.0, 0.9), MetricsRecord("b", math.inf, 1.0),
            MetricsRecord("c", 20.0, 0.7), MetricsRecord("d", error="boom")]
    mean, inf_count, failed = summarize_rows(rows)
    assert mean.psnr == 25.0 and mean.ssim == pytest.approx(0.8666666666666667, abs=1e-15)
    assert inf_count == 1 and failed == 1


def write_pair(tmp_path, name, lr, hr):
    save_image(lr, tmp_path / f"{name}_lr.png")
    save_image(hr, tmp_path / f"{name}_hr.png")
    return tmp_path / f"{name}_hr.png", tmp_path / f"{name}_lr.png"


def test_evaluate_identical_pair(tmp_path, rng):
    lr = random_image(rng, 8, 8)
    row = write_pair(tmp_path, "a", lr, upscale(lr))
    result = evaluate_set(upscale, [row])
    assert result.rows[0].ssim == 1.0 and result.rows[0].psnr == math.inf
    assert result.infinite_psnr == 1


def test_evaluate_mean_of_two_and_failure(tmp_path, rng):
    rows = []
    for name in ("a", "b"):
        lr = random_image(rng, 8, 8)
        rows.append(write_pair(tmp_path, name, lr, random_image(rng, 32, 32)))
    rows.append((tmp_path / "missing.png", None))
    for workers in (1, 3):
        result = evaluate_set(upscale, rows, workers=workers)
        a, b, bad = result.rows
        assert not bad.ok and result.failed == 1
        assert result.mean.psnr == pytest.approx((a.psnr + b.psnr) / 2, abs=1e-12)
        assert result.mean.ssim == pytest.approx((a.ssim + b.ssim) / 2, abs=1e-12)
        assert [r.image_id for r in result.rows] == [str(r[0]) for r in rows]
