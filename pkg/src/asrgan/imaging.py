"""Image I/O, bicubic resampling, normalization and aligned crop sampling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from .tensor import Tensor

SCALE = 4


class ImageError(Exception):
    """An image could not be read, decoded or written."""


class CropError(ValueError):
    pass


@dataclass
class Image:
    """8-bit RGB image stored as an (H, W, 3) uint8 array."""

    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.dtype != np.uint8 or self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ImageError(f"expected (H, W, 3) uint8 data, got {self.data.shape} {self.data.dtype}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ImageError("image dims must be >= 1")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other) -> bool:
        return isinstance(other, Image) and np.array_equal(self.data, other.data)


@dataclass
class ImagePair:
    lr: Image
    hr: Image
    scale: int = SCALE
    name: str = ""

    def __post_init__(self) -> None:
        if (self.hr.height, self.hr.width) != (self.scale * self.lr.height, self.scale * self.lr.width):
            raise ImageError(
                f"HR {self.hr.height}x{self.hr.width} is not {self.scale}x LR {self.lr.height}x{self.lr.width}")


@dataclass(frozen=True)
class CropSpec:
    lr_crop: int
    seed: int = 0


# ---------------------------------------------------------------------------
# PNG I/O


def load_image(path) -> Image:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with PILImage.open(path) as im:
            if im.format != "PNG":
                raise ImageError(f"{path}: not a PNG (format {im.format})")
            if im.mode != "RGB":
                raise ImageError(f"{path}: expected RGB, got mode {im.mode}")
            data = np.array(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageError(f"{path}: cannot decode PNG ({exc})") from exc
    return Image(data)


def save_image(image: Image, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(image.data, mode="RGB").save(path, format="PNG")


def save_gray(array: np.ndarray, path) -> None:
    PILImage.fromarray(np.asarray(array, dtype=np.uint8), mode="L").save(Path(path), format="PNG")


# ---------------------------------------------------------------------------
# bicubic resampling


def cubic_kernel(x, a: float = -0.5):
    """Keys cubic convolution kernel; a = -0.5 is Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) weights for one axis.

    Pixel centres map as ``src = (dst + 0.5) * n_in / n_out - 0.5``. When
    shrinking, the kernel is widened by the shrink factor (antialiasing). Taps
    outside the image are clamped to the edge; each row sums to 1.
    """
    scale = n_out / n_in
    support = 2.0 / min(scale, 1.0)
    stretch = min(scale, 1.0)
    m = np.zeros((n_out, n_in))
    for j in range(n_out):
        centre = (j + 0.5) / scale - 0.5
        lo = int(np.floor(centre - support)) + 1
        hi = int(np.ceil(centre + support))
        taps = np.arange(lo, hi)
        wts = cubic_kernel((taps - centre) * stretch)
        np.add.at(m[j], np.clip(taps, 0, n_in - 1), wts)
        m[j] /= m[j].sum()
    return m


def resample_array(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bicubic resample of an (H, W, C) float array; no clamping or rounding."""
    if height < 1 or width < 1:
        raise ValueError("target dims must be >= 1")
    my = _resample_matrix(arr.shape[0], height)
    mx = _resample_matrix(arr.shape[1], width)
    return np.einsum("ih,hwc,jw->ijc", my, np.asarray(arr, dtype=np.float64), mx, optimize=True)


def quantize(arr: np.ndarray) -> np.ndarray:
    """Clamp to [0, 255] and round half up to uint8."""
    return np.floor(np.clip(arr, 0.0, 255.0) + 0.5).astype(np.uint8)


def bicubic_resample(image: Image, height: int, width: int) -> Image:
    return Image(quantize(resample_array(image.data, height, width)))


def downscale(hr: Image, scale: int = SCALE) -> Image:
    """Induce an LR image from an HR image whose dims are multiples of ``scale``."""
    return bicubic_resample(hr, hr.height // scale, hr.width // scale)


def upscale(lr: Image, scale: int = SCALE) -> Image:
    return bicubic_resample(lr, lr.height * scale, lr.width * scale)


# ---------------------------------------------------------------------------
# normalization


def _chw(image: Image) -> np.ndarray:
    return image.data.astype(np.float64).transpose(2, 0, 1)[None]


def normalize_lr(image: Image) -> Tensor:
    """(1, 3, H, W) tensor in [0, 1]."""
    return Tensor(_chw(image) / 255.0)


def normalize_hr(image: Image) -> Tensor:
    """(1, 3, H, W) tensor in [-1, 1]."""
    return Tensor(_chw(image) / 127.5 - 1.0)


def denormalize_sr(x) -> Image:
    """Map a (1, 3, H, W) or (3, H, W) tensor in [-1, 1] back to 8-bit."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError("denormalize_sr takes a single image")
        arr = arr[0]
    return Image(quantize((arr.transpose(1, 2, 0) + 1.0) * 127.5))


# ---------------------------------------------------------------------------
# crops


def crop_origin(pair: ImagePair, lr_crop: int, rng: np.random.Generator) -> tuple[int, int]:
    """Uniform LR crop origin (y, x)."""
    h, w = pair.lr.height, pair.lr.width
    if lr_crop < 1 or lr_crop > h or lr_crop > w:
        raise CropError(f"crop {lr_crop} does not fit LR image {h}x{w}")
    return int(rng.integers(0, h - lr_crop + 1)), int(rng.integers(0, w - lr_crop + 1))


def random_crop_pair(pair: ImagePair, lr_crop: int, rng: np.random.Generator) -> tuple[Image, Image, tuple[int, int]]:
    """Aligned crops: c x c from LR at (y, x) and 4c x 4c from HR at (4y, 4x)."""
    y, x = crop_origin(pair, lr_crop, rng)
    s = pair.scale
    lr = pair.lr.data[y:y + lr_crop, x:x + lr_crop]
    hr = pair.hr.data[s * y:s * (y + lr_crop), s * x:s * (x + lr_crop)]
    return Image(lr.copy()), Image(hr.copy()), (y, x)


class CropSampler:
    """Seeded stream of aligned crops for a :class:`CropSpec`."""

    def __init__(self, spec: CropSpec, worker_id: int = 0) -> None:
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed + worker_id)

    def sample(self, pair: ImagePair):
        return random_crop_pair(pair, self.spec.lr_crop, self.rng)


def sample_batch(pairs: list[ImagePair], batch_size: int, lr_crop: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Normalized (lr, hr) arrays of shapes (B, 3, c, c) and (B, 3, 4c, 4c)."""
    idx = rng.integers(0, len(pairs), size=batch_size)
    lrs, hrs = [], []
    for i in idx:
        lr, hr, _ = random_crop_pair(pairs[i], lr_crop, rng)
        lrs.append(normalize_lr(lr).data[0])
        hrs.append(normalize_hr(hr).data[0])
    return np.stack(lrs), np.stack(hrs)


# ---------------------------------------------------------------------------
# manifests


def read_manifest(path) -> list[tuple[Path, Path | None]]:
    """Lines of ``hr_path<TAB>lr_path``; lr_path may be empty or absent.

    Relative paths resolve against the manifest's directory. Blank lines and
    ``#`` comments are skipped.
    """
    path = Path(path)
    base = path.parent
    rows = []
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        hr = base / parts[0].strip()
        lr = base / parts[1].strip() if len(parts) > 1 and parts[1].strip() else None
        rows.append((hr, lr))
    return rows


def load_pair(hr_path, lr_path=None, scale: int = SCALE) -> ImagePair:
    """Load a pair; without an LR path it is induced by bicubic downscaling.

    HR dims that are not multiples of ``scale`` are cropped to the nearest one.
    """
    hr = load_image(hr_path)
    if lr_path is None:
        h, w = hr.height - hr.height % scale, hr.width - hr.width % scale
        if h == 0 or w == 0:
            raise ImageError(f"{hr_path}: smaller than scale {scale}")
        hr = Image(hr.data[:h, :w].copy())
        lr = downscale(hr, scale)
    else:
        lr = load_image(lr_path)
    return ImagePair(lr, hr, scale, name=Path(hr_path).stem)


def load_dataset(manifest) -> list[ImagePair]:
    rows = read_manifest(manifest)
    if not rows:
        raise ImageError(f"manifest {manifest} lists no images")
    return [load_pair(hr, lr) for hr, lr in rows]


# ---------------------------------------------------------------------------
# synthetic fixtures


def synthetic_image(kind: str, height: int, width: int, seed: int = 0) -> Image:
    """Deterministic test images: ``checker``, ``gradient``, ``rooms`` or ``stripes``."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    if kind == "checker":
        cell = int(rng.integers(4, 13))
        base = ((yy // cell + xx // cell) % 2)[..., None]
        lo, hi = rng.uniform(20, 90, 3), rng.uniform(160, 240, 3)
        img = lo + base * (hi - lo)
    elif kind == "gradient":
        ang = rng.uniform(0, np.pi)
        t = (np.cos(ang) * xx / width + np.sin(ang) * yy / height)
        t = (t - t.min()) / max(np.ptp(t), 1e-9)
        img = t[..., None] * rng.uniform(120, 255, 3) + rng.uniform(0, 60, 3)
    elif kind == "stripes":
        period = rng.uniform(5, 14)
        ang = rng.uniform(0, np.pi)
        t = np.cos(ang) * xx + np.sin(ang) * yy
        img = (128 + 90 * np.sign(np.sin(2 * np.pi * t / period)))[..., None] * np.ones(3)
    elif kind == "rooms":
        # walls, a floor band, a few framed rectangles and soft light blobs
        img = np.ones((height, width, 3)) * rng.uniform(150, 220, 3)
        floor = int(height * rng.uniform(0.6, 0.75))
        img[floor:] = rng.uniform(60, 120, 3)
        for _ in range(int(rng.integers(2, 5))):
            h0, w0 = int(rng.integers(0, height * 3 // 4)), int(rng.integers(0, width * 3 // 4))
            hh, ww = int(rng.integers(height // 8, height // 3)), int(rng.integers(width // 8, width // 3))
            img[h0:h0 + hh, w0:w0 + ww] = rng.uniform(0, 255, 3)
            img[h0 + 2:h0 + hh - 2, w0 + 2:w0 + ww - 2] = rng.uniform(0, 255, 3)
        for _ in range(3):
            cy, cx = rng.uniform(0, height), rng.uniform(0, width)
            sig = rng.uniform(height / 10, height / 4)
            img += rng.uniform(20, 60) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig))[..., None]
    else:
        raise ValueError(f"unknown synthetic image kind {kind!r}")
    return Image(quantize(img))


KINDS = ("rooms", "checker", "stripes", "gradient")


def make_synthetic_dataset(directory, count: int, hr_size: int, seed: int = 0,
                           write_lr: bool = True) -> Path:
    """Write ``count`` HR/LR PNG pairs plus ``manifest.tsv``; return the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(count):
        hr = synthetic_image(KINDS[i % len(KINDS)], hr_size, hr_size, seed=seed + i)
        hr_name = f"img{i:03d}_hr.png"
        save_image(hr, directory / hr_name)
        if write_lr:
            lr_name = f"img{i:03d}_lr.png"
            save_image(downscale(hr), directory / lr_name)
            lines.append(f"{hr_name}\t{lr_name}")
        else:
            lines.append(hr_name)
    manifest = directory / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def worker_seed(base_seed: int, worker_id: int) -> int:
    """Per-worker crop stream seed."""
    return base_seed + worker_id

