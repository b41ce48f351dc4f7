"""Image I/O, noise synthesis, patch batches, and a procedural training corpus.

Pixel values live in [0, 1]; noise levels are quoted on the 0-255 scale, so
``sigma=25`` adds Gaussian noise of standard deviation 25/255. Noisy values
are never clipped.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

SUFFIXES = (".png", ".ppm", ".pgm")
PAPER_SIGMAS = (15, 25, 35, 50, 75)


class ImageFormatError(ValueError):
    """File is missing, truncated, or not an 8-bit gray/RGB PNG, PPM or PGM."""


@dataclass
class ImageBuffer:
    values: np.ndarray  # (C, H, W), C in {1, 3}
    source_id: str = ""

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[0] not in (1, 3):
            raise ValueError(f"expected (C, H, W) with C in (1, 3), got {self.values.shape}")
        if min(self.values.shape[1:]) == 0:
            raise ValueError("image extents must be positive")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def is_clean(self) -> bool:
        return bool(self.values.min() >= 0 and self.values.max() <= 1)

    def rgb(self) -> "ImageBuffer":
        """Gray images are replicated across three channels."""
        if self.channels == 3:
            return self
        return ImageBuffer(np.repeat(self.values, 3, axis=0), self.source_id)


# -- files --------------------------------------------------------------------

def load_image(path) -> ImageBuffer:
    path = Path(path)
    if path.suffix.lower() not in SUFFIXES:
        raise ImageFormatError(f"{path}: unsupported file type (use PNG, PPM or PGM)")
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "PPM"):
                raise ImageFormatError(f"{path}: content is {im.format}, not PNG/PPM/PGM")
            if im.mode not in ("L", "RGB"):
                raise ImageFormatError(f"{path}: mode {im.mode} is not 8-bit gray or RGB")
            im.load()
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: cannot decode ({exc})") from None
    if arr.size == 0:
        raise ImageFormatError(f"{path}: image has a zero dimension")
    arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
    return ImageBuffer(arr.astype(np.float32) / np.float32(255), path.name)


def quantize(values: np.ndarray, clip_for_display: bool = True) -> np.ndarray:
    if clip_for_display:
        values = np.clip(values, 0.0, 1.0)
    elif values.min() < 0 or values.max() > 1:
        raise ValueError("values outside [0, 1]; pass clip_for_display=True to clamp")
    return np.round(values.astype(np.float64) * 255).astype(np.uint8)


def save_image(img: ImageBuffer, path, clip_for_display: bool = True) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in SUFFIXES:
        raise ImageFormatError(f"{path}: unsupported file type (use PNG, PPM or PGM)")
    q = quantize(img.values, clip_for_display)
    if suffix == ".pgm" and img.channels != 1:
        raise ImageFormatError("PGM holds gray images only")
    if suffix == ".ppm" and img.channels != 3:
        q = np.repeat(q, 3, axis=0)
    pil = Image.fromarray(q[0] if q.shape[0] == 1 else q.transpose(1, 2, 0))
    pil.save(path, format="PNG" if suffix == ".png" else "PPM")


def list_images(root) -> List[Path]:
    """Supported files directly under ``root``, in lexicographic name order."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory")
    return sorted((p for p in root.iterdir() if p.suffix.lower() in SUFFIXES and p.is_file()),
                  key=lambda p: p.name)


def load_directory(root) -> List[ImageBuffer]:
    files = list_images(root)
    if not files:
        raise ValueError(f"no PNG/PPM/PGM images in {root}")
    return [load_image(p).rgb() for p in files]


# -- noise and patches --------------------------------------------------------

def add_awgn(clean: ImageBuffer, sigma: float, rng: np.random.Generator) -> ImageBuffer:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return ImageBuffer(clean.values.copy(), clean.source_id)
    noise = rng.standard_normal(clean.values.shape) * (sigma / 255.0)
    return ImageBuffer((clean.values + noise).astype(clean.values.dtype), clean.source_id)


def patch_corner(height: int, width: int, size: int, rng: np.random.Generator) -> Tuple[int, int]:
    if size > height or size > width:
        raise ValueError(f"patch size {size} exceeds image {height}x{width}")
    return int(rng.integers(0, height - size + 1)), int(rng.integers(0, width - size + 1))


def sample_patch(img: ImageBuffer, size: int, rng: np.random.Generator) -> ImageBuffer:
    top, left = patch_corner(img.height, img.width, size, rng)
    return ImageBuffer(img.values[:, top:top + size, left:left + size].copy(), img.source_id)


@dataclass(frozen=True)
class NoiseMode:
    """How each patch's noise level is drawn."""

    kind: str = "fixed"  # fixed | blind_set | blind_range
    sigma: float = 25.0
    sigma_set: Tuple[float, ...] = PAPER_SIGMAS
    sigma_range: Tuple[float, float] = (15.0, 75.0)

    def __post_init__(self):
        if self.kind not in ("fixed", "blind_set", "blind_range"):
            raise ValueError(f"unknown noise mode {self.kind!r}")
        if self.kind == "fixed" and self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.kind == "blind_set" and (not self.sigma_set or min(self.sigma_set) <= 0):
            raise ValueError("sigma_set needs positive values")
        lo, hi = self.sigma_range
        if self.kind == "blind_range" and not 0 < lo <= hi:
            raise ValueError("sigma_range must satisfy 0 < low <= high")

    @classmethod
    def fixed(cls, sigma: float) -> "NoiseMode":
        return cls("fixed", sigma=float(sigma))

    @classmethod
    def blind_set(cls, sigmas: Sequence[float] = PAPER_SIGMAS) -> "NoiseMode":
        return cls("blind_set", sigma_set=tuple(float(s) for s in sigmas))

    @classmethod
    def blind_range(cls, low: float = 15.0, high: float = 75.0) -> "NoiseMode":
        return cls("blind_range", sigma_range=(float(low), float(high)))

    @property
    def num_classes(self) -> Optional[int]:
        return len(self.sigma_set) if self.kind == "blind_set" else None

    def draw(self, rng: np.random.Generator) -> Tuple[float, Optional[int]]:
        if self.kind == "fixed":
            return self.sigma, None
        if self.kind == "blind_set":
            k = int(rng.integers(0, len(self.sigma_set)))
            return self.sigma_set[k], k
        return float(rng.uniform(*self.sigma_range)), None


class Batch(NamedTuple):
    noisy: np.ndarray  # (B, 3, p, p) float32
    clean: np.ndarray
    sigmas: np.ndarray  # (B,)
    class_index: Optional[np.ndarray]  # (B,) for blind_set, else None


def make_batch(images: Sequence[ImageBuffer], batch_size: int, patch_size: int,
               rng: np.random.Generator, mode: NoiseMode) -> Batch:
    """Random image, random crop and a per-patch noise level for each sample."""
    if not images:
        raise ValueError("empty dataset")
    noisy, clean, sigmas, classes = [], [], [], []
    for _ in range(batch_size):
        img = images[int(rng.integers(0, len(images)))]
        patch = sample_patch(img, patch_size, rng)
        sigma, k = mode.draw(rng)
        noisy.append(add_awgn(patch, sigma, rng).values)
        clean.append(patch.values)
        sigmas.append(sigma)
        classes.append(k)
    class_index = np.array(classes, dtype=np.int64) if mode.kind == "blind_set" else None
    return Batch(np.stack(noisy).astype(np.float32), np.stack(clean).astype(np.float32),
                 np.array(sigmas, dtype=np.float64), class_index)


@dataclass(frozen=True)
class DatasetSpec:
    root: Optional[str] = None  # directory of images; None uses the synthetic corpus
    synth_seed: int = 0
    synth_count: int = 64
    synth_size: int = 64
    patch_size: int = 64
    eval_root: Optional[str] = None  # held-out images; None uses a second synthetic corpus
    eval_count: int = 8

    def load(self) -> List[ImageBuffer]:
        images = load_directory(self.root) if self.root else synth_corpus(self.synth_seed, self.synth_count,
                                                                          self.synth_size)
        smallest = min(min(im.height, im.width) for im in images)
        if self.patch_size > smallest:
            raise ValueError(f"patch_size {self.patch_size} exceeds smallest image extent {smallest}")
        return images

    def load_eval(self) -> List[ImageBuffer]:
        if self.eval_root:
            return load_directory(self.eval_root)
        return synth_corpus([self.synth_seed, 1], self.eval_count, self.synth_size)


class BatchStream:
    """Batches addressed by step number: step ``s`` always yields the same
    batch for a given seed, so a resumed run sees the same data."""

    def __init__(self, images: Sequence[ImageBuffer], batch_size: int, patch_size: int,
                 mode: NoiseMode, seed: int = 0):
        if not images:
            raise ValueError("empty dataset")
        self.images = list(images)
        self.batch_size = batch_size
        self.patch_size = patch_size
        self.mode = mode
        self.seed = seed

    def batch(self, step: int) -> Batch:
        rng = np.random.default_rng([self.seed, step])
        return make_batch(self.images, self.batch_size, self.patch_size, rng, self.mode)


# -- synthetic corpus ---------------------------------------------------------

def _synth_image(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
    lo, hi = rng.uniform(0.1, 0.9, size=(2, 3))
    img = lo[:, None, None] + (hi - lo)[:, None, None] * ramp[None]

    for _ in range(int(rng.integers(3, 9))):
        h, w = rng.integers(size // 8, size // 2 + 1, size=2)
        top, left = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        color = rng.uniform(0, 1, size=3)
        alpha = rng.uniform(0.5, 1.0)
        region = img[:, top:top + h, left:left + w]
        img[:, top:top + h, left:left + w] = (1 - alpha) * region + alpha * color[:, None, None]

    texture = gaussian_filter(rng.standard_normal((size, size)), sigma=rng.uniform(1.0, 3.0), mode="wrap")
    texture /= max(texture.std(), 1e-12)
    img += rng.uniform(0.02, 0.08) * texture[None]

    # recentre on a random mean and shrink only as much as needed to stay in [0, 1]
    target = rng.uniform(0.35, 0.65)
    mean = img.mean()
    spread = np.abs(img - mean).max()
    scale = min(1.0, min(target, 1 - target) / max(spread, 1e-12))
    return np.clip(target + (img - mean) * scale, 0.0, 1.0)


def synth_corpus(seed, count: int, size: int) -> List[ImageBuffer]:
    """Deterministic images built from gradients, rectangles and smooth texture.

    ``seed`` is anything :func:`numpy.random.default_rng` accepts.
    """
    if count <= 0 or size <= 0:
        raise ValueError("count and size must be positive")
    rng = np.random.default_rng(seed)
    return [ImageBuffer(_synth_image(rng, size).astype(np.float32), f"synth_{i:04d}")
            for i in range(count)]
