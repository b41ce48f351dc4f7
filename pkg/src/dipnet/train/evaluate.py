"""Denoising evaluation over a clean image set at given noise levels."""

from __future__ import annotations

from typing import List, NamedTuple, Sequence

import numpy as np

from ..autodiff import Tensor, no_grad
from ..data import ImageBuffer, add_awgn
from ..model import TransformNet, forward_denoise
from .metrics import psnr, ssim


class EvalRow(NamedTuple):
    sigma: float
    psnr_db: float
    ssim: float
    noisy_psnr_db: float


def noise_rng(seed: int, sigma: float, index: int) -> np.random.Generator:
    """Noise for image ``index`` at ``sigma`` depends only on these three values."""
    return np.random.default_rng([seed, int(round(sigma * 1000)), index])


def denoise_image(net: TransformNet, noisy: np.ndarray) -> np.ndarray:
    """Eval-mode network output for one (3, H, W) image, clamped to [0, 1]."""
    with no_grad():
        out = forward_denoise(net, Tensor(noisy[None].astype(np.float32)), "eval").denoised.data[0]
    return np.clip(out, 0.0, 1.0)


def evaluate(net: TransformNet, images: Sequence[ImageBuffer], sigma: float, seed: int = 0) -> EvalRow:
    """Mean PSNR/SSIM of denoised images; ``noisy_psnr_db`` is the unclipped
    noisy input against the clean image."""
    if not images:
        raise ValueError("empty test set")
    scores, structure, baseline = [], [], []
    for i, img in enumerate(images):
        clean = img.rgb().values
        noisy = add_awgn(ImageBuffer(clean), sigma, noise_rng(seed, sigma, i)).values
        den = denoise_image(net, noisy)
        scores.append(psnr(den, clean))
        structure.append(ssim(den, clean))
        baseline.append(psnr(noisy, clean))
    return EvalRow(float(sigma), float(np.mean(scores)), float(np.mean(structure)), float(np.mean(baseline)))


def noise_sensitivity_sweep(net: TransformNet, images: Sequence[ImageBuffer], sigmas: Sequence[float],
                            seed: int = 0) -> List[EvalRow]:
    """One :func:`evaluate` row per noise level, ascending by sigma."""
    if not images:
        raise ValueError("empty test set")
    if any(s <= 0 for s in sigmas):
        raise ValueError("sigmas must be positive")
    return [evaluate(net, images, s, seed) for s in sorted(sigmas)]


def evenly_spaced(sigma_min: float, sigma_max: float, steps: int) -> List[float]:
    if not 0 < sigma_min < sigma_max:
        raise ValueError("need 0 < sigma_min < sigma_max")
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if steps == 1:
        return [float(sigma_min)]
    return [float(s) for s in np.linspace(sigma_min, sigma_max, steps)]
