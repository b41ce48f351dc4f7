"""Reconstruction and adversarial-prior losses, plus the H-divergence estimate.

All losses return a single-value :class:`Tensor` attached to the active
graph; call ``.item()`` for the numeric readout.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor, make_result

DEFAULT_LAMBDA1 = 0.001
DEFAULT_LAMBDA2 = 0.001


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference over every entry (batch, channel, pixel)."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    return ad.mean(ad.abs(ad.sub(pred, target)))


def multiclass_ce_loss(logits: Tensor, labels) -> Tensor:
    """Softmax cross entropy averaged over the batch.

    Uses the max-shifted log-sum-exp, so it is exact under adding a constant
    to every logit of a row.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, m), got {logits.shape}")
    N, m = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape != (N,):
        raise ShapeError(f"need {N} labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= m:
        raise ValueError(f"labels must lie in [0, {m})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    rows = np.arange(N)
    per_sample = np.log(denom[:, 0]) - z[rows, labels]
    loss = np.array([per_sample.mean()], dtype=logits.dtype)

    def backward(g):
        p = ez / denom
        p[rows, labels] -= 1
        return (p * (g.reshape(()) / N),)

    return make_result("multiclass_ce", loss, (logits,), backward)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def patch_bce_loss(logit_map: Tensor, label: int) -> Tensor:
    """Binary cross entropy of sigmoid(logit) against a constant label, averaged
    over every location of an (N, 1, h, w) patch-logit map.

    Evaluated on logits: -log sigmoid(x) = softplus(-x) and
    -log(1 - sigmoid(x)) = softplus(x).
    """
    if logit_map.ndim != 4 or logit_map.shape[1] != 1:
        raise ShapeError(f"expected an (N, 1, h, w) logit map, got {logit_map.shape}")
    if label not in (0, 1):
        raise ValueError("label must be 0 or 1")
    x = logit_map.data
    per_loc = _softplus(-x) if label == 1 else _softplus(x)
    count = x.size
    loss = np.array([per_loc.mean()], dtype=logit_map.dtype)

    def backward(g):
        s = ad.sigmoid(Tensor(x)).data
        return ((s - label) * (g.reshape(()) / count),)

    return make_result(f"patch_bce[D={label}]", loss, (logit_map,), backward)


def combined_feat_loss(l1: Tensor, prior: Tensor, lambda1: float = DEFAULT_LAMBDA1) -> Tensor:
    """L1 plus the weighted noise-level classification loss.

    The prior reaches the transformation network through the gradient
    reversal layer only, so one backward pass descends the classifier's loss
    in its own parameters and ascends it in the network's.
    """
    if lambda1 < 0:
        raise ValueError("lambda1 must be non-negative")
    return ad.add(l1, ad.scale(prior, lambda1))


def combined_pix_loss(l1: Tensor, adv: Tensor, lambda2: float = DEFAULT_LAMBDA2) -> Tensor:
    if lambda2 < 0:
        raise ValueError("lambda2 must be non-negative")
    return ad.add(l1, ad.scale(adv, lambda2))


class AdversarialLosses(NamedTuple):
    disc_loss: Tensor
    gen_loss: Tensor


def discriminator_loss(logits_denoised: Tensor, logits_clear: Tensor) -> Tensor:
    """Denoised images are labelled 1, clear images 0."""
    return ad.add(patch_bce_loss(logits_denoised, 1), patch_bce_loss(logits_clear, 0))


def generator_loss(logits_denoised: Tensor) -> Tensor:
    """Label-flipped (non-saturating) objective: make denoised look clear."""
    return patch_bce_loss(logits_denoised, 0)


def adversarial_objectives(logits_denoised: Tensor, logits_clear: Tensor) -> AdversarialLosses:
    """Both sides of the pixel-level game from one pair of logit maps.

    In training the two terms come from different graphs: the discriminator
    sees detached generator output, the generator step freezes the
    discriminator. See :mod:`dipnet.train.trainer`.
    """
    if logits_denoised.shape[1:] != logits_clear.shape[1:]:
        raise ShapeError("logit maps must come from the same discriminator")
    return AdversarialLosses(
        discriminator_loss(logits_denoised, logits_clear),
        generator_loss(logits_denoised),
    )


# -- H-divergence -------------------------------------------------------------

class HDivergence(NamedTuple):
    value: float  # clamped to [-2, 2]
    raw: float


def h_divergence_estimate(per_domain_mean_losses: Sequence[float]) -> HDivergence:
    """``2 * (1 - sum of per-domain mean losses)`` of the best domain classifier.

    With 0-1 losses a perfect two-domain classifier gives 2 and a chance one
    gives 0. For more domains the same summed form is reported, clamped to
    [-2, 2] with the raw value alongside.
    """
    losses = [float(v) for v in per_domain_mean_losses]
    if not losses:
        raise ValueError("need at least one domain")
    if any(not np.isfinite(v) for v in losses):
        raise ValueError("per-domain losses must be finite")
    raw = 2.0 * (1.0 - sum(losses))
    return HDivergence(min(2.0, max(-2.0, raw)), raw)


def per_domain_error_rates(predictions, labels, num_domains: int) -> list:
    """Mean 0-1 loss of ``predictions`` within each domain label."""
    predictions = np.asarray(predictions).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    rates = []
    for d in range(num_domains):
        mask = labels == d
        if not mask.any():
            raise ValueError(f"domain {d} has no samples")
        rates.append(float(np.mean(predictions[mask] != d)))
    return rates
