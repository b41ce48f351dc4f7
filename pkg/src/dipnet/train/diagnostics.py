"""Domain-classifier diagnostics: held-out accuracy and the H-divergence estimate.

The estimate is ``2 * (1 - sum of per-domain held-out 0-1 losses)`` of a
trained domain classifier. Classifiers here are trained with the package's
own autodiff and Adam.
"""

from __future__ import annotations

from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor, no_grad
from ..data import ImageBuffer, add_awgn, patch_corner
from ..losses import HDivergence, h_divergence_estimate, multiclass_ce_loss, per_domain_error_rates
from ..model import FeatureDiscriminator, ModelConfig, TransformNet
from ..model.nn import Linear, Module
from .optim import Adam


class DomainReport(NamedTuple):
    accuracy: float
    error_rates: List[float]
    hdiv: HDivergence


def domain_report(predictions, labels, num_domains: int) -> DomainReport:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    rates = per_domain_error_rates(predictions, labels, num_domains)
    return DomainReport(float(np.mean(predictions == labels)), rates, h_divergence_estimate(rates))


class MLPClassifier(Module):
    """Two-layer ReLU network for vector-valued samples."""

    def __init__(self, in_features: int, hidden: int, classes: int, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.fc1 = Linear(in_features, hidden, rng)
        self.fc2 = Linear(hidden, classes, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))


def fit_classifier(model: Module, forward, x: np.ndarray, labels: np.ndarray, steps: int = 300,
                   lr: float = 1e-2, batch_size: Optional[int] = None, seed=0) -> Module:
    """Minimize cross entropy of ``forward(model, x_batch)`` with Adam."""
    opt = Adam(model.trainable_parameters())
    rng = np.random.default_rng(seed)
    n = len(x)
    for _ in range(steps):
        idx = np.arange(n) if batch_size is None or batch_size >= n else rng.choice(n, batch_size, replace=False)
        opt.zero_grad()
        multiclass_ce_loss(forward(model, Tensor(x[idx])), labels[idx]).backward()
        opt.step(lr)
    return model


def predict(model: Module, forward, x: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(x), chunk):
            out.append(forward(model, Tensor(x[i:i + chunk])).data.argmax(axis=1))
    return np.concatenate(out)


def _split(n: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    return perm[: n // 2], perm[n // 2:]


def sample_divergence(domains: Sequence[np.ndarray], seed: int = 0, hidden: int = 16,
                      steps: int = 300, lr: float = 1e-2) -> DomainReport:
    """H-divergence between sets of feature vectors, one array per domain.

    Each domain is split in half; an MLP is trained on the first halves and
    its 0-1 losses are measured on the second halves.
    """
    rng = np.random.default_rng(seed)
    train_x, train_y, test_x, test_y = [], [], [], []
    for d, samples in enumerate(domains):
        samples = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
        a, b = _split(len(samples), rng)
        train_x.append(samples[a]); train_y.append(np.full(len(a), d))
        test_x.append(samples[b]); test_y.append(np.full(len(b), d))
    x, y = np.concatenate(train_x), np.concatenate(train_y)
    # standardize with training statistics so the fixed learning rate suits any scale
    mu, sd = x.mean(axis=0), x.std(axis=0) + 1e-12
    with ad.default_dtype(np.float64):
        model = MLPClassifier(x.shape[1], hidden, len(domains), seed=[seed, 1])
        fit_classifier(model, lambda m, t: m(t), (x - mu) / sd, y, steps, lr, seed=seed)
        pred = predict(model, lambda m, t: m(t), (np.concatenate(test_x) - mu) / sd)
    return domain_report(pred, np.concatenate(test_y), len(domains))


# -- fused-feature diagnostics -------------------------------------------------

class DomainProbeSet(NamedTuple):
    noisy: np.ndarray  # (n, 3, p, p)
    labels: np.ndarray  # (n,) class index into sigma_set


def make_probe_set(images: Sequence[ImageBuffer], sigma_set: Sequence[float], per_class: int,
                   patch_size: int, seed: int) -> DomainProbeSet:
    """Held-out noisy patches with classes interleaved (0, 1, ..., m-1, 0, ...)."""
    rng = np.random.default_rng([seed, 77])
    noisy, labels = [], []
    for i in range(per_class):
        for k, sigma in enumerate(sigma_set):
            img = images[int(rng.integers(0, len(images)))].rgb()
            top, left = patch_corner(img.height, img.width, patch_size, rng)
            patch = ImageBuffer(img.values[:, top:top + patch_size, left:left + patch_size].copy())
            noisy.append(add_awgn(patch, sigma, rng).values)
            labels.append(k)
    return DomainProbeSet(np.stack(noisy).astype(np.float32), np.array(labels))


def fused_features(net: TransformNet, noisy: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Fusion outputs with batch statistics (train-mode normalization), leaving
    running statistics untouched."""
    out = []
    was_training = net.training
    net.train(True)
    with no_grad(), net.stats_frozen():
        for i in range(0, len(noisy), chunk):
            out.append(net(Tensor(noisy[i:i + chunk])).fused_features.data)
    net.train(was_training)
    return np.concatenate(out)


def discriminator_report(fdisc: FeatureDiscriminator, features: np.ndarray, labels: np.ndarray,
                         num_domains: int) -> DomainReport:
    """How well the training-time classifier separates held-out features."""
    pred = predict(fdisc, lambda m, t: m(t, reverse=False), features)
    return domain_report(pred, labels, num_domains)


def retrained_probe_report(config: ModelConfig, features: np.ndarray, labels: np.ndarray, num_domains: int,
                           steps: int = 150, lr: float = 1e-3, seed=0) -> DomainReport:
    """Fresh classifier of the discriminator's architecture trained on one half
    of the held-out features and scored on the other half."""
    # labels are interleaved by round, so alternate rounds give two balanced halves
    rounds = np.arange(len(features)) // num_domains
    first, second = np.flatnonzero(rounds % 2 == 0), np.flatnonzero(rounds % 2 == 1)
    probe = FeatureDiscriminator(config.with_(num_noise_classes=num_domains), seed=[seed, 5])
    fwd = lambda m, t: m(t, reverse=False)
    fit_classifier(probe, fwd, features[first], labels[first], steps, lr, batch_size=32, seed=seed)
    return domain_report(predict(probe, fwd, features[second]), labels[second], num_domains)
