"""Central-difference gradient checking in 64-bit precision."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .functional import record_kinks
from .tensor import Tensor, default_dtype, no_grad


class NondeterministicBuilderError(RuntimeError):
    pass


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    worst: Optional[tuple] = None  # (input index, flat coordinate)

    def passed(self, tolerance: float) -> bool:
        return self.checked > 0 and self.max_rel_error < tolerance


def _evaluate(fn, tensors) -> tuple:
    with no_grad(), record_kinks() as kinks:
        value = fn(tensors).item()
    return value, kinks


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(builder: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[np.ndarray],
               eps: float = 1e-3, numeric_fn: Optional[Callable] = None,
               max_coords: Optional[int] = None, seed: int = 0) -> GradCheckResult:
    """Compare analytic gradients of ``builder`` with central differences.

    ``builder`` receives one float64 :class:`Tensor` per array in ``inputs``
    (all requiring grad) and must return a single-value loss. ``numeric_fn``,
    when given, is differenced instead of ``builder``; this lets a check
    target the surrogate objective whose gradient a gradient-reversal layer
    produces. Coordinates whose perturbation flips the sign of any
    ReLU/LeakyReLU/abs input are skipped (kink exclusion). ``max_coords``
    samples that many coordinates per input (seeded) instead of all of them.

    Returns the max over checked coordinates of
    ``|analytic - numeric| / max(|numeric|, 1e-8)``.
    """
    numeric_fn = numeric_fn or builder
    with default_dtype(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in inputs]
        tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        loss = builder(tensors)
        loss.backward()
        analytic = [t.grad.copy() for t in tensors]

        base = [Tensor(a) for a in arrays]
        v1, pattern = _evaluate(numeric_fn, base)
        v2, _ = _evaluate(numeric_fn, [Tensor(a) for a in arrays])
        if v1 != v2:
            raise NondeterministicBuilderError(f"repeated evaluation differs: {v1!r} vs {v2!r}")

        rng = np.random.default_rng(seed)
        worst, worst_at, checked, skipped = 0.0, None, 0, 0
        for k, arr in enumerate(arrays):
            coords = np.arange(arr.size)
            if max_coords is not None and arr.size > max_coords:
                coords = np.sort(rng.choice(arr.size, size=max_coords, replace=False))
            for idx in coords:
                flat = arr.reshape(-1)
                orig = flat[idx]
                flat[idx] = orig + eps
                fp, pat_p = _evaluate(numeric_fn, [Tensor(a) for a in arrays])
                flat[idx] = orig - eps
                fm, pat_m = _evaluate(numeric_fn, [Tensor(a) for a in arrays])
                flat[idx] = orig
                if not (_same_pattern(pattern, pat_p) and _same_pattern(pattern, pat_m)):
                    skipped += 1
                    continue
                numeric = (fp - fm) / (2 * eps)
                err = abs(analytic[k].reshape(-1)[idx] - numeric) / max(abs(numeric), 1e-8)
                checked += 1
                if err > worst:
                    worst, worst_at = err, (k, int(idx))
    return GradCheckResult(float(worst), checked, skipped, worst_at)
