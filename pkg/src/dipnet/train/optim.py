"""Adam with bias correction and a single-cycle cosine learning-rate schedule."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from ..autodiff import ShapeError, Tensor


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    v: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    step: int = 0


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place update of every parameter in ``params``.

    ``grads`` must cover exactly the same names. Moments are created lazily
    as zeros on the first step.
    """
    if set(grads) != set(params):
        missing = sorted(set(params) - set(grads))
        extra = sorted(set(grads) - set(params))
        raise KeyError(f"gradients do not match parameters; missing={missing[:3]} extra={extra[:3]}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1 - beta2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype, copy=False)


class Adam:
    """Adam over a fixed, named set of parameters."""

    def __init__(self, params: Mapping[str, Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = OrderedDict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState()
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        grads = OrderedDict((n, p.grad) for n, p in self.params.items())
        adam_step(self.params, grads, self.state, lr, self.beta1, self.beta2, self.eps)

    def state_blobs(self, prefix: str) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name in self.params:
            out[f"{prefix}m.{name}"] = self.state.m[name]
            out[f"{prefix}v.{name}"] = self.state.v[name]
        return out

    def load_state_blobs(self, blobs: Mapping[str, np.ndarray], prefix: str, step: int) -> None:
        for name, p in self.params.items():
            for kind, store in (("m", self.state.m), ("v", self.state.v)):
                arr = blobs[f"{prefix}{kind}.{name}"]
                if arr.shape != p.shape:
                    raise ShapeError(f"optimizer moment {kind}.{name} has shape {arr.shape}, parameter {p.shape}")
                store[name] = np.array(arr, dtype=p.data.dtype)
        self.state.step = int(step)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """``0.5 * lr0 * (1 + cos(pi * step / total_steps))``; one cycle, ending at 0."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps))
