"""Minimal module system: named parameter stores, layers, and mode control."""

from __future__ import annotations

from collections import OrderedDict
from contextlib import contextmanager
from typing import Iterator, List, Optional, Tuple

import numpy as np

from .. import autodiff as ad
from ..autodiff import RunningStats, Tensor, get_default_dtype


class Parameter(Tensor):
    """A leaf tensor owned by a module. Frozen parameters do not require grad."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(np.asarray(data, dtype=get_default_dtype()), requires_grad=requires_grad)


class Module:
    """Base class; parameters, sub-modules and module lists are discovered from
    instance attributes in assignment order, which fixes parameter names."""

    def __init__(self):
        self.training = True
        self.update_stats = True

    # -- traversal ---------------------------------------------------------
    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameter_slots(self) -> Iterator[Tuple["Module", str, str]]:
        """``(owner, attribute, dotted name)`` for every parameter."""
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield self, name, name
        for cname, child in self.named_children():
            for owner, attr, name in child.parameter_slots():
                yield owner, attr, f"{cname}.{name}"

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> "OrderedDict[str, Parameter]":
        return OrderedDict((n, p) for n, p in self.named_parameters() if p.requires_grad)

    def named_stats(self, prefix: str = "") -> Iterator[Tuple[str, RunningStats]]:
        for name, value in vars(self).items():
            if isinstance(value, RunningStats):
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_stats(f"{prefix}{name}.")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    # -- mode --------------------------------------------------------------
    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    @contextmanager
    def stats_frozen(self):
        """Train-mode forwards inside use batch statistics without updating
        running statistics."""
        saved = [(m, m.update_stats) for m in self.modules()]
        for m, _ in saved:
            m.update_stats = False
        try:
            yield self
        finally:
            for m, flag in saved:
                m.update_stats = flag

    @contextmanager
    def frozen(self):
        """Stop gradients from reaching this module's trainable parameters."""
        params = [p for p in self.parameters() if p.requires_grad]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p in params:
                p.requires_grad = True

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- state -------------------------------------------------------------
    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, s in self.named_stats():
            state[f"{name}.mean"] = s.mean
            state[f"{name}.var"] = s.var
            state[f"{name}.updates"] = np.array([s.updates], dtype=np.float32)
        return state

    def load_state_dict(self, state: dict) -> None:
        expected = self.state_dict()
        if set(state) != set(expected):
            missing = sorted(set(expected) - set(state))
            extra = sorted(set(state) - set(expected))
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in expected.items():
            if np.shape(state[name]) != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {np.shape(state[name])} vs {arr.shape}")
        params = dict(self.named_parameters())
        stats = dict(self.named_stats())
        for name, p in params.items():
            p.data = np.array(state[name], dtype=p.data.dtype)
            p.zero_grad()
        for name, s in stats.items():
            s.mean[...] = state[f"{name}.mean"]
            s.var[...] = state[f"{name}.var"]
            s.updates = int(np.asarray(state[f"{name}.updates"]).reshape(-1)[0])

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.zero_grad()
        for _, s in self.named_stats():
            s.mean = s.mean.astype(dtype)
            s.var = s.var.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: Optional[int] = None, bias: bool = True):
        super().__init__()
        k = kernel_size
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Parameter(he_normal(rng, (out_channels, in_channels, k, k), in_channels * k * k))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    """``x @ weight + bias`` with weight stored as (in, out)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Parameter(he_normal(rng, (in_features, out_features), in_features))
        self.bias = Parameter(np.zeros((1, out_features)))

    def forward(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.stats = RunningStats.fresh(channels, get_default_dtype())
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ad.batch_norm(x, self.gamma, self.beta, self.stats,
                             "train" if self.training else "eval",
                             self.momentum, self.eps, self.update_stats)
