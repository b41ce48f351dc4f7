"""Tensor type and the define-by-run graph used for reverse-mode differentiation.

Every differentiable operation produces a :class:`Tensor` holding a
:class:`Node` that records its inputs and a closure mapping the upstream
gradient to per-input gradients. Nodes get a monotonically increasing
sequence number at creation, so creation order is a valid topological order
of the graph and ``backward`` can simply walk reachable nodes by descending
sequence number.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors."""
    previous = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    """Operation record: kind, input tensors, and the backward closure."""

    __slots__ = ("op", "inputs", "backward", "seq")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward: BackwardFn):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward = backward
        self.seq = next(_seq)

    def __repr__(self) -> str:
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    """Dense array of 1-4 positive extents with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and not (isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating)):
            dtype = get_default_dtype()
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not 1 <= arr.ndim <= 4:
            raise ShapeError(f"tensor rank must be 1..4, got shape {arr.shape}")
        if arr.size == 0:
            raise ShapeError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = np.zeros_like(arr) if requires_grad else None
        self.node: Optional[Node] = None
        self.name = name

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        op = f" op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}{op})"

    # -- operator sugar; implementations live in functional ---------------
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        if isinstance(other, (int, float)):
            return F.scale(self, other)
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def relu(self):
        from . import functional as F
        return F.relu(self)

    def sigmoid(self):
        from . import functional as F
        return F.sigmoid(self)

    def abs(self):
        from . import functional as F
        return F.abs(self)

    def sum(self, axes=None):
        from . import functional as F
        return F.reduce("sum", self, axes)

    def mean(self, axes=None):
        from . import functional as F
        return F.reduce("mean", self, axes)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def backward(self) -> "GradientMap":
        return backward(self)


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and attach it to the graph.

    The node is only recorded when grad mode is on and some input requires
    a gradient; otherwise the result is a plain constant.
    """
    check_finite(data, f"forward of {op}")
    out = Tensor(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn)
    return out


class GradientMap(dict):
    """Leaf tensor -> accumulated gradient array, keyed by object identity."""

    def named(self, names: dict) -> dict:
        """Translate to ``{name: grad}`` given a ``{name: tensor}`` mapping."""
        by_id = {id(t): n for n, t in names.items()}
        return {by_id[id(t)]: g for t, g in self.items() if id(t) in by_id}


def _topo_nodes(root: Tensor) -> list:
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        t = stack.pop()
        node = t.node
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append((node, t))
        stack.extend(node.inputs)
    nodes.sort(key=lambda pair: pair[0].seq, reverse=True)
    return nodes


def backward(loss: Tensor) -> GradientMap:
    """Propagate d(loss)/d(.) to every reachable leaf that requires a gradient.

    Gradients are summed into each leaf's ``grad`` buffer (so a parameter used
    twice receives the sum); callers zero the buffers between optimizer steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a single-value loss, got shape {loss.shape}")
    grads = GradientMap()
    if not loss.requires_grad:
        return grads
    pending = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node, out in _topo_nodes(loss):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        assert len(in_grads) == len(node.inputs), node.op
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                raise ShapeError(f"{node.op} backward produced {ig.shape} for input {inp.shape}")
            if inp.node is not None:
                # graph is acyclic by construction: inputs always predate outputs
                assert inp.node.seq < node.seq
                prev = pending.get(id(inp))
                pending[id(inp)] = ig if prev is None else prev + ig
            else:
                prev = leaves.get(id(inp))
                leaves[id(inp)] = (inp, ig if prev is None else prev[1] + ig)
    for leaf, g in leaves.values():
        check_finite(g, f"gradient of {leaf.name or 'leaf'}")
        g = g.astype(leaf.data.dtype, copy=False)
        if leaf.grad is None:
            leaf.grad = g.copy()
        else:
            leaf.grad = leaf.grad + g
        grads[leaf] = leaf.grad
    return grads
