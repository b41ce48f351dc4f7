"""Differentiable primitives over :class:`Tensor`.

Each primitive computes its forward value with numpy and registers a backward
closure via :func:`make_result`. Binary elementwise ops follow numpy
broadcasting; their backward sums the upstream gradient over stretched axes.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .tensor import ShapeError, Tensor, _state, make_result

Operand = Union[Tensor, float, int]


class UninitializedStatsError(RuntimeError):
    """Batch norm was asked for eval mode before any running-stat update."""


# -- kink monitoring (used by grad_check to exclude non-smooth points) -------

@contextmanager
def record_kinks() -> Iterator[list]:
    """Collect the sign pattern of every ReLU/LeakyReLU/abs input evaluated."""
    log: list = []
    previous = getattr(_state, "kinks", None)
    _state.kinks = log
    try:
        yield log
    finally:
        _state.kinks = previous


def _note_kink(x: np.ndarray) -> None:
    log = getattr(_state, "kinks", None)
    if log is not None:
        log.append(x > 0)


# -- helpers -----------------------------------------------------------------

def _as_tensor(x: Operand, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise -------------------------------------------------------------

def add(a: Operand, b: Operand) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result("add", a.data + b.data, (a, b), backward)


def sub(a: Operand, b: Operand) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result("sub", a.data - b.data, (a, b), backward)


def mul(a: Operand, b: Operand) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return unbroadcast(g * bd, a.shape), unbroadcast(g * ad, b.shape)

    return make_result("mul", ad * bd, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result("scale", a.data * a.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def neg(a: Tensor) -> Tensor:
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    _note_kink(a.data)
    mask = a.data > 0
    # subgradient at 0 is 0
    return make_result("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    _note_kink(a.data)
    factor = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return make_result("leaky_relu", a.data * factor, (a,), lambda g: (g * factor,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)
    return make_result("sigmoid", s, (a,), lambda g: (g * s * (1 - s),))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    _note_kink(a.data)
    sign = np.sign(a.data)
    return make_result("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "scale": scale,
    "relu": relu, "sigmoid": sigmoid, "abs": abs, "neg": neg,
}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name; ``b`` is the second operand (a constant for ``scale``)."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    if kind in ("add", "sub", "mul", "scale"):
        if b is None:
            raise ValueError(f"{kind} needs a second operand")
        return fn(a, b)
    return fn(a)


# -- shape ops -------------------------------------------------------------

def _normalize_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(kind: str, t: Tensor, axes=None) -> Tensor:
    """Sum or mean over ``axes`` (all axes when None); reduced axes keep extent 1.

    An empty axis collection is the identity.
    """
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    axes = _normalize_axes(axes, t.ndim)
    if not axes:
        return make_result(f"{kind}[]", t.data.copy(), (t,), lambda g: (g,))
    shape = t.shape
    count = int(np.prod([shape[a] for a in axes]))
    if kind == "sum":
        out = t.data.sum(axis=axes, keepdims=True)

        def backward(g):
            return (np.broadcast_to(g, shape).copy(),)
    else:
        out = t.data.mean(axis=axes, keepdims=True)

        def backward(g):
            return (np.broadcast_to(g / g.dtype.type(count), shape).copy(),)

    return make_result(kind, out, (t,), backward)


def sum(t: Tensor, axes=None) -> Tensor:  # noqa: A001
    return reduce("sum", t, axes)


def mean(t: Tensor, axes=None) -> Tensor:
    return reduce("mean", t, axes)


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    src = t.shape
    try:
        out = t.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from None
    return make_result("reshape", out, (t,), lambda g: (g.reshape(src),))


def expand(t: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast ``t`` to ``shape`` (extents of 1 stretch)."""
    shape = tuple(shape)
    src = t.shape
    try:
        out = np.broadcast_to(t.data, shape).copy()
    except ValueError:
        raise ShapeError(f"cannot expand {src} to {shape}") from None
    return make_result("expand", out, (t,), lambda g: (unbroadcast(g, src),))


def concat(ts: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (the channel axis by default)."""
    ts = list(ts)
    if not ts:
        raise ShapeError("concat of an empty list")
    if len(ts) == 1:
        return make_result("concat", ts[0].data.copy(), ts, lambda g: (g,))
    ref = ts[0].shape
    axis = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != axis
        ):
            raise ShapeError(f"concat extent mismatch: {ref} vs {t.shape} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])
    out = np.concatenate([t.data for t in ts], axis=axis)

    def backward(g):
        index = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            parts.append(g[tuple(index)].copy())
        return parts

    return make_result("concat", out, ts, backward)


def pad(t: Tensor, width: int, mode: str = "zero") -> Tensor:
    """Pad the two spatial axes of an NCHW tensor by ``width`` on every side.

    ``mode`` is ``"zero"`` or ``"edge"`` (replicate border values).
    """
    if t.ndim != 4:
        raise ShapeError(f"pad expects NCHW, got {t.shape}")
    p = int(width)
    if p == 0:
        return make_result("pad", t.data.copy(), (t,), lambda g: (g,))
    np_mode = {"zero": "constant", "edge": "edge"}[mode]
    out = np.pad(t.data, ((0, 0), (0, 0), (p, p), (p, p)), mode=np_mode)
    H, W = t.shape[2:]

    def backward(g):
        if mode == "zero":
            return (g[:, :, p:p + H, p:p + W].copy(),)
        # fold the replicated borders back onto the edge rows/cols
        g = g.copy()
        g[:, :, p, :] += g[:, :, :p, :].sum(axis=2)
        g[:, :, p + H - 1, :] += g[:, :, p + H:, :].sum(axis=2)
        g = g[:, :, p:p + H, :]
        g[:, :, :, p] += g[:, :, :, :p].sum(axis=3)
        g[:, :, :, p + W - 1] += g[:, :, :, p + W:].sum(axis=3)
        return (np.ascontiguousarray(g[:, :, :, p:p + W]),)

    return make_result(f"pad[{mode}]", out, (t,), backward)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return make_result("matmul", ad @ bd, (a, b), backward)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """Columns of shape (C*kh*kw, N*Ho*Wo) from a padded NCHW array.

    Rows are ordered (channel, ki, kj) to match ``weight.reshape(O, -1)``;
    building them channel-major copies whole spatial rows at a time.
    """
    N, C = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((C, kh, kw, N, Ho, Wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride]
    return cols.reshape(C * kh * kw, N * Ho * Wo)


def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Zero-pad (or crop, for negative widths) the spatial axes of NCHW data."""
    if ph < 0 or pw < 0:
        x = x[:, :, max(-ph, 0):x.shape[2] - max(-ph, 0), max(-pw, 0):x.shape[3] - max(-pw, 0)]
        ph, pw = max(ph, 0), max(pw, 0)
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _rows_to_nchw(rows: np.ndarray, N: int, H: int, W: int) -> np.ndarray:
    return np.ascontiguousarray(rows.reshape(N, H, W, -1).transpose(0, 3, 1, 2))


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of NCHW input with an (out_c, in_c, kh, kw) kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and 4-D weight, got {x.shape}, {weight.shape}")
    N, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, weight expects {Cw}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d bias must have shape ({O},), got {bias.shape}")
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)

    xp = _pad_hw(x.data, padding, padding)
    cols = _im2col(xp, kh, kw, stride, Ho, Wo)
    wmat = weight.data.reshape(O, -1)
    rows = cols.T @ wmat.T
    if bias is not None:
        rows += bias.data
    out = _rows_to_nchw(rows, N, Ho, Wo)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, O)
        gw = None
        if weight.requires_grad:
            gw = np.ascontiguousarray((cols @ g2).T).reshape(O, C, kh, kw)
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1:
                # full correlation of the upstream grad with the flipped kernel
                gp = _pad_hw(g, kh - 1 - padding, kw - 1 - padding)
                gcols = _im2col(gp, kh, kw, 1, H, W)
                wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, -1)
                gx = _rows_to_nchw(gcols.T @ wflip.T, N, H, W)
            else:
                dcols = (g2 @ wmat).reshape(N, Ho, Wo, C, kh, kw)
                dxp = np.zeros((N, C) + xp.shape[2:], dtype=xp.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + stride * (Ho - 1) + 1:stride,
                            j:j + stride * (Wo - 1) + 1:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                gx = np.ascontiguousarray(dxp[:, :, padding:padding + H, padding:padding + W])
        if bias is None:
            return gx, gw
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result("conv2d", out, inputs, backward)


# -- pooling / normalization -------------------------------------------------

def global_avg_pool(t: Tensor) -> Tensor:
    """Mean over each H x W plane, giving shape (N, C, 1, 1)."""
    if t.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {t.shape}")
    shape = t.shape
    hw = shape[2] * shape[3]
    out = t.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / g.dtype.type(hw), shape).copy(),)

    return make_result("global_avg_pool", out, (t,), backward)


@dataclass
class RunningStats:
    """Per-channel running mean/variance owned by a batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    updates: int = 0

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), 0)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: Optional[RunningStats],
               mode: str = "train", momentum: float = 0.1, eps: float = 1e-5,
               update_stats: bool = True) -> Tensor:
    """Per-channel batch normalization of an NCHW tensor.

    ``mode="train"`` normalizes with batch statistics over (N, H, W) and, when
    ``update_stats`` is set, folds them into ``stats`` with ``momentum`` (the
    running variance uses the unbiased estimate). ``mode="eval"`` uses
    ``stats`` and raises :class:`UninitializedStatsError` if it was never
    updated.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects NCHW, got {x.shape}")
    N, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm affine params must have shape ({C},)")
    g4 = gamma.data.reshape(1, C, 1, 1)
    b4 = beta.data.reshape(1, C, 1, 1)
    dt = x.dtype.type

    if mode == "train":
        M = N * H * W
        if M < 2:
            raise ShapeError("train-mode batch_norm needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1 / np.sqrt(var + dt(eps))
        xhat = xc * inv
        out = g4 * xhat + b4
        if stats is not None and update_stats:
            m = stats.mean.dtype.type(momentum)
            unbiased = var.reshape(C) * dt(M / (M - 1))
            stats.mean[...] = (1 - m) * stats.mean + m * mu.reshape(C)
            stats.var[...] = (1 - m) * stats.var + m * unbiased
            stats.updates += 1

        def backward(g):
            gg = (g * xhat).sum(axis=(0, 2, 3))
            gb = g.sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                gx = (g4 * inv / dt(M)) * (
                    dt(M) * g - gb.reshape(1, C, 1, 1) - xhat * gg.reshape(1, C, 1, 1)
                )
            return gx, gg, gb
    elif mode == "eval":
        if stats is None or stats.updates == 0:
            raise UninitializedStatsError("batch_norm eval mode before any running-stat update")
        rm = stats.mean.reshape(1, C, 1, 1).astype(x.dtype)
        inv = 1 / np.sqrt(stats.var.reshape(1, C, 1, 1).astype(x.dtype) + dt(eps))
        xhat = (x.data - rm) * inv
        out = g4 * xhat + b4

        def backward(g):
            return g * g4 * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")

    return make_result(f"batch_norm[{mode}]", out, (x, gamma, beta), backward)


# -- adversarial plumbing ------------------------------------------------------

def grad_reverse(t: Tensor, lambda_grl: float = 1.0) -> Tensor:
    """Identity on the forward pass; multiplies the gradient by ``-lambda_grl``."""
    if lambda_grl < 0:
        raise ValueError("lambda_grl must be non-negative")
    factor = -float(lambda_grl)
    out = make_result("grad_reverse", t.data, (t,), lambda g: (g * g.dtype.type(factor),))
    return out
