"""Dense tensors with reverse-mode automatic differentiation."""

from .functional import (
    RunningStats,
    UninitializedStatsError,
    abs,
    add,
    batch_norm,
    concat,
    conv2d,
    elementwise,
    expand,
    global_avg_pool,
    grad_reverse,
    leaky_relu,
    matmul,
    mean,
    mul,
    neg,
    pad,
    record_kinks,
    reduce,
    relu,
    reshape,
    scale,
    sigmoid,
    sub,
    sum,
    unbroadcast,
)
from .gradcheck import GradCheckResult, NondeterministicBuilderError, grad_check
from .tensor import (
    GradientMap,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    default_dtype,
    get_default_dtype,
    make_result,
    no_grad,
)
