"""Dense float64 kernel: tape-based reverse-mode gradients, gradient checking, RNG."""
from . import ops
from .gradcheck import grad_check
from .ops import (
    EPS,
    add,
    concat,
    div,
    exp,
    grad_reverse,
    linear,
    log,
    logdet,
    logsumexp,
    maximum,
    log_sigmoid,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    pad_time,
    relu,
    reshape,
    safe_div,
    scale,
    sigmoid,
    softmax,
    softmax_rows,
    sqrt,
    square,
    stop_gradient,
    sub,
    tanh,
    take,
    transpose,
)
from .ops import sum as reduce_sum
from .rng import make_rng
from .tape import Tape, Tensor, as_tensor, record

__all__ = [
    "EPS", "Tape", "Tensor", "add", "as_tensor", "concat", "div", "exp", "grad_check",
    "grad_reverse", "linear", "log", "logdet", "logsumexp", "maximum", "log_sigmoid", "log_softmax", "make_rng", "matmul",
    "mean", "mul", "neg", "ops", "pad_time", "record", "reduce_sum", "relu", "reshape",
    "safe_div", "scale", "sigmoid", "softmax", "softmax_rows", "sqrt", "square",
    "stop_gradient", "sub", "tanh", "take", "transpose",
]
from .nn import MLP, Adam, Linear, Module, xavier_uniform  # noqa: E402
