"""Tensor core: autodiff, neural primitives, AdamW and the LR schedule."""

from . import functional
from .errors import GraphError, NumericError, ParameterError, ShapeError
from .functional import (
    cross_entropy,
    drop_path,
    dropout,
    gelu,
    layer_norm,
    linear,
    log_softmax,
    smooth_l1,
    softmax,
)
from .gradcheck import check_gradients, numerical_gradient, relative_error
from .nn import LayerNorm, Linear, Module, Parameter, trunc_normal
from .optim import AdamW, AdamWState, LrSchedule, adamw_step, lr_at
from .tensor import (
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    concat,
    exp,
    gather,
    grad_enabled,
    is_strict,
    log,
    matmul,
    mean,
    no_grad,
    power,
    relu,
    reshape,
    sqrt,
    stack,
    strict_mode,
    tanh,
    transpose,
    where,
)

__all__ = [name for name in dir() if not name.startswith("_")]
