from .gradcheck import GradCheckReport, NonDeterministicForward, grad_check, relative_error
from .optim import AdamW, LrSchedule, OptimizerState, adamw_step, lr_at
from .tensor import (
    NonFiniteError,
    Tensor,
    add,
    clip,
    concat,
    div,
    embedding,
    exp,
    gelu,
    getitem,
    is_grad_enabled,
    layer_norm,
    log,
    log_sigmoid,
    log_softmax,
    matmul,
    mean,
    minimum,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    sub,
    swap_last,
    tanh,
    transpose,
    tsum,
)
