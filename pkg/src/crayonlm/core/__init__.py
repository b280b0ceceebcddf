from .functional import gelu, log_softmax, masked_cross_entropy, rms_norm, softmax
from .module import Module
from .optim import AdamW, LrSchedule, OptimizerState, adamw_step, cosine_lr
from .tensor import (
    Tensor,
    add,
    add_rows,
    backward,
    concat,
    embedding,
    exp,
    linear,
    log,
    matmul,
    no_grad,
    tensor,
)

__all__ = [
    "Tensor", "tensor", "no_grad", "backward", "add", "add_rows", "concat", "embedding", "exp",
    "linear", "log", "matmul", "gelu", "softmax", "log_softmax", "rms_norm",
    "masked_cross_entropy", "Module", "AdamW", "LrSchedule", "OptimizerState", "adamw_step",
    "cosine_lr",
]
