from .core import (
    Tape,
    TapeError,
    Tensor,
    as_tensor,
    backward,
    current_tape,
    default_dtype,
    set_default_dtype,
    wide_precision,
)
from .ops import (
    BNStats,
    ShapeError,
    activation,
    batch_norm,
    bilinear_resize,
    bilinear_upsample,
    clamp,
    concat,
    conv2d,
    cross_entropy,
    dropout,
    global_avg_pool,
    l2_normalize,
    leaky_relu,
    linear,
    log,
    max_pool2d,
    relu,
    sigmoid,
)
from .optim import AdamState, NonFiniteGradient, adam_step, collect_grads, zero_grads

__all__ = [
    "AdamState",
    "BNStats",
    "NonFiniteGradient",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "activation",
    "adam_step",
    "as_tensor",
    "backward",
    "batch_norm",
    "bilinear_resize",
    "bilinear_upsample",
    "clamp",
    "collect_grads",
    "concat",
    "conv2d",
    "cross_entropy",
    "current_tape",
    "default_dtype",
    "dropout",
    "global_avg_pool",
    "l2_normalize",
    "leaky_relu",
    "linear",
    "log",
    "max_pool2d",
    "relu",
    "set_default_dtype",
    "sigmoid",
    "wide_precision",
    "zero_grads",
]
