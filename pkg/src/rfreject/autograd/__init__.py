from .module import LayerNorm, Linear, Module, load_checkpoint, save_checkpoint
from .optim import Adam, AdamState, adam_step, clip_grad_norm
from .tensor import (
    GradError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    conv1d,
    detect_anomaly,
    div,
    exp,
    gelu,
    getitem,
    layer_norm,
    linear,
    log,
    matmul,
    mean,
    mse_loss,
    mul,
    no_grad,
    parameter,
    power,
    precision,
    relu,
    reshape,
    rotary,
    sigmoid,
    softmax,
    sub,
    tanh,
    transpose,
    tsum,
)
