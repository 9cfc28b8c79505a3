from .gradcheck import grad_check, numerical_grad
from .ops import (
    BatchNormState,
    add,
    avgpool3d,
    batchnorm3d,
    bce_loss,
    concat_channels,
    conv3d,
    globalavgpool3d,
    linear,
    maxpool3d,
    mean_all,
    mul,
    relu,
    reshape,
    sigmoid,
    slice_channels,
    sum_all,
)
from .tensor import DimensionError, Record, Tape, Tensor, backward, no_grad

__all__ = [
    "BatchNormState",
    "DimensionError",
    "Record",
    "Tape",
    "Tensor",
    "add",
    "avgpool3d",
    "backward",
    "batchnorm3d",
    "bce_loss",
    "concat_channels",
    "conv3d",
    "globalavgpool3d",
    "grad_check",
    "linear",
    "maxpool3d",
    "mean_all",
    "mul",
    "no_grad",
    "numerical_grad",
    "relu",
    "reshape",
    "sigmoid",
    "slice_channels",
    "sum_all",
]
