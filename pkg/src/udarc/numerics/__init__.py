"""Float64 tensors, a computation tape, and the differentiable operations used by the encoder."""
from .kernels import BACKEND
from .tensor import (
    MASK_VALUE,
    ContractError,
    DimensionError,
    NumericError,
    Tape,
    Tensor,
    active_tape,
    add,
    add_bias,
    backward,
    cross_entropy_logits,
    dropout,
    embedding,
    gather_rows,
    gelu,
    layer_norm,
    linear,
    masked_fill,
    matmul,
    mul,
    reshape,
    scale,
    softmax_rows,
    sum_all,
    take_first,
    take_last,
    transpose,
)

__all__ = [
    "BACKEND", "MASK_VALUE", "ContractError", "DimensionError", "NumericError", "Tape", "Tensor",
    "active_tape", "add", "add_bias", "backward", "cross_entropy_logits", "dropout", "embedding",
    "gather_rows", "gelu", "layer_norm", "linear", "masked_fill", "matmul", "mul", "reshape",
    "scale", "softmax_rows", "sum_all", "take_first", "take_last", "transpose",
]
