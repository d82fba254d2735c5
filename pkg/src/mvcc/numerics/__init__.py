from mvcc.numerics.checkpoint import load_checkpoint, save_checkpoint
from mvcc.numerics.optim import AdamState, adam_step
from mvcc.numerics.tensor import (
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    cross_entropy,
    embedding,
    gather_rows,
    gelu,
    getitem,
    keep,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    parameter,
    reshape,
    softmax,
    sum_,
    swap_last,
    transpose,
)

__all__ = [
    "AdamState",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "cross_entropy",
    "embedding",
    "gather_rows",
    "gelu",
    "getitem",
    "keep",
    "layer_norm",
    "linear",
    "load_checkpoint",
    "matmul",
    "mean",
    "mul",
    "parameter",
    "reshape",
    "save_checkpoint",
    "softmax",
    "sum_",
    "swap_last",
    "transpose",
]
