"""Minimal reverse-mode differentiable numerical core (float64)."""

import ctypes as _ctypes
import os as _os


def _tune_allocator() -> None:
    # keep large numpy buffers on the heap so freed blocks are reused;
    # default mmap-per-allocation page-faults every fresh tensor
    if _os.environ.get("MAFT_NO_MALLOPT"):
        return
    try:
        libc = _ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 28)  # M_MMAP_THRESHOLD = 256 MiB
    except (OSError, AttributeError):
        pass


_tune_allocator()

from .gradcheck import gradient_check
from .losses import binary_cross_entropy, cross_entropy, dice, l1, loss_terms
from .optim import AdamW, MissingGradientError
from .tensor import (
    DimensionError,
    Graph,
    GraphError,
    NumericError,
    Tensor,
    absolute,
    add,
    attn_softmax,
    check_finite,
    clip,
    concat,
    cos,
    custom_op,
    div,
    exp,
    gather,
    layer_norm,
    linear,
    log,
    log_softmax,
    masked_fill,
    matmul,
    mean,
    mlp2,
    mul,
    neg,
    no_grad,
    ones,
    power,
    relu,
    reshape,
    set_check_finite,
    sigmoid,
    sin,
    softmax,
    sqrt,
    sub,
    sum,
    tensor,
    transpose,
    zeros,
)

__all__ = [
    "AdamW",
    "DimensionError",
    "Graph",
    "GraphError",
    "MissingGradientError",
    "NumericError",
    "Tensor",
    "absolute",
    "add",
    "attn_softmax",
    "binary_cross_entropy",
    "check_finite",
    "clip",
    "concat",
    "cos",
    "cross_entropy",
    "custom_op",
    "dice",
    "div",
    "exp",
    "gather",
    "gradient_check",
    "l1",
    "layer_norm",
    "linear",
    "log",
    "log_softmax",
    "loss_terms",
    "masked_fill",
    "matmul",
    "mean",
    "mlp2",
    "mul",
    "neg",
    "no_grad",
    "ones",
    "power",
    "relu",
    "reshape",
    "set_check_finite",
    "sigmoid",
    "sin",
    "softmax",
    "sqrt",
    "sub",
    "sum",
    "tensor",
    "transpose",
    "zeros",
]
