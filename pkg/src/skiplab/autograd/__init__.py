"""Minimal reverse-mode automatic differentiation over float64 arrays."""

from .gradcheck import gradcheck
from .ops import (
    ShapeError,
    add,
    concat,
    concat_channels,
    cross_entropy,
    dropout,
    embed_lookup,
    gelu,
    index,
    layer_norm,
    matmul,
    mean,
    mse_loss,
    mul,
    reshape,
    softmax,
    stop_gradient,
    sub,
    transpose,
)
from .ops import sum as tsum
from .rng import Rng, RngState, RngStateError, rng_restore, rng_save
from .tape import (
    AutogradError,
    GradTape,
    NonFiniteError,
    Tensor,
    active_tape,
    as_tensor,
    no_grad,
)


def backward(loss: Tensor, tape: GradTape) -> dict:
    """Run ``tape.backward(loss)``; returns gradients keyed by tensor uid."""
    return tape.backward(loss)


__all__ = [
    "AutogradError", "GradTape", "NonFiniteError", "Rng", "RngState", "RngStateError",
    "ShapeError", "Tensor", "active_tape", "add", "as_tensor", "backward", "concat",
    "concat_channels", "cross_entropy", "dropout", "embed_lookup", "gelu", "gradcheck",
    "index", "layer_norm", "matmul", "mean", "mse_loss", "mul", "no_grad", "reshape",
    "rng_restore", "rng_save", "softmax", "stop_gradient", "sub", "transpose", "tsum",
]
