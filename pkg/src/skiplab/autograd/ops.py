"""Differentiable primitives.

Each op computes its forward value with numpy and registers a vector-Jacobian
product closure on the active tape. Broadcasting is supported for the
elementwise ops only.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .tape import Tensor, as_tensor, make_result

_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return make_result(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return make_result(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return make_result(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                   _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (numpy semantics)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result("matmul", a.data @ b.data, (a, b), vjp)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    x = as_tensor(x)
    return make_result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(
        "transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
        lambda g: (g.transpose(inverse),),
    )


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def index(x: Tensor, idx) -> Tensor:
    x = as_tensor(x)
    basic = _is_basic(idx)

    def vjp(g):
        out = np.zeros_like(x.data)
        if basic:  # a view: no repeated positions
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return make_result("index", np.array(x.data[idx], dtype=np.float64), (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_result("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, vjp)


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate along the channel (last) axis."""
    if len(tensors) == 1 and isinstance(tensors[0], (list, tuple)):
        tensors = tuple(tensors[0])
    return concat(tensors, axis=-1)


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity; the backward contribution through this edge is zero.

    The returned tensor holds the same bits as ``x`` and never joins the tape,
    so nothing can be accumulated into ``x`` via this edge.
    """
    x = as_tensor(x)
    out = Tensor(x.data)
    out.name = None if x.name is None else f"sg({x.name})"
    return out


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = as_tensor(x)
    sq = x.data * x.data
    t = np.tanh(_GELU_C * x.data * (1.0 + 0.044715 * sq))
    out = 0.5 * x.data * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * sq)
        d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * du
        return (g * d,)

    return make_result("gelu", out, (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", s, (x,), vjp)


def layer_norm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the optional affine pair."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def vjp(g):
        gx = g if gamma is None else g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape))
        return grads

    out = xhat
    inputs = [x]
    if gamma is not None:
        if gamma.shape[-1] != n:
            raise ShapeError(f"layer_norm: gamma shape {gamma.shape} vs features {n}")
        out = out * gamma.data
        inputs.append(gamma)
    if beta is not None:
        out = out + beta.data
        inputs.append(beta)
    return make_result("layer_norm", out, inputs, vjp)


def dropout(x: Tensor, p: float, rng, training: bool = True) -> Tensor:
    """Inverted dropout; the sampled mask is a constant for backward."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout requires an Rng")
    keep = (rng.uniform(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return make_result("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def mse_loss(pred: Tensor, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size
    return make_result(
        "mse_loss", np.asarray((diff**2).mean()), (pred, target),
        lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n),
    )


def embed_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` gathered by integer ``ids`` (any shape)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")

    def vjp(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return make_result("embed_lookup", table.data[ids], (table,), vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[:-1] != labels.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    flat = logits.data.reshape(-1, logits.shape[-1])
    lab = labels.reshape(-1)
    z = flat - flat.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = lab.size
    loss = -logp[np.arange(n), lab].mean()

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(n), lab] -= 1.0
        return ((g / n) * p.reshape(logits.shape),)

    return make_result("cross_entropy", np.asarray(loss), (logits,), vjp)
