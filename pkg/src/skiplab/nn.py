"""Small layer library and optimizer on top of the autograd tape."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import autograd as ag
from .autograd import Rng, Tensor


class Module:
    """Parameter container with dotted names, in the torch style."""

    def __init__(self):
        self._parameters: dict[str, Tensor] = {}

    def add_param(self, name: str, value) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._parameters[name] = t
        setattr(self, name, t)
        return t

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._parameters.items():
            yield prefix + name, t
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def freeze(self) -> "Module":
        for _, t in self.named_parameters():
            t.requires_grad = False
        return self

    def unfreeze(self) -> "Module":
        for _, t in self.named_parameters():
            t.requires_grad = True
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, t in params.items():
            if state[name].shape != t.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {t.shape}")
            t.data = np.array(state[name], dtype=np.float64)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: Rng, bias: bool = True, scale: float = 1.0):
        super().__init__()
        self.add_param("weight", rng.normal((n_in, n_out), scale / math.sqrt(n_in)))
        self.bias = self.add_param("bias", np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ag.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.add_param("gamma", np.ones(dim))
        self.add_param("beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: Rng):
        super().__init__()
        self.fc1 = Linear(n_in, n_hidden, rng)
        self.fc2 = Linear(n_hidden, n_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))


def rotate_pairs_matrix(dim: int) -> np.ndarray:
    """Matrix R with (x R) mapping each pair (a, b) to (-b, a)."""
    if dim % 2:
        raise ValueError("rotary dimension must be even")
    r = np.zeros((dim, dim))
    for i in range(0, dim, 2):
        r[i + 1, i] = -1.0
        r[i, i + 1] = 1.0
    return r


def apply_rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """x * cos + rotate(x) * sin with cos/sin broadcast over leading axes."""
    r = rotate_pairs_matrix(x.shape[-1])
    return x * Tensor(cos) + ag.matmul(x, Tensor(r)) * Tensor(sin)


class Attention(Module):
    def __init__(self, dim: int, num_heads: int, rng: Rng):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.out = Linear(dim, dim, rng)
        self.last_probs: Optional[np.ndarray] = None

    def __call__(self, x: Tensor, rotary: Optional[tuple] = None, record: bool = False) -> Tensor:
        b, t, d = x.shape
        h = self.num_heads
        dh = d // h
        qkv = self.qkv(x).reshape(b, t, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        if rotary is not None:
            cos, sin = rotary
            q = apply_rotary(q, cos, sin)
            k = apply_rotary(k, cos, sin)
        scores = ag.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        probs = ag.softmax(scores, axis=-1)
        if record:
            self.last_probs = probs.data.copy()
        ctx = ag.matmul(probs, v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return self.out(ctx)


class Block(Module):
    """Pre-norm attention + MLP residual block."""

    def __init__(self, dim: int, num_heads: int, rng: Rng, mlp_ratio: int = 2,
                 dropout: float = 0.0, identity: bool = False):
        super().__init__()
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(dim, num_heads, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim, dim, rng)
        self.dropout = dropout
        if identity:
            for lin in (self.attn.out, self.mlp.fc2):
                lin.weight.data[:] = 0.0
                lin.bias.data[:] = 0.0

    def __call__(self, x: Tensor, rng: Optional[Rng] = None, training: bool = True,
                 rotary: Optional[tuple] = None, record: bool = False) -> Tensor:
        a = self.attn(self.ln1(x), rotary=rotary, record=record)
        x = x + ag.dropout(a, self.dropout, rng, training)
        m = self.mlp(self.ln2(x))
        return x + ag.dropout(m, self.dropout, rng, training)


class AdamW:
    """Adam with decoupled weight decay over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.05):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.t = {n: 0 for n in params}

    def step(self, grads: dict[str, np.ndarray], lr: Optional[float] = None,
             only: Optional[set] = None) -> None:
        """Update every parameter named in ``grads`` (restricted to ``only``)."""
        lr = self.lr if lr is None else lr
        for name, g in grads.items():
            if only is not None and name not in only:
                continue
            p = self.params[name]
            self.t[name] += 1
            k = self.t[name]
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            mhat = self.m[name] / (1 - self.b1**k)
            vhat = self.v[name] / (1 - self.b2**k)
            p.data = p.data * (1.0 - lr * self.weight_decay) - lr * mhat / (np.sqrt(vhat) + self.eps)


def cosine_lr(step: int, total: int, base_lr: float, warmup_ratio: float = 0.03,
              cosine: bool = True) -> float:
    warm = int(round(warmup_ratio * total))
    if step < warm:
        return base_lr * (step + 1) / warm
    if not cosine or total <= warm:
        return base_lr
    progress = (step - warm) / max(1, total - warm)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
