from __future__ import annotations

from typing import Callable

import numpy as np

from .tape import GradTape, NonFiniteError, Tensor, no_grad


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    The error per coordinate is ``|a - n| / max(|a|, |n|, 1e-12)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    with GradTape() as tape:
        out = f(leaf)
    tape.backward(out)
    analytic = tape.grad(leaf)

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(x0.size):
            vals = []
            for sign in (1.0, -1.0):
                xp = x0.copy().reshape(-1)
                xp[i] += sign * step
                v = float(f(Tensor(xp.reshape(x0.shape))).data)
                if not np.isfinite(v):
                    raise NonFiniteError(f"f is non-finite at perturbed coordinate {i}")
                vals.append(v)
            flat[i] = (vals[0] - vals[1]) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))
