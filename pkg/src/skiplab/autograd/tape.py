"""Dense tensors and the define-by-run gradient tape.

Every differentiable op appends one node to the active :class:`GradTape`.
Nodes are appended in creation order, so the node list is already a
topological order of the forward graph and ``backward`` is a single reverse
sweep over it.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

_uid = itertools.count()
_local = threading.local()


class AutogradError(RuntimeError):
    """Misuse of the tape: non-scalar loss, repeated backward, cycles."""


class NonFiniteError(FloatingPointError):
    """A forward value or gradient became NaN or infinite."""


class Tensor:
    """Row-major float64 array with an optional derivative record.

    ``requires_grad`` marks leaves we want gradients for; results of ops
    inherit it from their inputs. A tensor that does not require grad never
    creates tape nodes.
    """

    __slots__ = ("data", "requires_grad", "name", "uid", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.uid = next(_uid)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic sugar; the op implementations live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    op: str
    out: Tensor
    inputs: tuple
    vjp: VJP
    position: int


@dataclass
class GradTape:
    """Records the forward graph of one pass.

    Use as a context manager; ops executed inside the block are recorded on
    this tape. Tapes nest (the innermost one records) and are thread-local.
    """

    nodes: list = field(default_factory=list)
    grads: dict = field(default_factory=dict)
    _produced_at: dict = field(default_factory=dict)
    _done: bool = False

    def __enter__(self) -> "GradTape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, op: str, out: Tensor, inputs: Sequence[Tensor], vjp: VJP) -> None:
        if self._done:
            raise AutogradError("tape already consumed by backward(); open a new tape")
        node = Node(op, out, tuple(inputs), vjp, len(self.nodes))
        self._produced_at[out.uid] = node.position
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> dict:
        """Accumulate dLoss/dT for every tensor reachable from ``loss``.

        Returns a dict keyed by tensor uid. Calling twice is an error.
        """
        if self._done:
            raise AutogradError("backward() called twice on the same tape")
        if loss.size != 1:
            raise AutogradError(f"loss must be scalar, got shape {loss.shape}")
        self._done = True
        grads = {loss.uid: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.get(node.out.uid)
            if g is None:
                continue
            for inp in node.inputs:
                if self._produced_at.get(inp.uid, -1) >= node.position:
                    raise AutogradError(f"cycle in tape at op {node.op!r}")
            input_grads = node.vjp(g)
            for inp, gi in zip(node.inputs, input_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if not np.all(np.isfinite(gi)):
                    raise NonFiniteError(f"non-finite gradient flowing into {node.op!r}")
                prev = grads.get(inp.uid)
                grads[inp.uid] = gi if prev is None else prev + gi
        self.grads = grads
        return grads

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward() loss w.r.t. ``t`` (zeros if unreached)."""
        g = self.grads.get(t.uid)
        return np.zeros_like(t.data) if g is None else g


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional[GradTape]:
    stack = _stack()
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording: ops inside run as plain numpy."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    """Wrap ``data`` as an op output and record it if any input needs grad."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op!r}")
    needs = any(t.requires_grad for t in inputs)
    tape = active_tape()
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.uid = next(_uid)
    out.requires_grad = needs and tape is not None
    if out.requires_grad:
        tape.record(op, out, inputs, vjp)
    return out
