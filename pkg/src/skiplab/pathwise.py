"""Pathwise gradient decomposition and windowed gradient statistics.

``decompose`` runs two forward/backward passes over the same batch with the
same random draws: one with every skip tap detached (main path only) and one
standard pass. The skip-path gradient is their difference. The remaining
functions are pure statistics over windows of the resulting snapshots.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

from .autograd import GradTape, NonFiniteError, Rng, Tensor

EPS = 1e-12


class PathwiseModel(Protocol):
    def loss(self, batch, rng: Optional[Rng] = None, detach_all: bool = False,
             training: bool = True) -> Tensor: ...

    def parameters(self) -> dict[str, Tensor]: ...

    def param_groups(self) -> dict[str, list[str]]: ...


@dataclass
class GradSnapshot:
    step: int
    group: str
    g_main: np.ndarray
    g_skip: np.ndarray
    g_full: np.ndarray
    loss: float = float("nan")

    def __post_init__(self):
        if not (self.g_main.shape == self.g_skip.shape == self.g_full.shape):
            raise ValueError("snapshot vectors must share one length")


def _flatten(grads: dict, params: dict, names: Sequence[str]) -> np.ndarray:
    parts = []
    for n in names:
        t = params[n]
        g = grads.get(t.uid)
        parts.append(np.zeros(t.size) if g is None else np.asarray(g).reshape(-1))
    return np.concatenate(parts) if parts else np.zeros(0)


def decompose(model: PathwiseModel, batch, param_group: Optional[str | Sequence[str]],
              rng: Optional[Rng], step: int = 0, return_full: bool = False):
    """Split the gradient on ``param_group`` into main and skip components.

    With ``return_full`` the full-pass gradient of every parameter is also
    returned (keyed by name) so a training loop can reuse it.
    """
    params = model.parameters()
    if param_group is None:
        param_group = model.default_group()
    if isinstance(param_group, str):
        groups = model.param_groups()
        if param_group not in groups:
            raise KeyError(f"unknown parameter group {param_group!r}")
        group_name, names = param_group, groups[param_group]
    else:
        names = list(param_group)
        missing = [n for n in names if n not in params]
        if missing:
            raise KeyError(f"unknown parameters {missing}")
        group_name = ",".join(names)

    state = rng.save() if rng is not None else None
    with GradTape() as tape:
        loss_main = model.loss(batch, rng, detach_all=True)
    g_main = _flatten(tape.backward(loss_main), params, names)

    if rng is not None:
        rng.restore(state)
    with GradTape() as tape:
        loss_full = model.loss(batch, rng, detach_all=False)
    full = tape.backward(loss_full)
    g_full = _flatten(full, params, names)

    if not (np.all(np.isfinite(g_main)) and np.all(np.isfinite(g_full))):
        raise NonFiniteError("non-finite gradient in pathwise decomposition")
    snap = GradSnapshot(step, group_name, g_main, g_full - g_main, g_full, float(loss_full.data))
    if return_full:
        by_name = {n: full[t.uid] for n, t in params.items() if t.uid in full}
        return snap, by_name
    return snap


_BRANCH = {"main": "g_main", "skip": "g_skip", "full": "g_full"}


def _stack(window, branch: Optional[str]) -> np.ndarray:
    if len(window) == 0:
        raise ValueError("empty window")
    if branch is None:
        return np.stack([np.asarray(g, dtype=np.float64).reshape(-1) for g in window])
    return np.stack([getattr(s, _BRANCH[branch]) for s in window])


def window_mean(window, branch: Optional[str] = None) -> np.ndarray:
    """Mean vector of the window; ``window`` holds snapshots (with ``branch``) or raw vectors."""
    return _stack(window, branch).mean(axis=0)


def second_moment(window, branch: Optional[str] = None) -> float:
    g = _stack(window, branch)
    return float(np.mean(np.einsum("ij,ij->i", g, g)))


def variance_trace(window, branch: Optional[str] = None) -> float:
    g = _stack(window, branch)
    mean = g.mean(axis=0)
    return float(np.mean(np.einsum("ij,ij->i", g, g)) - mean @ mean)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _pair(window_main, window_skip) -> tuple[np.ndarray, np.ndarray]:
    m = _stack(window_main, None)
    s = _stack(window_skip, None)
    if m.shape != s.shape:
        raise ValueError(f"main/skip window shapes differ: {m.shape} vs {s.shape}")
    return m, s


def delta_ratio(window_main, window_skip=None) -> float:
    """Cross-covariance strength ``2|mean<m_i,s_i> - <m̂,ŝ>| / (tr Σ̂_s + eps)``.

    Pass either two aligned vector windows or one window of snapshots.
    """
    if window_skip is None:
        window_main, window_skip = ([s.g_main for s in window_main],
                                    [s.g_skip for s in window_main])
    m, s = _pair(window_main, window_skip)
    mh, sh = m.mean(axis=0), s.mean(axis=0)
    cross = np.mean(np.einsum("ij,ij->i", m, s)) - mh @ sh
    tr_s = np.mean(np.einsum("ij,ij->i", s, s)) - sh @ sh
    return float(2.0 * abs(cross) / (tr_s + EPS))


def snr(window, branch: Optional[str] = None) -> float:
    """‖ĝ‖² / mean‖g‖² over the window; 0 for an all-zero window."""
    g = _stack(window, branch)
    denom = np.mean(np.einsum("ij,ij->i", g, g))
    if denom == 0.0:
        return 0.0
    mean = g.mean(axis=0)
    return float(min(1.0, max(0.0, (mean @ mean) / denom)))


def moving_average(series, horizon: int) -> np.ndarray:
    """Trailing simple moving average; the first entries average the available prefix."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    x = np.asarray(series, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(0, idx - horizon)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class TransitionReport:
    t_trans: Optional[int]
    ratio: np.ndarray
    window: int
    consecutive: int
    medians: np.ndarray = field(default_factory=lambda: np.zeros(0))


def running_median(series, window: int) -> np.ndarray:
    """Median of each trailing window; entry j covers series[j : j + window]."""
    x = np.asarray(series, dtype=np.float64)
    if x.size < window:
        return np.zeros(0)
    view = np.lib.stride_tricks.sliding_window_view(x, window)
    return np.median(view, axis=1)


def transition_step(series, window: int, consecutive: int,
                    steps: Optional[Sequence[int]] = None) -> TransitionReport:
    """First step after which the trailing-window median stays below 1.

    The running median at step ``t`` covers the ``window`` values ending at
    ``t``. ``t_trans`` is the step label ``t`` such that the medians at the
    next ``consecutive`` steps are all below 1 (and it is the earliest such
    step). ``steps`` labels the series positions (default 0, 1, ...).
    """
    if window <= 0 or consecutive <= 0:
        raise ValueError("window and consecutive must be positive")
    x = np.asarray(series, dtype=np.float64)
    labels = np.arange(x.size) if steps is None else np.asarray(steps)
    if labels.size != x.size:
        raise ValueError("steps must label every series entry")
    if x.size < window:
        raise ValueError(f"series length {x.size} shorter than window {window}")
    med = running_median(x, window)
    below = med < 1.0
    # med[j] ends at position j + window - 1; t sits one position before the run.
    run = 0
    for j, ok in enumerate(below):
        run = run + 1 if ok else 0
        if run >= consecutive:
            pos = (j - consecutive + 1) + window - 2
            if pos >= 0:
                return TransitionReport(int(labels[pos]), x, window, consecutive, med)
    return TransitionReport(None, x, window, consecutive, med)


@dataclass
class WindowStats:
    window: int
    mean_main: np.ndarray
    mean_skip: np.ndarray
    second_main: float
    second_skip: float
    tr_main: float
    tr_skip: float
    cos: float
    delta: float
    snr_main: float
    snr_skip: float
    snr_full: float


def window_stats(window: Sequence[GradSnapshot]) -> WindowStats:
    m = _stack(window, "main")
    s = _stack(window, "skip")
    return WindowStats(
        window=len(window),
        mean_main=m.mean(axis=0),
        mean_skip=s.mean(axis=0),
        second_main=second_moment(m),
        second_skip=second_moment(s),
        tr_main=variance_trace(m),
        tr_skip=variance_trace(s),
        cos=cosine(window[-1].g_skip, window[-1].g_main),
        delta=delta_ratio(m, s),
        snr_main=snr(m),
        snr_skip=snr(s),
        snr_full=snr(window, "full"),
    )


@dataclass
class AssumptionReport:
    c_hat: Optional[float]
    rho_hat: Optional[float]
    delta_hat: float
    mean_inner: float


def assumption_report(window_main, window_skip=None) -> AssumptionReport:
    """Estimates of the variance-dominance and weak-alignment quantities; no thresholds."""
    if window_skip is None:
        window_main, window_skip = ([s.g_main for s in window_main],
                                    [s.g_skip for s in window_main])
    m, s = _pair(window_main, window_skip)
    if m.shape[0] < 2:
        raise ValueError("assumption report needs a window of at least 2")
    tr_m, tr_s = variance_trace(m), variance_trace(s)
    mh, sh = m.mean(axis=0), s.mean(axis=0)
    nm = float(np.linalg.norm(mh))
    return AssumptionReport(
        c_hat=None if tr_m <= EPS else tr_s / tr_m,
        rho_hat=None if nm == 0.0 else float(np.linalg.norm(sh)) / nm,
        delta_hat=delta_ratio(m, s),
        mean_inner=float(mh @ sh),
    )


def snapshot_record(snaps: Sequence[GradSnapshot], i: int, window: int) -> dict:
    """One JSONL record for snapshot ``i``; windowed fields are None until the window fills."""
    s = snaps[i]
    rec = {
        "step": s.step,
        "group": s.group,
        "norm_main": float(s.g_main @ s.g_main),
        "norm_skip": float(s.g_skip @ s.g_skip),
        "norm_full": float(s.g_full @ s.g_full),
        "cos": cosine(s.g_skip, s.g_main),
        "delta": None, "snr_main": None, "snr_skip": None, "tr_m": None, "tr_s": None,
    }
    if i + 1 >= window:
        w = window_stats(snaps[i + 1 - window:i + 1])
        rec.update(delta=w.delta, snr_main=w.snr_main, snr_skip=w.snr_skip,
                   tr_m=w.tr_main, tr_s=w.tr_skip)
    return rec
