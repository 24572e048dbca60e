"""Patch encoder with stride-S skip taps and stop-gradient fusion.

The adapter input is ``[h_main ; taps deep->shallow]`` along channels. The
``detach_count`` shallowest taps pass through ``stop_gradient`` first, so
their features still reach the adapter while their encoder blocks only learn
through the main path. Channel layout never depends on ``detach_count``:
changing it leaves the forward value untouched.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import autograd as ag
from .autograd import Rng, Tensor
from .nn import MLP, Block, LayerNorm, Linear, Module


@dataclass(frozen=True)
class FusionConfig:
    total_blocks: int = 4
    stride: int = 2
    detach_count: int = 0
    hidden_dim: int = 16
    num_heads: int = 2
    patch_size: int = 8
    skip_scale: float = 1.0
    image_size: int = 32
    mlp_ratio: int = 2
    dropout: float = 0.0
    class_token: bool = True
    adapter_hidden: int = 32
    adapter_dim: int = 16

    def __post_init__(self):
        for name in ("total_blocks", "stride", "hidden_dim", "num_heads", "patch_size",
                     "adapter_hidden", "adapter_dim"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.detach_count < 0:
            raise ValueError("detach_count must be non-negative")
        if self.skip_scale < 0:
            raise ValueError("skip_scale must be non-negative")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be a multiple of patch_size")
        if self.detach_count > len(self.tapped_layers):
            raise ValueError(f"detach_count {self.detach_count} exceeds the "
                             f"{len(self.tapped_layers)} tapped layers")

    @property
    def tapped_layers(self) -> list[int]:
        return list(range(self.stride, self.total_blocks + 1, self.stride))

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    def replace(self, **changes) -> "FusionConfig":
        return FusionConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)


def select_skip_layers(cfg: FusionConfig, require_taps: bool = True) -> tuple[list[int], list[int]]:
    """Split the stride-S tap set into (detached, live); detached = D shallowest."""
    taps = cfg.tapped_layers
    if not taps and require_taps:
        raise ValueError(f"stride {cfg.stride} exceeds total_blocks {cfg.total_blocks}: no taps")
    d = cfg.detach_count
    return taps[:d], taps[d:]


@dataclass
class EncoderTaps:
    h_main: Tensor
    taps: list = field(default_factory=list)  # [(layer index, tensor)], shallow -> deep

    def __post_init__(self):
        layers = [l for l, _ in self.taps]
        if layers != sorted(layers):
            raise ValueError("taps must be ordered shallow to deep")
        for l, t in self.taps:
            if t.shape != self.h_main.shape:
                raise ValueError(f"tap {l} shape {t.shape} != h_main {self.h_main.shape}")


class PatchEncoder(Module):
    def __init__(self, cfg: FusionConfig, rng: Rng, identity: bool = False):
        super().__init__()
        self.cfg = cfg
        p, d = cfg.patch_size, cfg.hidden_dim
        self.embed = Linear(p * p, d, rng)
        n_tok = cfg.grid**2 + (1 if cfg.class_token else 0)
        self.add_param("pos", rng.normal((n_tok, d), 0.1))
        if cfg.class_token:
            self.add_param("cls", rng.normal((1, 1, d), 0.1))
        self.blocks = [Block(d, cfg.num_heads, rng, cfg.mlp_ratio, cfg.dropout, identity)
                       for _ in range(cfg.total_blocks)]

    def patchify(self, images: np.ndarray) -> np.ndarray:
        b, h, w = images.shape
        p = self.cfg.patch_size
        if h != self.cfg.image_size or w != self.cfg.image_size:
            raise ValueError(f"expected {self.cfg.image_size}px images, got {h}x{w}")
        x = images.reshape(b, h // p, p, w // p, p).transpose(0, 1, 3, 2, 4)
        return x.reshape(b, (h // p) * (w // p), p * p)

    def tokens(self, images: np.ndarray) -> Tensor:
        """Patch embeddings (+ class token) with positions added: (B, T, hidden)."""
        x = self.embed(Tensor(self.patchify(np.asarray(images, dtype=np.float64))))
        if self.cfg.class_token:
            b = x.shape[0]
            cls = self.cls * Tensor(np.ones((b, 1, 1)))
            x = ag.concat([cls, x], axis=1)
        return x + self.pos

    def encode_with_taps(self, tokens: Tensor, rng: Optional[Rng] = None,
                         training: bool = True, record_attention: bool = False) -> EncoderTaps:
        if tokens.shape[-1] != self.cfg.hidden_dim:
            raise ValueError(f"token dim {tokens.shape[-1]} != hidden_dim {self.cfg.hidden_dim}")
        tapped = set(self.cfg.tapped_layers)
        taps = []
        x = tokens
        for i, block in enumerate(self.blocks, start=1):
            x = block(x, rng, training, record=record_attention)
            if i in tapped:
                taps.append((i, x))
        return EncoderTaps(x, taps)


def fuse(taps: EncoderTaps, cfg: FusionConfig, adapter, detach: Optional[Sequence[int]] = None) -> Tensor:
    """Fuse main and tapped features; ``detach`` overrides the config's detached set."""
    if detach is None:
        detach, _ = select_skip_layers(cfg, require_taps=False)
    detach = set(detach)
    parts = [taps.h_main]
    for layer, h in reversed(taps.taps):
        h = h * cfg.skip_scale if cfg.skip_scale != 1.0 else h
        parts.append(ag.stop_gradient(h) if layer in detach else h)
    x = ag.concat_channels(parts)
    n_in = getattr(adapter, "n_in", None)
    if n_in is not None and n_in != x.shape[-1]:
        raise ValueError(f"adapter expects {n_in} channels, fused input has {x.shape[-1]}")
    return adapter(x)


class FusionAdapter(Module):
    """Two-layer GELU MLP over the concatenated features."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: Rng):
        super().__init__()
        self.n_in = n_in
        self.mlp = MLP(n_in, n_hidden, n_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.mlp(x)


class FusionNet(Module):
    """Encoder + fusion adapter + per-patch classification head."""

    def __init__(self, cfg: FusionConfig, n_classes: int, rng: Rng, identity: bool = False):
        super().__init__()
        self.cfg = cfg
        self.encoder = PatchEncoder(cfg, rng, identity)
        n_in = cfg.hidden_dim * (1 + len(cfg.tapped_layers))
        self.adapter = FusionAdapter(n_in, cfg.adapter_hidden, cfg.adapter_dim, rng)
        self.head_norm = LayerNorm(cfg.adapter_dim)
        self.head = Linear(cfg.adapter_dim, n_classes, rng)

    def fused(self, images: np.ndarray, rng: Optional[Rng] = None, detach_all: bool = False,
              training: bool = True, record_attention: bool = False) -> Tensor:
        taps = self.encoder.encode_with_taps(self.encoder.tokens(images), rng, training,
                                             record_attention)
        detach = self.cfg.tapped_layers if detach_all else None
        return fuse(taps, self.cfg, self.adapter, detach=detach)

    def logits(self, images: np.ndarray, rng: Optional[Rng] = None, detach_all: bool = False,
               training: bool = True) -> Tensor:
        z = self.fused(images, rng, detach_all, training)
        if self.cfg.class_token:
            z = z[:, 1:, :]
        return self.head(self.head_norm(z))

    def loss(self, batch: tuple, rng: Optional[Rng] = None, detach_all: bool = False,
             training: bool = True) -> Tensor:
        images, labels = batch
        logits = self.logits(images, rng, detach_all, training)
        return ag.cross_entropy(logits, np.asarray(labels).reshape(labels.shape[0], -1))

    def param_groups(self) -> dict[str, list[str]]:
        names = list(self.parameters())
        groups = {
            "encoder": [n for n in names if n.startswith("encoder.")],
            "adapter": [n for n in names if n.startswith("adapter.")],
            "head": [n for n in names if n.startswith("head")],
        }
        for i in range(1, self.cfg.total_blocks + 1):
            groups[f"block{i}"] = [n for n in names if n.startswith(f"encoder.blocks.{i - 1}.")]
        return groups

    def default_group(self) -> str:
        taps = self.cfg.tapped_layers
        return f"block{taps[0]}" if taps else "block1"


@dataclass
class AttentionMap:
    grid: np.ndarray
    block: int
    image: Optional[np.ndarray] = None  # nearest-neighbour upsampled to input resolution

    def to_pgm(self, path: str | Path) -> Path:
        from .runlab.emit import write_pgm
        return write_pgm(path, self.image if self.image is not None else self.grid)


def minmax_normalize(scores: np.ndarray) -> np.ndarray:
    """Map to [0, 1]; a constant input maps to all zeros."""
    lo, hi = float(scores.min()), float(scores.max())
    if hi - lo <= 0.0:
        return np.zeros_like(scores, dtype=np.float64)
    return (scores - lo) / (hi - lo)


def cls_attention_grid(probs: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Head-averaged class-token attention over patches, min-max normalised.

    ``probs`` is (heads, T, T) with the class token at index 0.
    """
    row = probs[:, 0, 1:].mean(axis=0)
    if row.size != grid[0] * grid[1]:
        raise ValueError(f"{row.size} patch scores do not fill a {grid} grid")
    return minmax_normalize(row).reshape(grid)


def attention_map_export(model: FusionNet, block_index: int, image: np.ndarray,
                         path: Optional[str | Path] = None) -> AttentionMap:
    cfg = model.cfg
    if not cfg.class_token:
        raise ValueError("attention export needs a model with a class token")
    if not 1 <= block_index <= cfg.total_blocks:
        raise ValueError(f"block index {block_index} outside 1..{cfg.total_blocks}")
    with ag.no_grad():
        model.fused(np.asarray(image)[None], training=False, record_attention=True)
    probs = model.encoder.blocks[block_index - 1].attn.last_probs[0]
    grid = cls_attention_grid(probs, (cfg.grid, cfg.grid))
    up = np.kron(grid, np.ones((cfg.patch_size, cfg.patch_size)))
    amap = AttentionMap(grid, block_index, up)
    if path is not None:
        amap.to_pgm(path)
    return amap


class NumericalFailure(RuntimeError):
    """Training produced a non-finite loss; ``record`` carries the diagnostic."""

    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


class DetachedFusionClassifier(BaseEstimator, ClassifierMixin):
    """Dense per-patch glyph classifier with detached skip-link fusion.

    Training follows an adapter-only warm-up for the first ``adapter_warmup``
    fraction of steps, then updates every parameter. When ``probe_group`` is
    set each step runs the pathwise decomposition on that parameter group and
    keeps the snapshots in ``snapshots_``; the update uses the full gradient
    from the same pass.
    """

    def __init__(self, total_blocks=4, stride=1, detach_count=0, hidden_dim=16, num_heads=2,
                 patch_size=8, skip_scale=1.0, dropout=0.0, adapter_hidden=32, adapter_dim=16,
                 n_classes=None, lr=1e-3, weight_decay=0.05, warmup_ratio=0.03, cosine=True,
                 adapter_warmup=0.1, steps=300, batch_size=16, eval_every=0, probe_group=None,
                 random_state=0, callback=None):
        self.total_blocks = total_blocks
        self.stride = stride
        self.detach_count = detach_count
        self.hidden_dim = hidden_dim
        self.num_heads = num_heads
        self.patch_size = patch_size
        self.skip_scale = skip_scale
        self.dropout = dropout
        self.adapter_hidden = adapter_hidden
        self.adapter_dim = adapter_dim
        self.n_classes = n_classes
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_ratio = warmup_ratio
        self.cosine = cosine
        self.adapter_warmup = adapter_warmup
        self.steps = steps
        self.batch_size = batch_size
        self.eval_every = eval_every
        self.probe_group = probe_group
        self.random_state = random_state
        self.callback = callback

    def fusion_config(self, image_size: int = 32) -> FusionConfig:
        return FusionConfig(
            total_blocks=self.total_blocks, stride=self.stride, detach_count=self.detach_count,
            hidden_dim=self.hidden_dim, num_heads=self.num_heads, patch_size=self.patch_size,
            skip_scale=self.skip_scale, image_size=image_size, dropout=self.dropout,
            adapter_hidden=self.adapter_hidden, adapter_dim=self.adapter_dim)

    def _eval_loss(self, X, y) -> float:
        with ag.no_grad():
            total = 0.0
            for i in range(0, len(X), 64):
                xb, yb = X[i:i + 64], y[i:i + 64]
                total += float(self.model_.loss((xb, yb), training=False).data) * len(xb)
        return total / len(X)

    def fit(self, X, y):
        from .nn import AdamW, cosine_lr
        from .pathwise import decompose
        from .validation import check_images, check_label_maps

        X = check_images(X)
        cfg = self.fusion_config(X.shape[1])
        y = check_label_maps(y, len(X), cfg.grid)
        self.n_classes_ = int(self.n_classes or y.max() + 1)
        self.classes_ = np.arange(self.n_classes_)
        self.config_ = cfg
        init_rng, data_rng, drop_rng = Rng(self.random_state).split(3)
        self.model_ = FusionNet(cfg, self.n_classes_, init_rng)
        params = self.model_.parameters()
        opt = AdamW(params, lr=self.lr, weight_decay=self.weight_decay)
        adapter_only = {n for n in params if n.startswith("adapter.")}
        warm_steps = int(round(self.adapter_warmup * self.steps))
        group = self.probe_group
        if group == "default":
            group = self.model_.default_group()
        self.history_ = []
        self.snapshots_ = []
        order = np.zeros(0, dtype=np.int64)
        for step in range(self.steps):
            if order.size < self.batch_size:
                order = np.concatenate([order, data_rng.permutation(len(X))])
            idx, order = order[:self.batch_size], order[self.batch_size:]
            batch = (X[idx], y[idx])
            rec = {"step": step}
            if self.eval_every and step % self.eval_every == 0:
                rec["train_loss"] = self._eval_loss(X, y)
            try:
                if group is not None:
                    snap, grads = decompose(self.model_, batch, group, drop_rng, step=step,
                                            return_full=True)
                    self.snapshots_.append(snap)
                    loss = snap.loss
                else:
                    with ag.GradTape() as tape:
                        out = self.model_.loss(batch, drop_rng)
                    uid_grads = tape.backward(out)
                    grads = {n: uid_grads[t.uid] for n, t in params.items() if t.uid in uid_grads}
                    loss = float(out.data)
            except ag.NonFiniteError as exc:
                raise NumericalFailure(f"step {step}: {exc}", {"step": step, "error": str(exc)}) from exc
            if not np.isfinite(loss):
                raise NumericalFailure(f"non-finite loss at step {step}",
                                       {"step": step, "error": "non-finite loss"})
            stage = "adapter" if step < warm_steps else "full"
            lr = cosine_lr(step, self.steps, self.lr, self.warmup_ratio, self.cosine)
            opt.step(grads, lr=lr, only=adapter_only if stage == "adapter" else None)
            rec.update(loss=loss, lr=lr, stage=stage)
            self.history_.append(rec)
            if self.callback is not None:
                self.callback(rec)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        from .validation import check_images
        X = check_images(X, self.config_.image_size)
        with ag.no_grad():
            logits = self.model_.logits(X, training=False).data
        z = logits - logits.max(axis=-1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=-1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        p = self.predict_proba(X)
        g = self.config_.grid
        return p.argmax(axis=-1).reshape(len(p), g, g)

    def score(self, X, y, sample_weight=None) -> float:
        """Per-patch accuracy."""
        pred = self.predict(X)
        return float(np.mean(pred == np.asarray(y)))
