"""Reconstruction probe: a shallow decoder recovering target pixels from frozen visual tokens.

The visual side (patch encoder, fusion adapter, 2x2 merge, projection
adapter) is frozen and evaluated once per dataset, so training touches only
the decoder and its pixel head. Sequences are laid out as
``[context image, text, target image]``; image tokens carry 2D rotary phases
derived from their merged-grid coordinates in the full image, so a token's
phase never depends on where it lands in the sequence.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autograd as ag
from .autograd import Rng, Tensor
from .fusion import FusionAdapter, FusionConfig, PatchEncoder, fuse
from .glyphs import VOCAB_SIZE, ReconSample
from .nn import AdamW, Block, LayerNorm, Linear, Module
from .pathwise import moving_average

DECODER_NOTE = ("decoder freshly initialised (no pretrained language model available); "
                "depth = ceil(lm_depth / 4)")

SEGMENTS = ("context_img", "text", "target_img")


class FreezeViolation(RuntimeError):
    """A parameter that the probe config declares frozen is trainable."""


@dataclass(frozen=True)
class ProbeConfig:
    lm_depth: int = 8
    decoder_depth: Optional[int] = None
    tau: float = 0.75
    merge: int = 2
    steps: int = 600
    lr: float = 3e-3
    weight_decay: float = 0.0
    batch_size: int = 16
    freeze_encoder: bool = True
    freeze_adapter: bool = True
    num_heads: int = 4
    final_window: int = 20
    image_size: int = 32
    patch_size: int = 4
    encoder_blocks: int = 4
    encoder_stride: int = 2
    encoder_detach: int = 0
    encoder_dim: int = 16
    rope_base: float = 100.0

    def __post_init__(self):
        if self.merge != 2:
            raise ValueError("merge factor is fixed at 2x2")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.depth < 1:
            raise ValueError("decoder depth must be >= 1")
        if self.steps < 0 or self.batch_size < 1 or self.final_window < 1:
            raise ValueError("steps, batch_size and final_window must be positive")

    @property
    def depth(self) -> int:
        if self.decoder_depth is not None:
            return int(self.decoder_depth)
        return math.ceil(self.lm_depth / 4)

    @property
    def model_dim(self) -> int:
        return self.encoder_dim * self.merge**2

    @property
    def token_pixels(self) -> int:
        return (self.patch_size * self.merge) ** 2

    def encoder_config(self) -> FusionConfig:
        return FusionConfig(total_blocks=self.encoder_blocks, stride=self.encoder_stride,
                            detach_count=self.encoder_detach, hidden_dim=self.encoder_dim,
                            patch_size=self.patch_size, image_size=self.image_size,
                            class_token=False, adapter_hidden=2 * self.encoder_dim,
                            adapter_dim=self.encoder_dim)

    def replace(self, **changes) -> "ProbeConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depth"] = self.depth
        return d


def _grid_shape(grid) -> tuple[int, int]:
    if isinstance(grid, (int, np.integer)):
        return int(grid), int(grid)
    rows, cols = grid
    return int(rows), int(cols)


def merge_patches(patches, grid) -> Tensor:
    """Concatenate each 2x2 block of patch embeddings: (B, r*c, d) -> (B, r*c/4, 4d).

    Within a block the order is top-left, top-right, bottom-left, bottom-right;
    merged tokens come out in row-major order of the merged grid.
    """
    x = ag.as_tensor(patches)
    rows, cols = _grid_shape(grid)
    if rows % 2 or cols % 2:
        raise ValueError(f"grid {rows}x{cols} has an odd side; 2x2 merging needs even dims")
    b, n, d = x.shape
    if n != rows * cols:
        raise ValueError(f"{n} patches do not fill a {rows}x{cols} grid")
    x = x.reshape(b, rows // 2, 2, cols // 2, 2, d).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (rows // 2) * (cols // 2), 4 * d)


def grid_coords(rows: int, cols: int, row0: int = 0, col0: int = 0) -> np.ndarray:
    r, c = np.meshgrid(np.arange(rows) + row0, np.arange(cols) + col0, indexing="ij")
    return np.stack([r.reshape(-1), c.reshape(-1)], axis=1).astype(np.float64)


def rotary_tables(coords: np.ndarray, head_dim: int, base: float = 100.0
                  ) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables (T, head_dim) for 2D rotary embedding.

    The first half of each head rotates with the row coordinate, the second
    half with the column. Rows holding NaN (text tokens) get zero phase.
    """
    if head_dim % 4:
        raise ValueError("2D rotary needs head_dim divisible by 4")
    coords = np.asarray(coords, dtype=np.float64)
    quarter = head_dim // 4
    freqs = base ** (-np.arange(quarter) / quarter)
    pos = np.nan_to_num(coords, nan=0.0)
    angles = np.concatenate([pos[:, :1] * freqs, pos[:, 1:2] * freqs], axis=1)
    angles = np.repeat(angles, 2, axis=1)
    return np.cos(angles), np.sin(angles)


@dataclass
class SequenceLayout:
    """Decoder input before text embedding: visual tokens, prompt ids, coordinates.

    ``coords`` has one row per sequence position; text rows are NaN.
    """

    context: np.ndarray
    text_ids: np.ndarray
    target: np.ndarray
    coords: np.ndarray
    segments: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return int(self.coords.shape[0])

    @property
    def boundaries(self) -> tuple[int, int]:
        return self.segments["text"][0], self.segments["target_img"][0]

    def batch(self, idx) -> "SequenceLayout":
        return SequenceLayout(self.context[idx], self.text_ids[idx], self.target[idx],
                              self.coords, self.segments)


def build_sequence(context, text_ids, target, context_coords, target_coords) -> SequenceLayout:
    """Order segments as [context image, text, target image].

    Coordinates are the tokens' positions in the full-image merged grid and
    travel with the tokens, so phases are fixed before any reordering.
    """
    context = np.asarray(context, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    text_ids = np.asarray(text_ids, dtype=np.int64)
    if context.ndim == 2:
        context, target, text_ids = context[None], target[None], text_ids.reshape(1, -1)
    if target.shape[1] == 0:
        raise ValueError("target segment is empty")
    nc, nl, nt = context.shape[1], text_ids.shape[1], target.shape[1]
    if len(context_coords) != nc or len(target_coords) != nt:
        raise ValueError("coordinates must label every image token")
    coords = np.concatenate([np.asarray(context_coords, dtype=np.float64).reshape(nc, 2),
                             np.full((nl, 2), np.nan),
                             np.asarray(target_coords, dtype=np.float64).reshape(nt, 2)])
    segments = {"context_img": (0, nc), "text": (nc, nc + nl), "target_img": (nc + nl, nc + nl + nt)}
    return SequenceLayout(context, text_ids, target, coords, segments)


class ProjectionAdapter(Module):
    """Fixed linear map on merged tokens: identity or a rank-r orthogonal projection."""

    def __init__(self, matrix: np.ndarray, name: str = "projection"):
        super().__init__()
        self.label = name
        self.add_param("weight", np.asarray(matrix, dtype=np.float64))
        self.n_in = self.weight.shape[0]

    @property
    def rank(self) -> int:
        return int(np.linalg.matrix_rank(self.weight.data))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.matmul(x, self.weight)


def identity_adapter(dim: int) -> ProjectionAdapter:
    return ProjectionAdapter(np.eye(dim), "identity")


def bottleneck_adapter(dim: int, width: int, seed: int = 0) -> ProjectionAdapter:
    """Q_w Q_w^T with Q_w the first ``width`` columns of a seeded orthogonal basis.

    The basis depends only on ``seed``, so narrower adapters are projections
    of wider ones.
    """
    if not 1 <= width <= dim:
        raise ValueError(f"width must lie in [1, {dim}]")
    g = np.random.default_rng([seed, 7]).standard_normal((dim, dim))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    qw = q[:, :width]
    return ProjectionAdapter(qw @ qw.T, f"rank{width}")


def make_adapter(spec, dim: int, seed: int = 0) -> ProjectionAdapter:
    if isinstance(spec, ProjectionAdapter):
        return spec
    if spec in (None, "identity"):
        return identity_adapter(dim)
    return bottleneck_adapter(dim, int(spec), seed)


class VisualFrontEnd(Module):
    """Frozen patch encoder + fusion adapter; maps images to per-patch features."""

    def __init__(self, cfg: ProbeConfig, rng: Rng):
        super().__init__()
        self.fcfg = cfg.encoder_config()
        self.encoder = PatchEncoder(self.fcfg, rng)
        n_in = self.fcfg.hidden_dim * (1 + len(self.fcfg.tapped_layers))
        self.adapter = FusionAdapter(n_in, self.fcfg.adapter_hidden, self.fcfg.adapter_dim, rng)

    def __call__(self, images: np.ndarray) -> Tensor:
        taps = self.encoder.encode_with_taps(self.encoder.tokens(images), training=False)
        return fuse(taps, self.fcfg, self.adapter)


class ProbeDecoder(Module):
    def __init__(self, cfg: ProbeConfig, max_text: int, rng: Rng):
        super().__init__()
        d = cfg.model_dim
        self.cfg = cfg
        self.add_param("text_embed", rng.normal((VOCAB_SIZE, d), 0.1))
        self.add_param("text_pos", rng.normal((max(1, max_text), d), 0.1))
        self.add_param("segment", rng.normal((len(SEGMENTS), d), 0.1))
        self.blocks = [Block(d, cfg.num_heads, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(d)
        self.pixel_head = Linear(d, cfg.token_pixels, rng)

    def __call__(self, layout: SequenceLayout) -> Tensor:
        """Predicted pixels for each target token: (B, n_target, token_pixels)."""
        cfg = self.cfg
        nl = layout.text_ids.shape[1]
        if nl > self.text_pos.shape[0]:
            raise ValueError(f"prompt of {nl} tokens exceeds the {self.text_pos.shape[0]} positions")
        parts = [Tensor(layout.context) + self.segment[0]]
        if nl:
            text = ag.embed_lookup(self.text_embed, layout.text_ids)
            parts.append(text + self.text_pos[:nl] + self.segment[1])
        parts.append(Tensor(layout.target) + self.segment[2])
        x = ag.concat(parts, axis=1)
        rotary = rotary_tables(layout.coords, cfg.model_dim // cfg.num_heads, cfg.rope_base)
        for block in self.blocks:
            x = block(x, training=False, rotary=rotary)
        s, e = layout.segments["target_img"]
        return self.pixel_head(self.norm(x[:, s:e, :]))


@dataclass
class EncodedSet:
    """Precomputed probe inputs for a list of samples (one ablation setting)."""

    layout: SequenceLayout
    pixels: np.ndarray  # (n, n_target, token_pixels)
    target_shape: tuple

    def __len__(self) -> int:
        return int(self.pixels.shape[0])


class ReconProbeModel(Module):
    def __init__(self, cfg: ProbeConfig, adapter, max_text: int, encoder_seed: int = 0,
                 decoder_seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.front = VisualFrontEnd(cfg, Rng(encoder_seed))
        self.projection = make_adapter(adapter, cfg.model_dim, encoder_seed)
        if self.projection.n_in != cfg.model_dim:
            raise ValueError(f"adapter width {self.projection.n_in} != model dim {cfg.model_dim}")
        if cfg.freeze_encoder:
            self.front.encoder.freeze()
        if cfg.freeze_adapter:
            self.front.adapter.freeze()
            self.projection.freeze()
        self.decoder = ProbeDecoder(cfg, max_text, Rng(decoder_seed))

    def frozen_parameters(self) -> dict[str, Tensor]:
        out = {}
        if self.cfg.freeze_encoder:
            out.update({f"front.encoder.{k}": t for k, t in self.front.encoder.named_parameters()})
        if self.cfg.freeze_adapter:
            out.update({f"front.adapter.{k}": t for k, t in self.front.adapter.named_parameters()})
            out.update({f"projection.{k}": t for k, t in self.projection.named_parameters()})
        return out

    def check_frozen(self) -> None:
        live = [n for n, t in self.frozen_parameters().items() if t.requires_grad]
        if live:
            raise FreezeViolation(f"parameters declared frozen are trainable: {live[:3]}")

    def trainable_parameters(self) -> dict[str, Tensor]:
        frozen = set(self.frozen_parameters())
        return {n: t for n, t in self.parameters().items() if n not in frozen and t.requires_grad}

    def visual_tokens(self, images: np.ndarray) -> np.ndarray:
        """Merged and projected tokens for full images: (B, merged_grid**2, model_dim)."""
        g = self.cfg.image_size // self.cfg.patch_size
        with ag.no_grad():
            feats = self.front(np.asarray(images, dtype=np.float64))
            return self.projection(merge_patches(feats, g)).data

    def encode(self, samples: Sequence[ReconSample], chunk: int = 64) -> EncodedSet:
        if not samples:
            raise ValueError("no samples to encode")
        cfg = self.cfg
        r, c, h, w = samples[0].target_rect
        m = cfg.patch_size * cfg.merge
        if r % m or c % m or h % m or w % m:
            raise ValueError(f"target rectangle {samples[0].target_rect} not aligned to {m}px tokens")
        mg = cfg.image_size // m
        full = grid_coords(mg, mg)
        tgt_rows, tgt_cols = h // m, w // m
        tgt_coords = grid_coords(tgt_rows, tgt_cols, r // m, c // m)
        tgt_idx = (tgt_coords[:, 0] * mg + tgt_coords[:, 1]).astype(np.int64)

        context = np.stack([s.context for s in samples])
        canvas = np.zeros_like(context)
        for i, s in enumerate(samples):
            canvas[i, r:r + h, c:c + w] = s.visible_target
        ctx_tok, tgt_tok = [], []
        for i in range(0, len(samples), chunk):
            ctx_tok.append(self.visual_tokens(context[i:i + chunk]))
            tgt_tok.append(self.visual_tokens(canvas[i:i + chunk])[:, tgt_idx])
        text = np.stack([s.text_ids for s in samples]).astype(np.int64)
        layout = build_sequence(np.concatenate(ctx_tok), text, np.concatenate(tgt_tok),
                                full, tgt_coords)
        targets = np.stack([s.target for s in samples])
        pix = targets.reshape(len(samples), tgt_rows, m, tgt_cols, m).transpose(0, 1, 3, 2, 4)
        return EncodedSet(layout, pix.reshape(len(samples), tgt_rows * tgt_cols, m * m), (h, w))

    def loss(self, layout: SequenceLayout, pixels: np.ndarray) -> Tensor:
        """Per-token MSE (mean over each token's pixels, then over tokens)."""
        return ag.mse_loss(self.decoder(layout), pixels)


def probe_step(model: ReconProbeModel, layout: SequenceLayout, pixels: np.ndarray,
               cfg: ProbeConfig, opt: AdamW) -> float:
    """One decoder update; returns the batch per-token MSE before the update."""
    model.check_frozen()
    with ag.GradTape() as tape:
        out = model.loss(layout, pixels)
    grads = tape.backward(out)
    params = model.trainable_parameters()
    opt.step({n: grads[t.uid] for n, t in params.items() if t.uid in grads}, lr=cfg.lr)
    return float(out.data)


def steps_to_threshold(losses, tau: float) -> Optional[int]:
    """0-indexed first step with loss < tau; None if it never gets there."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    below = np.flatnonzero(np.asarray(losses, dtype=np.float64) < tau)
    return int(below[0]) if below.size else None


def final_loss(losses, window: int = 20) -> float:
    x = np.asarray(losses, dtype=np.float64)
    if x.size == 0:
        return float("nan")
    return float(x[-window:].mean())


def calibrate_tau(losses, smooth: int = 10, at: float = 0.25) -> float:
    """Smoothed loss of a reference curve at fraction ``at`` of its run."""
    s = moving_average(losses, smooth)
    if s.size == 0:
        raise ValueError("empty reference curve")
    return float(s[min(s.size - 1, int(at * s.size))])


def train_probe(model: ReconProbeModel, data: EncodedSet, cfg: ProbeConfig, seed: int = 0,
                callback=None) -> list[float]:
    opt = AdamW(model.trainable_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = Rng(seed)
    order = np.zeros(0, dtype=np.int64)
    curve = []
    for step in range(cfg.steps):
        if order.size < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(data))])
        idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        loss = probe_step(model, data.layout.batch(idx), data.pixels[idx], cfg, opt)
        if not np.isfinite(loss):
            raise ag.NonFiniteError(f"probe loss non-finite at step {step}")
        curve.append(loss)
        if callback is not None:
            callback(step, loss)
    return curve


class ReconstructionProbe(BaseEstimator):
    """Probe estimator over a list of ``ReconSample``.

    ``adapter`` is ``"identity"`` or an integer bottleneck width. The encoder
    and adapter are seeded by ``encoder_seed`` (shared across probes being
    compared); ``random_state`` drives decoder init and batch order.
    """

    def __init__(self, adapter="identity", mask_image=False, drop_text=False, lm_depth=8,
                 decoder_depth=None, num_heads=4, steps=600, lr=3e-3, weight_decay=0.0,
                 batch_size=16, tau=0.75, final_window=20, encoder_seed=0, random_state=0):
        self.adapter = adapter
        self.mask_image = mask_image
        self.drop_text = drop_text
        self.lm_depth = lm_depth
        self.decoder_depth = decoder_depth
        self.num_heads = num_heads
        self.steps = steps
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.tau = tau
        self.final_window = final_window
        self.encoder_seed = encoder_seed
        self.random_state = random_state

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(lm_depth=self.lm_depth, decoder_depth=self.decoder_depth, tau=self.tau,
                           num_heads=self.num_heads, steps=self.steps, lr=self.lr,
                           weight_decay=self.weight_decay, batch_size=self.batch_size,
                           final_window=self.final_window)

    def _prepare(self, X) -> list[ReconSample]:
        samples = list(X)
        if not samples or not all(isinstance(s, ReconSample) for s in samples):
            raise ValueError("X must be a non-empty sequence of ReconSample")
        return [s.with_flags(self.mask_image, self.drop_text) for s in samples]

    def fit(self, X, y=None):
        samples = self._prepare(X)
        cfg = self.probe_config()
        self.config_ = cfg
        max_text = max(len(s.text_ids) for s in samples)
        self.model_ = ReconProbeModel(cfg, self.adapter, max_text, self.encoder_seed,
                                      self.random_state)
        self.frozen_checksum_ = parameter_checksum(self.model_.frozen_parameters())
        data = self.model_.encode(samples)
        self.loss_curve_ = train_probe(self.model_, data, cfg, self.random_state)
        self.final_loss_ = final_loss(self.loss_curve_, cfg.final_window)
        self.steps_to_threshold_ = steps_to_threshold(self.loss_curve_, cfg.tau)
        return self

    def predict(self, X) -> np.ndarray:
        """Reconstructed target crops, (n, h, w)."""
        check_is_fitted(self, "model_")
        samples = self._prepare(X)
        data = self.model_.encode(samples)
        with ag.no_grad():
            pred = self.model_.decoder(data.layout).data
        h, w = data.target_shape
        m = self.config_.patch_size * self.config_.merge
        pred = pred.reshape(len(samples), h // m, w // m, m, m).transpose(0, 1, 3, 2, 4)
        return pred.reshape(len(samples), h, w)

    def score(self, X, y=None) -> float:
        """Negative per-token MSE on ``X``."""
        samples = self._prepare(X)
        pred = self.predict(samples)
        return -float(np.mean((pred - np.stack([s.target for s in samples])) ** 2))


def parameter_checksum(params: dict[str, Tensor]) -> str:
    import hashlib

    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


ABLATION_SETTINGS = ((True, False), (True, True), (False, False), (False, True))


def modality_ablation(samples: Sequence[ReconSample], cfg: ProbeConfig = ProbeConfig(),
                      seed: int = 0, encoder_seed: int = 0, adapter="identity") -> dict:
    """Train one probe per (mask_image, drop_text) setting with identical seeds.

    Rows go from least to most visible input: masked without text, masked with
    text, full without text, full with text.
    """
    rows = []
    for mask, with_text in ABLATION_SETTINGS:
        est = _estimator(cfg, adapter, seed, encoder_seed, mask_image=mask, drop_text=not with_text)
        est.fit(samples)
        rows.append({"mask_image": mask, "text": with_text, "final_loss": est.final_loss_,
                     "steps_to_threshold": est.steps_to_threshold_,
                     "curve": list(est.loss_curve_)})
    return {"note": DECODER_NOTE, "seed": seed, "config": cfg.to_dict(), "rows": rows}


def adapter_sensitivity(samples: Sequence[ReconSample], adapters: Sequence,
                        cfg: ProbeConfig = ProbeConfig(), seed: int = 0, encoder_seed: int = 0,
                        calibrate: bool = False, smooth: int = 10) -> dict:
    """Probe each adapter variant; rank by final loss.

    With ``calibrate`` the threshold is derived from the first adapter's
    curve instead of ``cfg.tau``. Steps-to-threshold is read off the
    ``smooth``-step moving average of the training curve.
    """
    runs = []
    for spec in adapters:
        est = _estimator(cfg, spec, seed, encoder_seed)
        est.fit(samples)
        runs.append((spec, est))
    tau = calibrate_tau(runs[0][1].loss_curve_, smooth) if calibrate else cfg.tau
    rows = []
    for spec, est in runs:
        rows.append({"adapter": "identity" if spec in (None, "identity") else f"rank{int(spec)}",
                     "width": cfg.model_dim if spec in (None, "identity") else int(spec),
                     "final_loss": est.final_loss_,
                     "steps_to_threshold": steps_to_threshold(
                         moving_average(est.loss_curve_, smooth), tau),
                     "curve": list(est.loss_curve_)})
    order = np.argsort([r["final_loss"] for r in rows], kind="stable")
    for rank, i in enumerate(order, start=1):
        rows[i]["rank"] = rank
    return {"note": DECODER_NOTE, "seed": seed, "tau": tau, "config": cfg.to_dict(), "rows": rows}


def _estimator(cfg: ProbeConfig, adapter, seed: int, encoder_seed: int, **flags
               ) -> ReconstructionProbe:
    return ReconstructionProbe(adapter=adapter, lm_depth=cfg.lm_depth,
                               decoder_depth=cfg.decoder_depth, num_heads=cfg.num_heads,
                               steps=cfg.steps, lr=cfg.lr, weight_decay=cfg.weight_decay,
                               batch_size=cfg.batch_size, tau=cfg.tau,
                               final_window=cfg.final_window, encoder_seed=encoder_seed,
                               random_state=seed, **flags)
