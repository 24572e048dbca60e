"""Deterministic synthetic glyph imagery.

Characters come from an embedded 5x7 bitmap font (A-Z, 0-9). Everything is a
pure function of its seed, so two processes with the same spec emit the same
bytes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

GLYPH_W, GLYPH_H = 5, 7

# fmt: off
FONT_5X7 = {
    "A": ["01110", "10001", "10001", "11111", "10001", "10001", "10001"],
    "B": ["11110", "10001", "10001", "11110", "10001", "10001", "11110"],
    "C": ["01110", "10001", "10000", "10000", "10000", "10001", "01110"],
    "D": ["11100", "10010", "10001", "10001", "10001", "10010", "11100"],
    "E": ["11111", "10000", "10000", "11110", "10000", "10000", "11111"],
    "F": ["11111", "10000", "10000", "11110", "10000", "10000", "10000"],
    "G": ["01110", "10001", "10000", "10111", "10001", "10001", "01111"],
    "H": ["10001", "10001", "10001", "11111", "10001", "10001", "10001"],
    "I": ["01110", "00100", "00100", "00100", "00100", "00100", "01110"],
    "J": ["00111", "00010", "00010", "00010", "00010", "10010", "01100"],
    "K": ["10001", "10010", "10100", "11000", "10100", "10010", "10001"],
    "L": ["10000", "10000", "10000", "10000", "10000", "10000", "11111"],
    "M": ["10001", "11011", "10101", "10101", "10001", "10001", "10001"],
    "N": ["10001", "10001", "11001", "10101", "10011", "10001", "10001"],
    "O": ["01110", "10001", "10001", "10001", "10001", "10001", "01110"],
    "P": ["11110", "10001", "10001", "11110", "10000", "10000", "10000"],
    "Q": ["01110", "10001", "10001", "10001", "10101", "10010", "01101"],
    "R": ["11110", "10001", "10001", "11110", "10100", "10010", "10001"],
    "S": ["01111", "10000", "10000", "01110", "00001", "00001", "11110"],
    "T": ["11111", "00100", "00100", "00100", "00100", "00100", "00100"],
    "U": ["10001", "10001", "10001", "10001", "10001", "10001", "01110"],
    "V": ["10001", "10001", "10001", "10001", "10001", "01010", "00100"],
    "W": ["10001", "10001", "10001", "10101", "10101", "10101", "01010"],
    "X": ["10001", "10001", "01010", "00100", "01010", "10001", "10001"],
    "Y": ["10001", "10001", "01010", "00100", "00100", "00100", "00100"],
    "Z": ["11111", "00001", "00010", "00100", "01000", "10000", "11111"],
    "0": ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    "1": ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    "2": ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    "3": ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    "4": ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    "5": ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    "6": ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    "7": ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    "8": ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    "9": ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
}
# fmt: on

ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"
UNK_ID = len(ALPHABET)
VOCAB_SIZE = len(ALPHABET) + 1


def glyph_bitmap(ch: str) -> np.ndarray:
    """7x5 float array of the character's bitmap."""
    try:
        rows = FONT_5X7[ch]
    except KeyError:
        raise ValueError(f"character {ch!r} not in alphabet") from None
    return np.array([[float(c) for c in row] for row in rows])


def tokenize(text: str) -> np.ndarray:
    return np.array([ALPHABET.index(c) for c in text], dtype=np.int64)


def detokenize(ids) -> str:
    return "".join("?" if i == UNK_ID else ALPHABET[int(i)] for i in ids)


@dataclass(frozen=True)
class GlyphImage:
    pixels: np.ndarray
    text: str
    seed: int
    boxes: tuple = ()  # (row, col) top-left of each placed glyph


@dataclass(frozen=True)
class DatasetSpec:
    """Generator parameters. ``cell`` is the side of the slot a glyph sits in."""

    seed: int = 0
    count: int = 256
    alphabet: str = ALPHABET
    image_size: int = 32
    noise: float = 0.05
    cell: int = 8
    max_glyphs: int = 6
    target_rect: tuple = (0, 16, 32, 16)  # row, col, height, width
    target_glyphs: int = 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ReconSample:
    """One probe example: context canvas, target crop, prompt tokens, ablation flags."""

    context: np.ndarray
    target: np.ndarray
    text_ids: np.ndarray
    target_rect: tuple
    mask_image: bool = False
    drop_text: bool = False

    def __post_init__(self):
        r, c, h, w = self.target_rect
        if self.mask_image:
            self.context = self.context.copy()
            self.context[r:r + h, c:c + w] = 0.0
        if self.drop_text:
            self.text_ids = np.full_like(self.text_ids, UNK_ID)

    def with_flags(self, mask_image: bool, drop_text: bool) -> "ReconSample":
        return ReconSample(self.context, self.target, self.text_ids, self.target_rect,
                           mask_image=mask_image, drop_text=drop_text)

    @property
    def visible_target(self) -> np.ndarray:
        """Target crop as the encoder sees it (black when masked)."""
        return np.zeros_like(self.target) if self.mask_image else self.target


def render_glyphs(text: str, size: int = 32, seed: int = 0, noise: float = 0.0,
                  positions: Optional[list] = None, jitter: int = 1) -> GlyphImage:
    """Render ``text`` onto a ``size`` x ``size`` canvas in [0, 1].

    Without explicit ``positions`` glyphs are laid out left to right in 8-px
    slots with seeded jitter; ``positions`` pins each glyph's top-left corner.
    """
    rng = np.random.default_rng(seed)
    canvas = np.zeros((size, size))
    boxes = []
    if positions is None:
        slot = GLYPH_W + 3
        per_row = size // slot
        if len(text) > per_row * (size // slot):
            raise ValueError(f"string of length {len(text)} does not fit a {size}px canvas")
        positions = []
        for i in range(len(text)):
            r0, c0 = (i // per_row) * slot, (i % per_row) * slot
            dr = int(rng.integers(0, slot - GLYPH_H + 1))
            dc = int(rng.integers(0, min(jitter, slot - GLYPH_W) + 1))
            positions.append((r0 + dr, c0 + dc))
    for ch, (r, c) in zip(text, positions):
        if r < 0 or c < 0 or r + GLYPH_H > size or c + GLYPH_W > size:
            raise ValueError(f"glyph {ch!r} at {(r, c)} falls outside the canvas")
        canvas[r:r + GLYPH_H, c:c + GLYPH_W] = np.maximum(
            canvas[r:r + GLYPH_H, c:c + GLYPH_W], glyph_bitmap(ch))
        boxes.append((r, c))
    if noise > 0:
        canvas = np.clip(canvas + noise * rng.standard_normal(canvas.shape), 0.0, 1.0)
    return GlyphImage(canvas, text, seed, tuple(boxes))


def _cell_layout(rng: np.random.Generator, spec: DatasetSpec, n_glyphs: int,
                 cells: list) -> tuple[str, list, list]:
    chosen = rng.choice(len(cells), size=n_glyphs, replace=False)
    chars, positions, used = [], [], []
    for k in sorted(chosen):
        cr, cc = cells[k]
        ch = spec.alphabet[int(rng.integers(0, len(spec.alphabet)))]
        dr = int(rng.integers(0, spec.cell - GLYPH_H + 1))
        dc = int(rng.integers(0, spec.cell - GLYPH_W + 1))
        chars.append(ch)
        positions.append((cr * spec.cell + dr, cc * spec.cell + dc))
        used.append((cr, cc))
    return "".join(chars), positions, used


def make_pair(image: GlyphImage, target_rect: tuple, text: Optional[str] = None) -> ReconSample:
    """Split a rendered image into (context, target crop, prompt tokens)."""
    r, c, h, w = target_rect
    H, W = image.pixels.shape
    if r < 0 or c < 0 or h <= 0 or w <= 0 or r + h > H or c + w > W:
        raise ValueError(f"target rectangle {target_rect} outside a {H}x{W} image")
    text = image.text if text is None else text
    return ReconSample(image.pixels.copy(), image.pixels[r:r + h, c:c + w].copy(),
                       tokenize(text), tuple(target_rect))


def probe_samples(spec: DatasetSpec) -> list[ReconSample]:
    """Probe dataset: glyphs scattered over the canvas, a fixed number inside the target.

    The prompt lists the target glyphs in reading order, so text carries
    information about the target content.
    """
    rng = np.random.default_rng([spec.seed, 1])
    r0, c0, h, w = spec.target_rect
    n_cells = spec.image_size // spec.cell
    inside, outside = [], []
    for cr in range(n_cells):
        for cc in range(n_cells):
            rr, col = cr * spec.cell, cc * spec.cell
            if r0 <= rr < r0 + h and c0 <= col < c0 + w:
                inside.append((cr, cc))
            else:
                outside.append((cr, cc))
    out = []
    for i in range(spec.count):
        t_text, t_pos, _ = _cell_layout(rng, spec, min(spec.target_glyphs, len(inside)), inside)
        n_out = int(rng.integers(1, max(2, spec.max_glyphs - spec.target_glyphs + 1)))
        o_text, o_pos, _ = _cell_layout(rng, spec, min(n_out, len(outside)), outside)
        img = render_glyphs(o_text + t_text, spec.image_size, seed=spec.seed * 100003 + i,
                            noise=spec.noise, positions=o_pos + t_pos)
        out.append(make_pair(img, spec.target_rect, text=t_text))
    return out


def dense_labels(image: GlyphImage, patch: int) -> np.ndarray:
    """Per-patch class map: 0 = background, 1 + alphabet index for a glyph."""
    n = image.pixels.shape[0] // patch
    labels = np.zeros((n, n), dtype=np.int64)
    for ch, (r, c) in zip(image.text, image.boxes):
        pr, pc = r // patch, c // patch
        if (r + GLYPH_H - 1) // patch == pr and (c + GLYPH_W - 1) // patch == pc:
            labels[pr, pc] = 1 + ALPHABET.index(ch)
    return labels


def iter_dense(spec: DatasetSpec) -> Iterator[tuple[GlyphImage, np.ndarray]]:
    """Endless deterministic stream of (image, per-patch labels) pairs."""
    rng = np.random.default_rng([spec.seed, 2])
    n_cells = spec.image_size // spec.cell
    cells = [(r, c) for r in range(n_cells) for c in range(n_cells)]
    i = 0
    while True:
        n = int(rng.integers(1, spec.max_glyphs + 1))
        text, pos, _ = _cell_layout(rng, spec, n, cells)
        img = render_glyphs(text, spec.image_size, seed=spec.seed * 100003 + i,
                            noise=spec.noise, positions=pos)
        yield img, dense_labels(img, spec.cell)
        i += 1


def downstream_task_batch(spec: DatasetSpec, batch_size: int, offset: int = 0
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Images (B, H, W) and dense per-patch targets (B, n, n), patch = ``spec.cell``."""
    stream = iter_dense(spec)
    for _ in range(offset):
        next(stream)
    imgs, labels = [], []
    for _ in range(batch_size):
        img, lab = next(stream)
        imgs.append(img.pixels)
        labels.append(lab)
    return np.stack(imgs), np.stack(labels)


def dump_dataset(spec: DatasetSpec, out_dir: str | Path) -> Path:
    """Write the probe dataset as PGM files plus a JSONL index."""
    from .runlab.emit import write_pgm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = out / "index.jsonl"
    with index.open("w") as fh:
        for i, s in enumerate(probe_samples(spec)):
            name = f"sample_{i:05d}.pgm"
            write_pgm(out / name, s.context)
            fh.write(json.dumps({"file": name, "string": detokenize(s.text_ids),
                                 "target_rect": list(s.target_rect)}) + "\n")
    return index
