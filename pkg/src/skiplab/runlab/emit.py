"""Artifact writers: JSONL, CSV, PGM and dependency-free SVG plots."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


class EmitError(OSError):
    """Writing an artifact failed; the message names the path."""


def _clean(value):
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_clean(v) for v in value.tolist()]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def dumps_record(record: dict) -> str:
    """One JSON line; floats keep 17 significant digits, keys keep insertion order."""
    return _encode(_clean(record))


def _encode(v) -> str:
    if isinstance(v, dict):
        return "{" + ", ".join(f"{json.dumps(k)}: {_encode(x)}" for k, x in v.items()) + "}"
    if isinstance(v, list):
        return "[" + ", ".join(_encode(x) for x in v) + "]"
    if isinstance(v, bool) or v is None:
        return json.dumps(v)
    if isinstance(v, float):
        if math.isnan(v) or math.isinf(v):
            return json.dumps(str(v))
        return "%.17g" % v
    return json.dumps(v)


def _open(path: Path, mode: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return path.open(mode)
    except OSError as exc:
        raise EmitError(f"cannot write {path}: {exc.strerror or exc}") from exc


def write_jsonl(path: str | Path, records: Iterable[dict], append: bool = False) -> Path:
    path = Path(path)
    with _open(path, "a" if append else "w") as fh:
        for rec in records:
            fh.write(dumps_record(rec) + "\n")
    return path


def read_jsonl(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def format_cell(value) -> str:
    if value is None:
        return "/"
    if isinstance(value, (float, np.floating)):
        return "%.17g" % float(value)
    return str(value)


def write_csv(path: str | Path, rows: Sequence[dict], columns: Optional[Sequence[str]] = None) -> Path:
    """CSV with a header row; missing values (None) are written as ``/``."""
    path = Path(path)
    if columns is None:
        if not rows:
            raise ValueError("cannot infer CSV columns from zero rows")
        columns = list(rows[0])
    with _open(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([format_cell(row.get(c)) for c in columns])
    return path


def write_pgm(path: str | Path, image: np.ndarray) -> Path:
    """Binary P5 PGM; values are clipped to [0, 1] and scaled to 0..255."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2D array, got shape {img.shape}")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    with _open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    pixels = np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)
    return pixels.astype(np.float64) / maxval


# --- SVG -----------------------------------------------------------------

@dataclass
class Series:
    label: str
    x: Sequence[float]
    y: Sequence[float]
    style: str = "line"  # line | scatter
    size: Optional[Sequence[float]] = None  # per-point radius for bubble plots
    color: Optional[str] = None


@dataclass
class Panel:
    title: str
    series: list
    xlabel: str = "step"
    ylabel: str = ""
    logy: bool = False
    hline: Optional[float] = None
    xticks: Optional[Sequence] = None  # [(value, label)]
    yticks: Optional[Sequence] = None


@dataclass
class PlotSpec:
    title: str = ""
    columns: int = 1
    panel_width: int = 360
    panel_height: int = 240
    extra: dict = field(default_factory=dict)


def _fmt(v: float) -> str:
    return "%.4g" % v


def _esc(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _range(values: np.ndarray) -> tuple[float, float]:
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        pad = abs(lo) * 0.1 or 1.0
        return lo - pad, hi + pad
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _panel_svg(panel: Panel, ox: float, oy: float, w: float, h: float, index: int) -> list[str]:
    ml, mr, mt, mb = 52, 12, 24, 36
    pw, ph = w - ml - mr, h - mt - mb
    xs = [np.asarray(s.x, dtype=np.float64) for s in panel.series]
    ys = [np.asarray(s.y, dtype=np.float64) for s in panel.series]
    if panel.logy:
        ys = [np.log10(np.maximum(y, 1e-300)) for y in ys]
    finite_x = np.concatenate([x[np.isfinite(x)] for x in xs]) if xs else np.zeros(0)
    finite_y = np.concatenate([y[np.isfinite(y)] for y in ys]) if ys else np.zeros(0)
    if panel.hline is not None:
        finite_y = np.append(finite_y, np.log10(panel.hline) if panel.logy else panel.hline)
    x0, x1 = _range(finite_x) if finite_x.size else (0.0, 1.0)
    y0, y1 = _range(finite_y) if finite_y.size else (0.0, 1.0)

    def px(v):
        return ox + ml + (v - x0) / (x1 - x0) * pw

    def py(v):
        return oy + mt + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<g class="panel" id="panel{index}">',
           f'<text x="{_fmt(ox + ml + pw / 2)}" y="{_fmt(oy + 15)}" text-anchor="middle" '
           f'font-size="12">{_esc(panel.title)}</text>',
           f'<line class="axis" x1="{_fmt(ox + ml)}" y1="{_fmt(oy + mt + ph)}" '
           f'x2="{_fmt(ox + ml + pw)}" y2="{_fmt(oy + mt + ph)}" stroke="black"/>',
           f'<line class="axis" x1="{_fmt(ox + ml)}" y1="{_fmt(oy + mt)}" '
           f'x2="{_fmt(ox + ml)}" y2="{_fmt(oy + mt + ph)}" stroke="black"/>',
           f'<text class="xlabel" x="{_fmt(ox + ml + pw / 2)}" y="{_fmt(oy + h - 4)}" '
           f'text-anchor="middle" font-size="10">{_esc(panel.xlabel)}</text>',
           f'<text class="ylabel" x="{_fmt(ox + 10)}" y="{_fmt(oy + mt + ph / 2)}" '
           f'text-anchor="middle" font-size="10" transform="rotate(-90 {_fmt(ox + 10)} '
           f'{_fmt(oy + mt + ph / 2)})">{_esc(panel.ylabel + (" (log10)" if panel.logy else ""))}</text>']
    xt = panel.xticks or [(v, _fmt(v)) for v in np.linspace(x0, x1, 4)]
    yt = panel.yticks or [(v, _fmt(v)) for v in np.linspace(y0, y1, 4)]
    for v, lab in xt:
        out.append(f'<text x="{_fmt(px(v))}" y="{_fmt(oy + mt + ph + 12)}" text-anchor="middle" '
                   f'font-size="8">{_esc(lab)}</text>')
    for v, lab in yt:
        out.append(f'<text x="{_fmt(ox + ml - 3)}" y="{_fmt(py(v) + 3)}" text-anchor="end" '
                   f'font-size="8">{_esc(lab)}</text>')
    if panel.hline is not None:
        hv = math.log10(panel.hline) if panel.logy else panel.hline
        out.append(f'<line x1="{_fmt(ox + ml)}" y1="{_fmt(py(hv))}" x2="{_fmt(ox + ml + pw)}" '
                   f'y2="{_fmt(py(hv))}" stroke="gray" stroke-dasharray="4 3"/>')
    for k, (s, x, y) in enumerate(zip(panel.series, xs, ys)):
        color = s.color or PALETTE[k % len(PALETTE)]
        ok = np.isfinite(x) & np.isfinite(y)
        if s.style == "line" and ok.sum() > 1:
            pts = " ".join(f"{_fmt(px(a))},{_fmt(py(b))}" for a, b in zip(x[ok], y[ok]))
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{pts}"/>')
        else:
            sizes = np.full(x.size, 2.0) if s.size is None else np.asarray(s.size, dtype=np.float64)
            for a, b, r in zip(x[ok], y[ok], sizes[ok]):
                out.append(f'<circle class="marker" cx="{_fmt(px(a))}" cy="{_fmt(py(b))}" '
                           f'r="{_fmt(r)}" fill="{color}" fill-opacity="0.6"/>')
        ly = oy + mt + 4 + 11 * k
        lx = ox + ml + pw - 90
        out.append(f'<g class="legend"><rect x="{_fmt(lx)}" y="{_fmt(ly)}" width="8" height="8" '
                   f'fill="{color}"/><text x="{_fmt(lx + 11)}" y="{_fmt(ly + 7)}" '
                   f'font-size="8">{_esc(s.label)}</text></g>')
    out.append("</g>")
    return out


def _data_comment(panels: Sequence[Panel]) -> str:
    payload = [{"title": p.title, "series": [
        {"label": s.label, "x": list(map(float, s.x)), "y": list(map(float, s.y)),
         **({"size": list(map(float, s.size))} if s.size is not None else {})}
        for s in p.series]} for p in panels]
    text = dumps_record({"panels": payload})
    return "<!-- data " + text.replace("--", "- -") + " -->"


def render_svg(panels: Sequence[Panel], spec: PlotSpec = PlotSpec()) -> str:
    """Standalone SVG 1.1 document; raw series are embedded in a comment at 17 digits."""
    if not panels:
        raise ValueError("no panels to plot")
    for p in panels:
        if not p.series or any(len(s.x) == 0 for s in p.series):
            raise ValueError(f"panel {p.title!r} has an empty series")
        for s in p.series:
            if len(s.x) != len(s.y):
                raise ValueError(f"series {s.label!r}: x and y lengths differ")
    cols = max(1, spec.columns)
    rows = math.ceil(len(panels) / cols)
    top = 24 if spec.title else 0
    W, H = cols * spec.panel_width, rows * spec.panel_height + top
    buf = io.StringIO()
    buf.write('<?xml version="1.0" encoding="UTF-8" standalone="no"?>\n')
    buf.write(f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" '
              f'viewBox="0 0 {W} {H}" font-family="sans-serif">\n')
    buf.write(_data_comment(panels) + "\n")
    buf.write(f'<rect width="{W}" height="{H}" fill="white"/>\n')
    if spec.title:
        buf.write(f'<text x="{W / 2}" y="16" text-anchor="middle" font-size="14">'
                  f'{_esc(spec.title)}</text>\n')
    for i, p in enumerate(panels):
        ox = (i % cols) * spec.panel_width
        oy = top + (i // cols) * spec.panel_height
        buf.write("\n".join(_panel_svg(p, ox, oy, spec.panel_width, spec.panel_height, i)) + "\n")
    buf.write("</svg>\n")
    return buf.getvalue()


def write_svg(path: str | Path, panels: Sequence[Panel], spec: PlotSpec = PlotSpec()) -> Path:
    doc = render_svg(panels, spec)
    path = Path(path)
    with _open(path, "w") as fh:
        fh.write(doc)
    return path


def svg_data(doc: str) -> dict:
    """Recover the embedded series from an SVG written by ``render_svg``."""
    start = doc.index("<!-- data ") + len("<!-- data ")
    end = doc.index(" -->", start)
    return json.loads(doc[start:end].replace("- -", "--"))
