"""Minimal SVG line charts for training curves and normalized-distance traces."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from xml.sax.saxutils import escape

from .checkpoint import write_atomic

MAX_PLOT_POINTS = 500

# (x column, y column, x label, y label, title) per supported input schema
SCHEMAS = {
    "metrics": ("env_steps", "mean_episodic_return", "environment steps",
                "mean episodic return", "Reward curve during training"),
    "trajectory": ("step", "norm_distance", "control step",
                   "normalized distance d/d0", "Normalized distance to goal"),
}


class PlotInputError(ValueError):
    pass


def read_csv_columns(path) -> tuple[list[str], list[dict[str, str]]]:
    text = Path(path).read_text(encoding="utf-8")
    body = "".join(line for line in io.StringIO(text) if not line.startswith("#"))
    reader = csv.DictReader(io.StringIO(body))
    rows = list(reader)
    return list(reader.fieldnames or []), rows


def detect_schema(columns: list[str]) -> str:
    for name, (x, y, *_) in SCHEMAS.items():
        if x in columns and y in columns:
            return name
    # name the columns of the closest schema
    best = max(SCHEMAS, key=lambda n: sum(c in columns for c in SCHEMAS[n][:2]))
    missing = [c for c in SCHEMAS[best][:2] if c not in columns]
    raise PlotInputError(f"input matches no plot schema; missing column(s): {', '.join(missing)}")


def downsample_indices(n: int, max_points: int = MAX_PLOT_POINTS) -> list[int]:
    if n <= max_points:
        return list(range(n))
    step = (n - 1) / (max_points - 1)
    return sorted({round(i * step) for i in range(max_points)})


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (count - 1) for i in range(count)]


def _fmt(v: float) -> str:
    if v != 0 and (abs(v) >= 1e5 or abs(v) < 1e-2):
        return f"{v:.2e}"
    return f"{v:.3g}"


def render_svg(xs: list[float], ys: list[float], xlabel: str, ylabel: str, title: str,
               width: int = 640, height: int = 400) -> str:
    left, right, top, bottom = 80, 20, 40, 60
    pw, ph = width - left - right, height - top - bottom
    pts = [(x, y) for x, y in zip(xs, ys) if math.isfinite(x) and math.isfinite(y)]
    x0, x1 = (min(p[0] for p in pts), max(p[0] for p in pts)) if pts else (0.0, 1.0)
    y0, y1 = (min(p[1] for p in pts), max(p[1] for p in pts)) if pts else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{sx(t):.2f}" y1="{top + ph}" x2="{sx(t):.2f}" '
                   f'y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{sx(t):.2f}" y="{top + ph + 18}" '
                   f'text-anchor="middle">{_fmt(t)}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{left - 5}" y1="{sy(t):.2f}" x2="{left}" y2="{sy(t):.2f}" '
                   f'stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{sy(t) + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 15}" '
               f'text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="18" y="{top + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 18 {top + ph / 2})">{escape(ylabel)}</text>')
    if pts:
        path = " ".join(f"{'M' if i == 0 else 'L'}{sx(x):.2f},{sy(y):.2f}"
                        for i, (x, y) in enumerate(pts))
        out.append(f'<path d="{path}" fill="none" stroke="#1f77b4" stroke-width="1.8"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_csv(in_path, out_path) -> tuple[Path, Path]:
    """Render ``in_path`` (metrics or trajectory CSV) to SVG plus a plot-data CSV.

    The plot-data CSV sits next to the SVG (``<stem>.data.csv``) and holds the
    plotted rows verbatim, downsampled to at most ``MAX_PLOT_POINTS``.
    """
    columns, rows = read_csv_columns(in_path)
    xcol, ycol, xlabel, ylabel, title = SCHEMAS[detect_schema(columns)]
    keep = [rows[i] for i in downsample_indices(len(rows))]
    xs = [float(r[xcol]) for r in keep]
    ys = [float(r[ycol]) for r in keep]
    out_path = Path(out_path)
    write_atomic(out_path, render_svg(xs, ys, xlabel, ylabel, title).encode("utf-8"))
    data_path = out_path.with_name(out_path.stem + ".data.csv")
    lines = [f"{xcol},{ycol}"] + [f"{r[xcol]},{r[ycol]}" for r in keep]
    write_atomic(data_path, ("\n".join(lines) + "\n").encode("utf-8"))
    return out_path, data_path
