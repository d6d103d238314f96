"""Dependency-free SVG line charts of metrics CSV columns.

Output is a pure function of the inputs, so identical CSVs give byte-identical
files.
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Sequence, Tuple
from xml.sax.saxutils import escape

from .files import atomic_write_text
from .nn import ConfigError
from .trainer import METRIC_FIELDS, read_metrics_csv

WIDTH, HEIGHT = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 160, 30, 50
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
          "#bcbd22", "#17becf")


def _nice_ticks(lo: float, hi: float, n: int = 5) -> List[float]:
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def render_svg(series: Sequence[Tuple[str, Sequence[float], Sequence[float]]], field: str) -> str:
    """Render ``(name, epochs, values)`` series into one SVG chart."""
    xs = [x for _, ex, _ in series for x in ex]
    ys = [y for _, _, vy in series for y in vy]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(x):
        return LEFT + (x - x0) / (x1 - x0) * pw

    def py(y):
        return TOP + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _nice_ticks(y0, y1):
        out.append(f'<line x1="{LEFT - 4}" y1="{py(t):.2f}" x2="{LEFT}" y2="{py(t):.2f}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 6}" y="{py(t) + 4:.2f}" text-anchor="end">{t:.4g}</text>')
    for t in _nice_ticks(x0, x1):
        out.append(f'<line x1="{px(t):.2f}" y1="{TOP + ph}" x2="{px(t):.2f}" y2="{TOP + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{px(t):.2f}" y="{TOP + ph + 16}" text-anchor="middle">{t:.4g}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle">epoch</text>')
    out.append(f'<text x="16" y="{TOP + ph / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {TOP + ph / 2:.2f})">{escape(field)}</text>')
    for i, (name, ex, vy) in enumerate(series):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(ex, vy))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = TOP + 12 + 16 * i
        lx = LEFT + pw + 10
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 22}" y="{ly}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plot(csv_paths: Sequence, field: str, out) -> Path:
    """One polyline per metrics CSV (legend = file stem), ``field`` against epoch."""
    if field not in METRIC_FIELDS or field == "epoch":
        raise ConfigError(f"field {field!r} is not a plottable metrics column {METRIC_FIELDS[1:]}")
    if not csv_paths:
        raise ConfigError("no CSV files to plot")
    series = []
    for p in csv_paths:
        p = Path(p)
        records = read_metrics_csv(p)
        if not records:
            raise ConfigError(f"{p}: no metric rows to plot")
        series.append((p.stem, [r.epoch for r in records], [getattr(r, field) for r in records]))
    out = Path(out)
    atomic_write_text(out, render_svg(series, field))
    return out
