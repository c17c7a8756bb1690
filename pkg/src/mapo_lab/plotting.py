"""Minimal deterministic SVG line plots.

Output depends only on the input numbers: fixed canvas, fixed palette,
coordinates rounded to two decimals, series drawn in sorted label order.
"""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

__all__ = ["line_plot"]

WIDTH, HEIGHT = 640, 400
MARGIN = {"left": 70, "right": 190, "top": 40, "bottom": 55}
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (count - 1) for i in range(count)]


def _tick_label(v: float) -> str:
    if v == 0 or 1e-3 <= abs(v) < 1e5:
        return f"{v:.4g}"
    return f"{v:.2e}"


def _span(values: list[float]) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        pad = abs(lo) * 0.1 or 1.0
        return lo - pad, hi + pad
    pad = (hi - lo) * 0.05
    return lo - pad, hi + pad


def line_plot(series: dict[str, list[tuple[float, float]]], title: str, xlabel: str, ylabel: str,
              log_x: bool = False) -> str:
    """Render ``{label: [(x, y), ...]}`` as an SVG document string."""
    if not series:
        raise ValueError("line_plot needs at least one series")
    pts = {k: sorted(v) for k, v in sorted(series.items()) if v}
    xs = [x for v in pts.values() for x, _ in v]
    ys = [y for v in pts.values() for _, y in v]
    if log_x and min(xs) <= 0:
        raise ValueError("log_x needs positive x values")
    tx = (lambda x: math.log10(x)) if log_x else (lambda x: x)
    x_lo, x_hi = _span([tx(x) for x in xs])
    y_lo, y_hi = _span(ys)
    left, top = MARGIN["left"], MARGIN["top"]
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x: float) -> float:
        return left + (tx(x) - x_lo) / (x_hi - x_lo) * pw

    def py(y: float) -> float:
        return top + (1.0 - (y - y_lo) / (y_hi - y_lo)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.2f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    x_ticks = sorted(set(xs)) if len(set(xs)) <= 8 else None
    if x_ticks is None:
        raw = _ticks(x_lo, x_hi)
        x_ticks = [10**v for v in raw] if log_x else raw
    for x in x_ticks:
        X = px(x)
        out.append(f'<line x1="{_fmt(X)}" y1="{top + ph}" x2="{_fmt(X)}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{_fmt(X)}" y="{top + ph + 18}" text-anchor="middle">{_tick_label(x)}</text>')
    for y in _ticks(y_lo, y_hi):
        Y = py(y)
        out.append(f'<line x1="{left - 5}" y1="{_fmt(Y)}" x2="{left}" y2="{_fmt(Y)}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{_fmt(Y + 4)}" text-anchor="end">{_tick_label(y)}</text>')
    out.append(f'<text x="{left + pw / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2:.2f})">{escape(ylabel)}</text>')
    for i, (label, v) in enumerate(pts.items()):
        color = PALETTE[i % len(PALETTE)]
        path = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in v)
        out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in v:
            out.append(f'<circle cx="{_fmt(px(x))}" cy="{_fmt(py(y))}" r="3" fill="{color}"/>')
        ly = top + 12 + 18 * i
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 38}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
