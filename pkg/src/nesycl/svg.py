"""Minimal deterministic SVG line charts."""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f", "#17becf")
WIDTH, HEIGHT = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 60, 170, 40, 50


def _num(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def line_chart(
    title: str,
    xlabel: str,
    ylabel: str,
    series: Sequence[tuple[str, Sequence[float], Sequence[float]]],
    y_range: tuple[float, float] = (0.0, 100.0),
) -> str:
    """``series`` holds (label, xs, ys); returns the SVG document as text."""
    xs_all = [x for _, xs, _ in series for x in xs]
    x0, x1 = (min(xs_all), max(xs_all)) if xs_all else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    y0, y1 = y_range
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(x):
        return LEFT + (x - x0) / (x1 - x0) * pw

    def py(y):
        return TOP + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2 - RIGHT / 2}" y="22" font-family="sans-serif" font-size="15" text-anchor="middle">{escape(title)}</text>',
        f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>',
    ]
    for k in range(6):
        yv = y0 + (y1 - y0) * k / 5
        out.append(f'<line x1="{LEFT - 4}" y1="{_num(py(yv))}" x2="{LEFT}" y2="{_num(py(yv))}" stroke="black"/>')
        out.append(
            f'<text x="{LEFT - 7}" y="{_num(py(yv) + 4)}" font-family="sans-serif" font-size="11" text-anchor="end">{_num(yv)}</text>'
        )
    ticks = sorted(set(xs_all)) if len(set(xs_all)) <= 12 else [x0 + (x1 - x0) * k / 10 for k in range(11)]
    for xv in ticks:
        out.append(f'<line x1="{_num(px(xv))}" y1="{TOP + ph}" x2="{_num(px(xv))}" y2="{TOP + ph + 4}" stroke="black"/>')
        out.append(
            f'<text x="{_num(px(xv))}" y="{TOP + ph + 17}" font-family="sans-serif" font-size="11" text-anchor="middle">{_num(xv)}</text>'
        )
    out.append(
        f'<text x="{LEFT + pw / 2}" y="{HEIGHT - 10}" font-family="sans-serif" font-size="12" text-anchor="middle">{escape(xlabel)}</text>'
    )
    out.append(
        f'<text x="16" y="{TOP + ph / 2}" font-family="sans-serif" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 16 {TOP + ph / 2})">{escape(ylabel)}</text>'
    )
    for k, (label, xs, ys) in enumerate(series):
        color = COLORS[k % len(COLORS)]
        pts = " ".join(f"{_num(px(x))},{_num(py(y))}" for x, y in zip(xs, ys))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in zip(xs, ys):
            out.append(f'<circle cx="{_num(px(x))}" cy="{_num(py(y))}" r="3" fill="{color}"/>')
        ly = TOP + 14 + 18 * k
        out.append(f'<line x1="{WIDTH - RIGHT + 12}" y1="{ly}" x2="{WIDTH - RIGHT + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(
            f'<text x="{WIDTH - RIGHT + 37}" y="{ly + 4}" font-family="sans-serif" font-size="11">{escape(label)}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"
