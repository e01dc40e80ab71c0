"""Standalone SVG line plots, written by hand so runs carry no plotting dependency."""
from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def line_plot(path, title: str, series: dict[str, tuple[list, list]], width: int = 640, height: int = 360,
              xlabel: str = "iteration") -> None:
    pad_l, pad_r, pad_t, pad_b = 60, 150, 30, 40
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys) if y is not None and math.isfinite(y)]
    if pts:
        x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
        y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def sx(x):
        return pad_l + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return pad_t + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-family="sans-serif" font-size="14">{escape(title)}</text>',
        f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
    ]
    for frac in (0.0, 0.5, 1.0):
        yv = y0 + frac * (y1 - y0)
        xv = x0 + frac * (x1 - x0)
        out.append(f'<text x="{pad_l - 5}" y="{sy(yv) + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="10">{_fmt(yv)}</text>')
        out.append(f'<text x="{sx(xv):.1f}" y="{pad_t + ph + 14}" text-anchor="middle" font-family="sans-serif" font-size="10">{_fmt(xv)}</text>')
    out.append(f'<text x="{pad_l + pw / 2:.1f}" y="{height - 6}" text-anchor="middle" font-family="sans-serif" font-size="11">{escape(xlabel)}</text>')
    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        coords = [f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys) if y is not None and math.isfinite(y)]
        if len(coords) == 1:
            cx, cy = coords[0].split(",")
            out.append(f'<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>')
        elif coords:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{" ".join(coords)}"/>')
        ly = pad_t + 14 * (i + 1)
        out.append(f'<line x1="{width - pad_r + 10}" y1="{ly - 4}" x2="{width - pad_r + 30}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{width - pad_r + 35}" y="{ly}" font-family="sans-serif" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
