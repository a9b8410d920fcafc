"""Minimal standalone SVG line plots."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

_W, _H, _PAD = 640, 420, 60


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if not hi > lo:
        return [lo]
    step = 10 ** math.floor(math.log10((hi - lo) / n))
    for f in (1, 2, 5, 10):
        if (hi - lo) / (f * step) <= n:
            step *= f
            break
    start = math.ceil(lo / step) * step
    return [float(t) for t in np.arange(start, hi + 0.5 * step, step)]


def line_plot(series: list[tuple[np.ndarray, np.ndarray, str]], xlabel: str, ylabel: str, title: str = "") -> str:
    """Render ``(x, y, label)`` series as an SVG document string."""
    xs = np.concatenate([np.asarray(s[0], float) for s in series]) if series else np.zeros(1)
    ys = np.concatenate([np.asarray(s[1], float) for s in series]) if series else np.zeros(1)
    ok = np.isfinite(xs) & np.isfinite(ys)
    xs, ys = (xs[ok], ys[ok]) if ok.any() else (np.zeros(1), np.zeros(1))
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1

    def px(x):
        return _PAD + (x - x0) / (x1 - x0) * (_W - 2 * _PAD)

    def py(y):
        return _H - _PAD - (y - y0) / (y1 - y0) * (_H - 2 * _PAD)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
           '<rect width="100%" height="100%" fill="white"/>',
           f'<text x="{_W / 2}" y="24" text-anchor="middle" font-size="15" font-family="sans-serif">{title}</text>',
           f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="black"/>',
           f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_H - _PAD}" stroke="black"/>']
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{px(t):.2f}" y1="{_H - _PAD}" x2="{px(t):.2f}" y2="{_H - _PAD + 5}" stroke="black"/>')
        out.append(f'<text x="{px(t):.2f}" y="{_H - _PAD + 18}" text-anchor="middle" font-size="11" '
                   f'font-family="sans-serif">{t:.4g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{_PAD - 5}" y1="{py(t):.2f}" x2="{_PAD}" y2="{py(t):.2f}" stroke="black"/>')
        out.append(f'<text x="{_PAD - 8}" y="{py(t) + 4:.2f}" text-anchor="end" font-size="11" '
                   f'font-family="sans-serif">{t:.4g}</text>')
    out.append(f'<text x="{_W / 2}" y="{_H - 15}" text-anchor="middle" font-size="13" '
               f'font-family="sans-serif">{xlabel}</text>')
    out.append(f'<text x="16" y="{_H / 2}" text-anchor="middle" font-size="13" font-family="sans-serif" '
               f'transform="rotate(-90 16 {_H / 2})">{ylabel}</text>')
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    for k, (x, y, label) in enumerate(series):
        x, y = np.asarray(x, float), np.asarray(y, float)
        good = np.isfinite(x) & np.isfinite(y)
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x[good], y[good]))
        c = colors[k % len(colors)]
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{_W - _PAD}" y="{_PAD + 14 * k}" text-anchor="end" font-size="11" fill="{c}" '
                   f'font-family="sans-serif">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_plot(path: str | Path, *args, **kwargs) -> Path:
    path = Path(path)
    path.write_text(line_plot(*args, **kwargs), newline="\n")
    return path
