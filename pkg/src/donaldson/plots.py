"""Minimal deterministic SVG output (field maps and line plots)."""
from __future__ import annotations

import numpy as np

_PALETTE = np.array([[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]], float)


def _color(x: float) -> str:
    x = min(max(x, 0.0), 1.0) * (len(_PALETTE) - 1)
    i = min(int(x), len(_PALETTE) - 2)
    c = _PALETTE[i] + (x - i) * (_PALETTE[i + 1] - _PALETTE[i])
    return "#%02x%02x%02x" % tuple(int(round(v)) for v in c)


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def field_svg(disk: np.ndarray, values: np.ndarray, title: str = "", size: int = 480) -> str:
    """Color map of per-face values over the fundamental-domain layout.

    ``disk`` holds the (F, 3) Poincare-disk corners; the legend reports the
    exact value bounds.
    """
    values = np.asarray(values, float)
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo
    half = size / 2
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 160}" height="{size}" '
           f'viewBox="0 0 {size + 160} {size}">',
           f'<title>{title}</title>',
           f'<circle cx="{half}" cy="{half}" r="{half - 2}" fill="none" stroke="#999"/>']
    for tri, v in zip(disk, values):
        pts = " ".join(f"{half + (half - 4) * z.real:.3f},{half - (half - 4) * z.imag:.3f}" for z in tri)
        col = _color(0.5 if span == 0 else (v - lo) / span)
        out.append(f'<polygon points="{pts}" fill="{col}" stroke="{col}" stroke-width="0.3"/>')
    x0 = size + 20
    for i in range(11):
        y = 40 + 20 * (10 - i)
        out.append(f'<rect x="{x0}" y="{y}" width="20" height="20" fill="{_color(i / 10)}"/>')
    out.append(f'<text x="{x0 + 26}" y="54" font-size="12">max {_fmt(hi)}</text>')
    out.append(f'<text x="{x0 + 26}" y="254" font-size="12">min {_fmt(lo)}</text>')
    out.append(f'<text x="{x0}" y="24" font-size="12">{title}</text>')
    out.append("</svg>\n")
    return "\n".join(out)


def line_svg(x, y, xlabel: str, ylabel: str, width: int = 520, height: int = 360) -> str:
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    pad = 60
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<title>{ylabel} vs {xlabel}</title>',
           f'<rect x="{pad}" y="20" width="{width - pad - 20}" height="{height - pad - 20}" fill="none" stroke="#333"/>']
    if len(x):
        xl, xh = float(x.min()), float(x.max())
        yl, yh = float(y.min()), float(y.max())
        sx = (width - pad - 20) / (xh - xl if xh > xl else 1.0)
        sy = (height - pad - 20) / (yh - yl if yh > yl else 1.0)
        px = pad + (x - xl) * sx
        py = height - pad - (y - yl) * sy
        pts = " ".join(f"{a:.3f},{b:.3f}" for a, b in zip(px, py))
        out.append(f'<polyline points="{pts}" fill="none" stroke="#1f5fa8" stroke-width="2"/>')
        for a, b in zip(px, py):
            out.append(f'<circle cx="{a:.3f}" cy="{b:.3f}" r="3" fill="#1f5fa8"/>')
        out.append(f'<text x="{pad}" y="{height - pad + 16}" font-size="11">{_fmt(xl)}</text>')
        out.append(f'<text x="{width - 60}" y="{height - pad + 16}" font-size="11">{_fmt(xh)}</text>')
        out.append(f'<text x="4" y="{height - pad}" font-size="11">{_fmt(yl)}</text>')
        out.append(f'<text x="4" y="30" font-size="11">{_fmt(yh)}</text>')
    out.append(f'<text x="{width / 2:.0f}" y="{height - 12}" font-size="13">{xlabel}</text>')
    out.append(f'<text x="4" y="{height / 2:.0f}" font-size="13">{ylabel}</text>')
    out.append("</svg>\n")
    return "\n".join(out)
