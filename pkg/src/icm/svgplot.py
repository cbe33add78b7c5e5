"""Dependency-free deterministic SVG emission for rate-performance curves."""

from __future__ import annotations

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2")
_W, _H = 640, 440
_ML, _MR, _MT, _MB = 70, 20, 20, 55


def _fmt(v: float) -> str:
    return f"{v:.4f}".rstrip("0").rstrip(".")


def _ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def rd_plot_svg(curves, xlabel: str = "bits per pixel", ylabel: str = "task metric") -> str:
    """Render named RD curves as an SVG string.

    ``curves`` is a list of (name, points) with points exposing .bpp/.metric,
    already sorted by bpp. Output is byte-deterministic for equal input.
    """
    all_pts = [p for _, pts in curves for p in pts]
    if not all_pts:
        raise ValueError("nothing to plot")
    x_lo = min(p.bpp for p in all_pts)
    x_hi = max(p.bpp for p in all_pts)
    y_lo = min(p.metric for p in all_pts)
    y_hi = max(p.metric for p in all_pts)
    x_pad = 0.05 * (x_hi - x_lo or 1.0)
    y_pad = 0.05 * (y_hi - y_lo or 1.0)
    x_lo, x_hi = x_lo - x_pad, x_hi + x_pad
    y_lo, y_hi = y_lo - y_pad, y_hi + y_pad

    def sx(v: float) -> str:
        return _fmt(_ML + (v - x_lo) / (x_hi - x_lo) * (_W - _ML - _MR))

    def sy(v: float) -> str:
        return _fmt(_H - _MB - (v - y_lo) / (y_hi - y_lo) * (_H - _MT - _MB))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<rect x="{_ML}" y="{_MT}" width="{_W - _ML - _MR}" '
        f'height="{_H - _MT - _MB}" fill="none" stroke="black"/>',
    ]
    for tx in _ticks(x_lo + x_pad, x_hi - x_pad):
        parts.append(
            f'<line x1="{sx(tx)}" y1="{_H - _MB}" x2="{sx(tx)}" y2="{_H - _MB + 5}" stroke="black"/>')
        parts.append(
            f'<text x="{sx(tx)}" y="{_H - _MB + 18}" font-size="11" '
            f'text-anchor="middle">{_fmt(tx)}</text>')
    for ty in _ticks(y_lo + y_pad, y_hi - y_pad):
        parts.append(
            f'<line x1="{_ML - 5}" y1="{sy(ty)}" x2="{_ML}" y2="{sy(ty)}" stroke="black"/>')
        parts.append(
            f'<text x="{_ML - 8}" y="{sy(ty)}" font-size="11" '
            f'text-anchor="end" dominant-baseline="middle">{_fmt(ty)}</text>')
    parts.append(
        f'<text x="{(_ML + _W - _MR) // 2}" y="{_H - 12}" font-size="13" '
        f'text-anchor="middle">{xlabel}</text>')
    parts.append(
        f'<text x="16" y="{(_MT + _H - _MB) // 2}" font-size="13" text-anchor="middle" '
        f'transform="rotate(-90 16 {(_MT + _H - _MB) // 2})">{ylabel}</text>')

    for ci, (name, pts) in enumerate(curves):
        color = _COLORS[ci % len(_COLORS)]
        coords = " ".join(f"{sx(p.bpp)},{sy(p.metric)}" for p in pts)
        if len(pts) > 1:
            parts.append(
                f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for p in pts:
            parts.append(f'<circle cx="{sx(p.bpp)}" cy="{sy(p.metric)}" r="3" fill="{color}"/>')
        ly = _MT + 18 + 16 * ci
        parts.append(
            f'<line x1="{_ML + 10}" y1="{ly - 4}" x2="{_ML + 34}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{_ML + 40}" y="{ly}" font-size="12">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
