"""Small self-contained SVG renderers for the report figures.

Coordinates are printed with two decimals so output is byte-stable.
"""

from __future__ import annotations

from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

W, H = 640, 420
MARGIN = dict(left=70, right=20, top=40, bottom=55)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _f(v: float) -> str:
    return f"{v:.2f}"


class _Frame:
    def __init__(self, xlim, ylim):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 == self.x0:
            self.x0, self.x1 = self.x0 - 0.5, self.x1 + 0.5
        if self.y1 == self.y0:
            self.y0, self.y1 = self.y0 - 0.5, self.y1 + 0.5
        self.pw = W - MARGIN["left"] - MARGIN["right"]
        self.ph = H - MARGIN["top"] - MARGIN["bottom"]

    def px(self, x):
        return MARGIN["left"] + (np.asarray(x, dtype=float) - self.x0) / (self.x1 - self.x0) * self.pw

    def py(self, y):
        return MARGIN["top"] + (1 - (np.asarray(y, dtype=float) - self.y0) / (self.y1 - self.y0)) * self.ph


def _doc(body: list[str], title: str) -> str:
    head = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
        'font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
    ]
    return "\n".join(head + body + ["</svg>"]) + "\n"


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    return np.linspace(lo, hi, n)


def _axes(fr: _Frame, xlabel: str, ylabel: str) -> list[str]:
    left, top = MARGIN["left"], MARGIN["top"]
    bottom = top + fr.ph
    out = [f'<rect x="{left}" y="{top}" width="{fr.pw}" height="{fr.ph}" fill="none" stroke="black"/>']
    for t in _ticks(fr.x0, fr.x1):
        x = _f(float(fr.px(t)))
        out.append(f'<line x1="{x}" y1="{bottom}" x2="{x}" y2="{bottom + 5}" stroke="black"/>')
        out.append(f'<text x="{x}" y="{bottom + 18}" text-anchor="middle">{t:.3g}</text>')
    for t in _ticks(fr.y0, fr.y1):
        y = _f(float(fr.py(t)))
        out.append(f'<line x1="{left - 5}" y1="{y}" x2="{left}" y2="{y}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{y}" text-anchor="end" dominant-baseline="middle">{t:.3g}</text>')
    out.append(f'<text x="{left + fr.pw / 2}" y="{H - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{top + fr.ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + fr.ph / 2})">{escape(ylabel)}</text>')
    return out


def _placeholder(title: str) -> str:
    return _doc([f'<text x="{W / 2}" y="{H / 2}" text-anchor="middle" fill="gray">no data</text>'], title)


def _polyline(xs, ys, color: str, width: float = 1.5, dash: str | None = None) -> str:
    pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in zip(xs, ys))
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"{extra}/>'


def line_band_svg(x, estimate, lower, upper, title: str = "", xlabel: str = "", ylabel: str = "effect",
                  hline: float | None = 0.0) -> str:
    """Point estimate with a shaded band."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return _placeholder(title)
    est, lo, hi = (np.asarray(v, dtype=float) for v in (estimate, lower, upper))
    ys = np.concatenate([est, lo, hi] + ([[hline]] if hline is not None else []))
    fr = _Frame((x.min(), x.max()), (ys.min(), ys.max()))
    body = _axes(fr, xlabel, ylabel)
    px = fr.px(x)
    poly = list(zip(px, fr.py(hi))) + list(zip(px[::-1], fr.py(lo)[::-1]))
    body.append('<polygon points="' + " ".join(f"{_f(a)},{_f(b)}" for a, b in poly)
                + '" fill="#1f77b4" fill-opacity="0.25" stroke="none"/>')
    if hline is not None:
        yh = _f(float(fr.py(hline)))
        body.append(f'<line x1="{MARGIN["left"]}" y1="{yh}" x2="{MARGIN["left"] + fr.pw}" y2="{yh}" '
                    'stroke="gray" stroke-dasharray="4 3"/>')
    body.append(_polyline(px, fr.py(est), PALETTE[0], 2.0))
    return _doc(body, title)


def color_map(t: float) -> str:
    """Blue (t = 0) to red (t = 1); red channel increases monotonically."""
    t = min(max(float(t), 0.0), 1.0)
    return f"rgb({int(round(255 * t))},{int(round(60 + 80 * (1 - abs(2 * t - 1))))},{int(round(255 * (1 - t)))})"


def heatmap_svg(matrix, x_edges, y_edges, title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    """Cells matrix[i, j] spanning x_edges[j:j+2] × y_edges[i:i+2]."""
    M = np.asarray(matrix, dtype=float)
    if M.size == 0:
        return _placeholder(title)
    xe, ye = np.asarray(x_edges, dtype=float), np.asarray(y_edges, dtype=float)
    fr = _Frame((xe[0], xe[-1]), (ye[0], ye[-1]))
    finite = M[np.isfinite(M)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    span = hi - lo if hi > lo else 1.0
    body = []
    for i in range(M.shape[0]):
        for j in range(M.shape[1]):
            x0, x1 = fr.px(xe[j]), fr.px(xe[j + 1])
            y0, y1 = fr.py(ye[i + 1]), fr.py(ye[i])
            fill = color_map((M[i, j] - lo) / span) if np.isfinite(M[i, j]) else "#dddddd"
            body.append(f'<rect class="cell" x="{_f(x0)}" y="{_f(y0)}" width="{_f(x1 - x0)}" '
                        f'height="{_f(y1 - y0)}" fill="{fill}" data-value="{float(M[i, j])!r}"/>')
    body += _axes(fr, xlabel, ylabel)
    body.append(f'<text x="{W - MARGIN["right"]}" y="{MARGIN["top"] - 8}" text-anchor="end">'
                f'range [{lo:.4g}, {hi:.4g}]</text>')
    return _doc(body, title)


def grouped_histogram_svg(edges, counts: Mapping[str, Sequence[int]], title: str = "", xlabel: str = "",
                          markers: Mapping[str, float] | None = None) -> str:
    """Side-by-side bars per bin for each group, optional vertical markers."""
    edges = np.asarray(edges, dtype=float)
    groups = list(counts)
    if edges.size < 2 or not groups:
        return _placeholder(title)
    top = max(1, max(int(np.max(c)) if len(c) else 0 for c in counts.values()))
    fr = _Frame((edges[0], edges[-1]), (0.0, float(top)))
    body = _axes(fr, xlabel, "count")
    width = (fr.px(edges[1]) - fr.px(edges[0])) / len(groups)
    for g, name in enumerate(groups):
        c = np.asarray(counts[name])
        for b in range(c.size):
            x = fr.px(edges[b]) + g * width
            y = fr.py(c[b])
            body.append(f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(width)}" height="{_f(fr.py(0) - y)}" '
                        f'fill="{PALETTE[g % len(PALETTE)]}" fill-opacity="0.8"/>')
        body.append(f'<text x="{W - MARGIN["right"] - 5}" y="{MARGIN["top"] + 15 + 15 * g}" text-anchor="end" '
                    f'fill="{PALETTE[g % len(PALETTE)]}">{escape(str(name))}</text>')
    for label, v in (markers or {}).items():
        x = _f(float(fr.px(v)))
        body.append(f'<line x1="{x}" y1="{MARGIN["top"]}" x2="{x}" y2="{MARGIN["top"] + fr.ph}" '
                    'stroke="black" stroke-dasharray="5 3"/>')
        body.append(f'<text x="{x}" y="{MARGIN["top"] - 4}" text-anchor="middle">{escape(label)}</text>')
    return _doc(body, title)


def _interp(p1, p2, v1, v2, level):
    t = 0.5 if v2 == v1 else (level - v1) / (v2 - v1)
    return (p1[0] + t * (p2[0] - p1[0]), p1[1] + t * (p2[1] - p1[1]))


def marching_squares(x, y, Z, level: float) -> list[tuple[tuple[float, float], tuple[float, float]]]:
    """Line segments of the ``level`` set of Z[i, j] sampled at (x[j], y[i])."""
    Z = np.asarray(Z, dtype=float)
    segs = []
    for i in range(Z.shape[0] - 1):
        for j in range(Z.shape[1] - 1):
            corners = [(x[j], y[i]), (x[j + 1], y[i]), (x[j + 1], y[i + 1]), (x[j], y[i + 1])]
            vals = [Z[i, j], Z[i, j + 1], Z[i + 1, j + 1], Z[i + 1, j]]
            above = [v >= level for v in vals]
            crossings = []
            for e in range(4):
                a, b = e, (e + 1) % 4
                if above[a] != above[b]:
                    crossings.append(_interp(corners[a], corners[b], vals[a], vals[b], level))
            if len(crossings) == 2:
                segs.append((crossings[0], crossings[1]))
            elif len(crossings) == 4:
                segs.append((crossings[0], crossings[1]))
                segs.append((crossings[2], crossings[3]))
    return segs


def contour_svg(x, y, Z, levels: Sequence[float], title: str = "", xlabel: str = "", ylabel: str = "",
                points: Mapping[str, tuple[float, float]] | None = None) -> str:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if Z.size == 0:
        return _placeholder(title)
    fr = _Frame((x[0], x[-1]), (y[0], y[-1]))
    body = _axes(fr, xlabel, ylabel)
    for k, level in enumerate(levels):
        color = "#d62728" if level == 0 else PALETTE[0]
        for (a, b) in marching_squares(x, y, Z, level):
            body.append(f'<line x1="{_f(fr.px(a[0]))}" y1="{_f(fr.py(a[1]))}" x2="{_f(fr.px(b[0]))}" '
                        f'y2="{_f(fr.py(b[1]))}" stroke="{color}" stroke-width="1.2"/>')
    for label, (px_, py_) in (points or {}).items():
        cx, cy = fr.px(min(max(px_, x[0]), x[-1])), fr.py(min(max(py_, y[0]), y[-1]))
        body.append(f'<circle cx="{_f(cx)}" cy="{_f(cy)}" r="3" fill="black"/>')
        body.append(f'<text x="{_f(cx + 5)}" y="{_f(cy - 5)}">{escape(label)}</text>')
    return _doc(body, title)
