"""Minimal static SVG plots written without a plotting library.

Coordinates are formatted with a fixed precision so identical inputs give
byte-identical files.
"""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

W, H = 640, 440
PAD_L, PAD_R, PAD_T, PAD_B = 70, 20, 40, 55
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2",
           "#17becf", "#7f7f7f", "#bcbd22")
SQRT3_2 = math.sqrt(3.0) / 2.0


def _f(v: float) -> str:
    return f"{v:.2f}"


class Canvas:
    def __init__(self, width: int = W, height: int = H, title: str = ""):
        self.width, self.height = width, height
        self.parts: list[str] = []
        if title:
            self.text(width / 2, 22, title, size=15, anchor="middle")

    def line(self, x1, y1, x2, y2, color="#000", width=1.0, dash=None):
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(f'<line x1="{_f(x1)}" y1="{_f(y1)}" x2="{_f(x2)}" y2="{_f(y2)}" '
                          f'stroke="{color}" stroke-width="{width}"{extra}/>')

    def polyline(self, xs, ys, color="#000", width=1.5):
        pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in zip(xs, ys))
        self.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                          f'stroke-width="{width}"/>')

    def polygon(self, xs, ys, fill, stroke="none"):
        pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in zip(xs, ys))
        self.parts.append(f'<polygon points="{pts}" fill="{fill}" stroke="{stroke}"/>')

    def circle(self, x, y, r, fill, stroke="none"):
        self.parts.append(f'<circle cx="{_f(x)}" cy="{_f(y)}" r="{_f(r)}" fill="{fill}" '
                          f'stroke="{stroke}"/>')

    def rect(self, x, y, w, h, fill, stroke="none"):
        self.parts.append(f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(w)}" height="{_f(h)}" '
                          f'fill="{fill}" stroke="{stroke}"/>')

    def text(self, x, y, s, size=11, anchor="start", rotate=None):
        rot = f' transform="rotate({rotate} {_f(x)} {_f(y)})"' if rotate is not None else ""
        self.parts.append(f'<text x="{_f(x)}" y="{_f(y)}" font-family="sans-serif" '
                          f'font-size="{size}" text-anchor="{anchor}"{rot}>{escape(str(s))}</text>')

    def render(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" '
                f'height="{self.height}" viewBox="0 0 {self.width} {self.height}">')
        return "\n".join([head, f'<rect width="{self.width}" height="{self.height}" fill="#fff"/>',
                          *self.parts, "</svg>"]) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.render())


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=mag * 10)
    start = math.ceil(lo / step) * step
    return [start + k * step for k in range(int((hi - start) / step + 1e-9) + 1)]


def _fmt_tick(v):
    return f"{v:.4g}"


class Axes:
    def __init__(self, canvas: Canvas, xlim, ylim, xlabel="", ylabel=""):
        self.c = canvas
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 == self.y0:
            self.y1 = self.y0 + 1.0
        self.left, self.right = PAD_L, canvas.width - PAD_R
        self.top, self.bottom = PAD_T, canvas.height - PAD_B
        c = canvas
        c.line(self.left, self.bottom, self.right, self.bottom)
        c.line(self.left, self.top, self.left, self.bottom)
        for t in _ticks(self.x0, self.x1):
            X = self.X(t)
            c.line(X, self.bottom, X, self.bottom + 4)
            c.text(X, self.bottom + 17, _fmt_tick(t), anchor="middle")
        for t in _ticks(self.y0, self.y1):
            Y = self.Y(t)
            c.line(self.left - 4, Y, self.left, Y)
            c.text(self.left - 7, Y + 4, _fmt_tick(t), anchor="end")
        if xlabel:
            c.text((self.left + self.right) / 2, canvas.height - 15, xlabel, size=12,
                   anchor="middle")
        if ylabel:
            c.text(18, (self.top + self.bottom) / 2, ylabel, size=12, anchor="middle", rotate=-90)

    def X(self, x):
        return self.left + (x - self.x0) / (self.x1 - self.x0) * (self.right - self.left)

    def Y(self, y):
        return self.bottom - (y - self.y0) / (self.y1 - self.y0) * (self.bottom - self.top)


def _padded(lo, hi, frac=0.05):
    span = hi - lo if hi > lo else max(abs(hi), 1.0)
    return lo - frac * span, hi + frac * span


def line_plot(path, x, series: dict, title="", xlabel="", ylabel="", markers=True):
    """One polyline per entry of ``series`` (label -> y values)."""
    x = np.asarray(x, dtype=float)
    ys = [np.asarray(v, dtype=float) for v in series.values()]
    allv = np.concatenate([y[np.isfinite(y)] for y in ys]) if ys else np.zeros(1)
    c = Canvas(title=title)
    ax = Axes(c, _padded(x.min(), x.max()), _padded(allv.min(), allv.max()), xlabel, ylabel)
    for k, (label, y) in enumerate(zip(series, ys)):
        col = PALETTE[k % len(PALETTE)]
        ok = np.isfinite(y)
        c.polyline([ax.X(v) for v in x[ok]], [ax.Y(v) for v in y[ok]], col)
        if markers:
            for xv, yv in zip(x[ok], y[ok]):
                c.circle(ax.X(xv), ax.Y(yv), 3, col)
        c.text(ax.right - 150, ax.top + 15 + 15 * k, label, anchor="start")
        c.line(ax.right - 170, ax.top + 11 + 15 * k, ax.right - 155, ax.top + 11 + 15 * k, col, 2)
    c.save(path)


def bar_plot(path, x, heights, title="", xlabel="", ylabel="", highlight=None):
    x = np.asarray(x, dtype=float)
    h = np.asarray(heights, dtype=float)
    c = Canvas(title=title)
    step = float(np.min(np.diff(np.sort(x)))) if len(x) > 1 else 1.0
    ax = Axes(c, (x.min() - step, x.max() + step), (0.0, float(h.max()) * 1.05 or 1.0),
              xlabel, ylabel)
    hl = set() if highlight is None else set(np.asarray(highlight).tolist())
    for k, (xv, hv) in enumerate(zip(x, h)):
        w = 0.8 * (ax.X(step) - ax.X(0))
        col = PALETTE[1] if k in hl else PALETTE[0]
        c.rect(ax.X(xv) - w / 2, ax.Y(hv), w, ax.Y(0) - ax.Y(hv), col)
    c.save(path)


def _ternary_xy(p, size, ox, oy):
    # vertex e1 bottom-left, e2 bottom-right, e3 top
    x = ox + size * (p[..., 1] + 0.5 * p[..., 2])
    y = oy - size * SQRT3_2 * p[..., 2]
    return x, y


def _ternary_frame(c: Canvas, size, ox, oy, labels=("x1", "x2", "x3")):
    vx, vy = _ternary_xy(np.eye(3), size, ox, oy)
    c.polygon(vx, vy, fill="none", stroke="#000")
    c.text(vx[0] - 6, vy[0] + 15, labels[0], anchor="end")
    c.text(vx[1] + 6, vy[1] + 15, labels[1])
    c.text(vx[2], vy[2] - 6, labels[2], anchor="middle")


def _shade(v, vmax):
    t = 0.0 if vmax <= 0 else min(max(v / vmax, 0.0), 1.0)
    r = int(round(255 - t * (255 - 31)))
    g = int(round(255 - t * (255 - 119)))
    b = int(round(255 - t * (255 - 180)))
    return f"#{r:02x}{g:02x}{b:02x}"


def ternary_heatmap(path, points, values, N: int, title="", highlight=None):
    """Hexagon-free heatmap: one small up-triangle per lattice point of ``Delta_N``."""
    pts = np.asarray(points, dtype=float)
    vals = np.asarray(values, dtype=float)
    c = Canvas(title=title)
    size = min(c.width - 80, (c.height - 80) / SQRT3_2)
    ox, oy = (c.width - size) / 2, c.height - 35
    vmax = float(vals.max()) if vals.size else 1.0
    cx, cy = _ternary_xy(pts, size, ox, oy)
    r = size / N * 0.55
    hl = set() if highlight is None else set(np.asarray(highlight).tolist())
    for k, (x, y, v) in enumerate(zip(cx, cy, vals)):
        c.polygon([x - r, x + r, x], [y + r * 0.58, y + r * 0.58, y - r * 1.15], _shade(v, vmax),
                  stroke=PALETTE[1] if k in hl else "none")
    _ternary_frame(c, size, ox, oy)
    c.save(path)


def class_map(path, points, labels, title="", d: int = 2):
    """Cells coloured by class index (``-1`` = no class)."""
    pts = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    c = Canvas(title=title)
    if d == 2:
        ax = Axes(c, (-0.02, 1.02), (0.0, 1.0), xlabel="x1", ylabel="")
        for p, lab in zip(pts, labels):
            col = "#dddddd" if lab < 0 else PALETTE[int(lab) % len(PALETTE)]
            c.circle(ax.X(p[0]), ax.Y(0.5), 4, col)
    else:
        size = min(c.width - 80, (c.height - 80) / SQRT3_2)
        ox, oy = (c.width - size) / 2, c.height - 35
        cx, cy = _ternary_xy(pts, size, ox, oy)
        for x, y, lab in zip(cx, cy, labels):
            col = "#dddddd" if lab < 0 else PALETTE[int(lab) % len(PALETTE)]
            c.circle(x, y, 3, col)
        _ternary_frame(c, size, ox, oy)
    c.save(path)


def phase_portrait(path, F, d: int, attractor_points=None, title="", n: int = 200):
    """``F_1`` along the hawk axis for ``d = 2``; direction arrows on the simplex for ``d = 3``."""
    c = Canvas(title=title)
    if d == 2:
        s = np.linspace(0.0, 1.0, n)
        X = np.column_stack([s, 1.0 - s])
        f1 = F(X)[:, 0]
        ax = Axes(c, (0.0, 1.0), _padded(float(f1.min()), float(f1.max())), "x1", "F_1(x)")
        c.line(ax.X(0), ax.Y(0), ax.X(1), ax.Y(0), "#999", dash="4 3")
        c.polyline([ax.X(v) for v in s], [ax.Y(v) for v in f1], PALETTE[0])
        if attractor_points is not None:
            for p in np.atleast_2d(attractor_points):
                c.circle(ax.X(p[0]), ax.Y(0), 4, PALETTE[1])
    else:
        size = min(c.width - 80, (c.height - 80) / SQRT3_2)
        ox, oy = (c.width - size) / 2, c.height - 35
        m = 14
        pts = np.array([[i, j, m - i - j] for i in range(1, m) for j in range(1, m - i)],
                       dtype=float) / m
        V = F(pts)
        speed = np.linalg.norm(V, axis=1)
        x0, y0 = _ternary_xy(pts, size, ox, oy)
        tip = pts + V / np.maximum(speed, 1e-12)[:, None] * (0.35 / m)
        x1, y1 = _ternary_xy(tip, size, ox, oy)
        for a, b, cc, dd in zip(x0, y0, x1, y1):
            c.line(a, b, cc, dd, PALETTE[0], 1.2)
            c.circle(cc, dd, 1.5, PALETTE[0])
        if attractor_points is not None:
            ax_, ay_ = _ternary_xy(np.atleast_2d(attractor_points), size, ox, oy)
            for a, b in zip(ax_, ay_):
                c.circle(a, b, 3, PALETTE[1])
        _ternary_frame(c, size, ox, oy)
    c.save(path)
