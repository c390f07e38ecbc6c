"""Minimal self-contained SVG charts, each written next to a CSV of its data."""

from __future__ import annotations

import csv
import math
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")
W, H = 640, 400
MARGIN = (60, 20, 30, 50)  # left, right, top, bottom


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    step = 10 ** math.floor(math.log10((hi - lo) / n))
    for m in (1, 2, 5, 10):
        if (hi - lo) / (step * m) <= n:
            step *= m
            break
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-12 * step:
        out.append(round(v, 12))
        v += step
    return out


def _fmt(v):
    return f"{v:.6g}"


class _Frame:
    def __init__(self, xlim, ylim, logy=False):
        self.logy = logy
        self.x0, self.x1 = xlim
        self.y0, self.y1 = (math.log10(ylim[0]), math.log10(ylim[1])) if logy else ylim
        if self.x1 <= self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 <= self.y0:
            self.y1 = self.y0 + 1.0

    def px(self, x):
        l, r, _, _ = MARGIN
        return l + (x - self.x0) / (self.x1 - self.x0) * (W - l - r)

    def py(self, y):
        _, _, t, b = MARGIN
        if self.logy:
            y = math.log10(max(y, 10 ** self.y0))
        return H - b - (y - self.y0) / (self.y1 - self.y0) * (H - t - b)


def _axes(fr: _Frame, title, xlabel, ylabel):
    l, r, t, b = MARGIN
    parts = [f'<rect x="{l}" y="{t}" width="{W - l - r}" height="{H - t - b}" fill="none" stroke="#333"/>']
    for x in _ticks(fr.x0, fr.x1):
        X = fr.px(x)
        parts.append(f'<line x1="{X:.1f}" y1="{H - b}" x2="{X:.1f}" y2="{H - b + 4}" stroke="#333"/>')
        parts.append(f'<text x="{X:.1f}" y="{H - b + 16}" text-anchor="middle">{_fmt(x)}</text>')
    if fr.logy:
        yt = [10.0**k for k in range(math.floor(fr.y0), math.ceil(fr.y1) + 1) if fr.y0 <= k <= fr.y1]
    else:
        yt = _ticks(fr.y0, fr.y1)
    for y in yt:
        Y = fr.py(y)
        parts.append(f'<line x1="{l - 4}" y1="{Y:.1f}" x2="{l}" y2="{Y:.1f}" stroke="#333"/>')
        parts.append(f'<text x="{l - 6}" y="{Y + 4:.1f}" text-anchor="end">{_fmt(y)}</text>')
    parts.append(f'<text x="{W / 2}" y="{t - 10}" text-anchor="middle" font-weight="bold">{escape(title)}</text>')
    parts.append(f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    parts.append(f'<text x="14" y="{H / 2}" text-anchor="middle" transform="rotate(-90 14 {H / 2})">'
                 f'{escape(ylabel)}</text>')
    return parts


def _svg(parts):
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
            f'font-family="sans-serif" font-size="11">')
    return "\n".join([head, f'<rect width="{W}" height="{H}" fill="white"/>', *parts, "</svg>"]) + "\n"


def line_chart(path, series, title="", xlabel="", ylabel="", logy=False, hlines=()):
    """``series``: ``{label: (xs, ys)}``.  Writes ``path`` (SVG) and the same stem as CSV."""
    xs_all = [float(x) for xs, _ in series.values() for x in xs]
    ys_all = [float(y) for _, ys in series.values() for y in ys if math.isfinite(float(y))]
    ys_all += [float(h) for h in hlines]
    if logy:
        ys_all = [y for y in ys_all if y > 0] or [1.0]
    ylim = (min(ys_all, default=0.0), max(ys_all, default=1.0))
    if not logy:
        pad = 0.05 * (ylim[1] - ylim[0] or 1.0)
        ylim = (ylim[0] - pad, ylim[1] + pad)
    fr = _Frame((min(xs_all, default=0.0), max(xs_all, default=1.0)), ylim, logy)
    parts = _axes(fr, title, xlabel, ylabel)
    for h in hlines:
        Y = fr.py(h)
        parts.append(f'<line x1="{MARGIN[0]}" y1="{Y:.1f}" x2="{W - MARGIN[1]}" y2="{Y:.1f}" '
                     f'stroke="#999" stroke-dasharray="4 3"/>')
    for i, (label, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{fr.px(float(x)):.1f},{fr.py(float(y)):.1f}" for x, y in zip(xs, ys)
                       if math.isfinite(float(y)))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.4"/>')
        ly = MARGIN[2] + 14 + 14 * i
        parts.append(f'<line x1="{W - 170}" y1="{ly - 4}" x2="{W - 150}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{W - 145}" y="{ly}">{escape(str(label))}</text>')
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_svg(parts))
    _series_csv(_csv_path(path), series)


def bar_chart(path, labels, groups, title="", xlabel="", ylabel=""):
    """Grouped bars; ``groups``: ``{name: values}`` aligned with ``labels``."""
    n = len(labels)
    vals = [float(v) for vs in groups.values() for v in vs]
    fr = _Frame((-0.5, n - 0.5), (0.0, max(vals, default=1.0) * 1.05))
    parts = _axes(fr, title, xlabel, ylabel)
    width = 0.8 / max(len(groups), 1)
    for g, (name, vs) in enumerate(groups.items()):
        color = PALETTE[g % len(PALETTE)]
        for i, v in enumerate(vs):
            x0 = fr.px(i - 0.4 + g * width)
            x1 = fr.px(i - 0.4 + (g + 1) * width)
            y = fr.py(float(v))
            parts.append(f'<rect x="{x0:.1f}" y="{y:.1f}" width="{x1 - x0:.1f}" height="{fr.py(0) - y:.1f}" '
                         f'fill="{color}"/>')
        ly = MARGIN[2] + 14 + 14 * g
        parts.append(f'<rect x="{W - 170}" y="{ly - 9}" width="12" height="10" fill="{color}"/>')
        parts.append(f'<text x="{W - 152}" y="{ly}">{escape(str(name))}</text>')
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_svg(parts))
    with open(_csv_path(path), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["label", *groups])
        for i, lab in enumerate(labels):
            wr.writerow([lab, *(repr(float(vs[i])) for vs in groups.values())])


def _csv_path(path):
    return path[:-4] + ".csv" if path.endswith(".svg") else path + ".csv"


def _series_csv(path, series):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["series", "x", "y"])
        for label, (xs, ys) in series.items():
            for x, y in zip(xs, ys):
                wr.writerow([label, repr(float(x)), repr(float(y))])
