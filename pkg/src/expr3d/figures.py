"""Figure output: confusion heatmaps and accuracy-vs-scale charts.

The sweep chart exists in two forms.  ``save_sweep_png`` uses
matplotlib for reports; ``write_sweep_svg`` emits the same curves as a
small hand-assembled SVG with no rendering dependency, so the bytes are
deterministic and diffable.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)
import numpy as np  # noqa: E402

from .errors import ValidationError  # noqa: E402
from .evaluate import ConfusionMatrix, ScaleSweepResult, confusion_to_rates  # noqa: E402
from .util import atomic_write_text  # noqa: E402

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def save_confusion_png(cm: ConfusionMatrix, path: str, normalize: bool = True):
    """Render a confusion matrix as a heatmap with per-cell annotations."""
    data = confusion_to_rates(cm) if normalize else cm.counts.astype(float)
    fig, ax = plt.subplots(figsize=(6.4, 5.6))
    im = ax.imshow(data, cmap="viridis", vmin=0.0,
                   vmax=1.0 if normalize else max(1.0, data.max()))
    ax.set_xticks(range(len(cm.classes)), cm.classes, rotation=45, ha="right")
    ax.set_yticks(range(len(cm.classes)), cm.classes)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    mid = (data.max() if data.size else 1.0) / 2.0
    for i in range(len(cm.classes)):
        for j in range(len(cm.classes)):
            val = data[i, j]
            txt = f"{val:.2f}" if normalize else f"{int(val)}"
            ax.text(j, i, txt, ha="center", va="center", fontsize=8,
                    color="white" if val < mid else "black")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_sweep_png(result: ScaleSweepResult, path: str):
    """Accuracy-vs-scale curves, one per extraction method."""
    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    for mi, name in enumerate(result.methods):
        ax.plot(result.scales, result.accuracy[mi], marker="o",
                color=PALETTE[mi % len(PALETTE)], label=name)
    ax.set_xlabel("resolution scale")
    ax.set_ylabel("leave-one-clip-out accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.invert_xaxis()  # full resolution on the left, degradation to the right
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


# Fixed geometry for the SVG chart (pixels).
_W, _H = 640, 400
_LEFT, _RIGHT, _TOP, _BOTTOM = 62.0, 170.0, 20.0, 48.0


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def write_sweep_svg(result: ScaleSweepResult, path: str):
    """Write the sweep chart as a self-contained SVG.

    Layout is fixed and every coordinate is formatted with %.6g, so the
    same result always produces identical bytes.  The x axis runs from
    scale 1.0 on the left down to the smallest scale on the right.
    """
    scales = result.scales
    if len(scales) < 1:
        raise ValidationError("nothing to plot")
    smin = min(scales)
    span = 1.0 - smin
    plot_w = _W - _LEFT - _RIGHT
    plot_h = _H - _TOP - _BOTTOM

    def x_of(s: float) -> float:
        if span == 0.0:
            return _LEFT + plot_w / 2.0
        return _LEFT + (1.0 - s) / span * plot_w

    def y_of(acc: float) -> float:
        return _TOP + (1.0 - acc) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
    ]
    # horizontal gridlines and y tick labels at 0, 0.25, .., 1
    for i in range(5):
        acc = i / 4.0
        y = y_of(acc)
        parts.append(f'<line x1="{_fmt(_LEFT)}" y1="{_fmt(y)}" '
                     f'x2="{_fmt(_W - _RIGHT)}" y2="{_fmt(y)}" '
                     f'stroke="#dddddd" stroke-width="1"/>')
        parts.append(f'<text x="{_fmt(_LEFT - 8)}" y="{_fmt(y + 4)}" '
                     f'text-anchor="end" font-family="sans-serif" '
                     f'font-size="12">{_fmt(acc)}</text>')
    # x ticks at each scale
    for s in scales:
        x = x_of(s)
        y0 = _H - _BOTTOM
        parts.append(f'<line x1="{_fmt(x)}" y1="{_fmt(y0)}" x2="{_fmt(x)}" '
                     f'y2="{_fmt(y0 + 5)}" stroke="#333333" stroke-width="1"/>')
        parts.append(f'<text x="{_fmt(x)}" y="{_fmt(y0 + 20)}" '
                     f'text-anchor="middle" font-family="sans-serif" '
                     f'font-size="12">{_fmt(s)}</text>')
    # axes
    parts.append(f'<line x1="{_fmt(_LEFT)}" y1="{_fmt(_TOP)}" x2="{_fmt(_LEFT)}" '
                 f'y2="{_fmt(_H - _BOTTOM)}" stroke="#333333" stroke-width="1"/>')
    parts.append(f'<line x1="{_fmt(_LEFT)}" y1="{_fmt(_H - _BOTTOM)}" '
                 f'x2="{_fmt(_W - _RIGHT)}" y2="{_fmt(_H - _BOTTOM)}" '
                 f'stroke="#333333" stroke-width="1"/>')
    # axis titles
    parts.append(f'<text x="{_fmt(_LEFT + plot_w / 2)}" y="{_fmt(_H - 8)}" '
                 f'text-anchor="middle" font-family="sans-serif" font-size="13">'
                 f'resolution scale</text>')
    parts.append(f'<text x="14" y="{_fmt(_TOP + plot_h / 2)}" '
                 f'text-anchor="middle" font-family="sans-serif" font-size="13" '
                 f'transform="rotate(-90 14 {_fmt(_TOP + plot_h / 2)})">'
                 f'accuracy</text>')
    # one polyline + markers per method, legend on the right
    for mi, name in enumerate(result.methods):
        color = PALETTE[mi % len(PALETTE)]
        pts = " ".join(f"{_fmt(x_of(s))},{_fmt(y_of(a))}"
                       for s, a in zip(scales, result.accuracy[mi]))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="2"/>')
        for s, a in zip(scales, result.accuracy[mi]):
            parts.append(f'<circle cx="{_fmt(x_of(s))}" cy="{_fmt(y_of(a))}" '
                         f'r="3" fill="{color}"/>')
        ly = _TOP + 14 + 18 * mi
        lx = _W - _RIGHT + 16
        parts.append(f'<line x1="{_fmt(lx)}" y1="{_fmt(ly - 4)}" '
                     f'x2="{_fmt(lx + 22)}" y2="{_fmt(ly - 4)}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{_fmt(lx + 28)}" y="{_fmt(ly)}" '
                     f'font-family="sans-serif" font-size="12">{name}</text>')
    parts.append("</svg>")
    atomic_write_text(path, "\n".join(parts) + "\n")
