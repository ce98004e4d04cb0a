"""Static figures for solver runs. Uses the Agg canvas directly, no pyplot state."""

from __future__ import annotations

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

PALETTE = np.array([
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127),
    (188, 189, 34), (23, 190, 207), (174, 199, 232), (255, 187, 120),
    (152, 223, 138), (255, 152, 150), (197, 176, 213), (219, 219, 141),
], dtype=np.uint8)

# PNG metadata without a version stamp keeps output byte-stable
_META = {"Software": None}


def _figure(size=(4.0, 3.0)) -> Figure:
    fig = Figure(figsize=size, dpi=100)
    FigureCanvasAgg(fig)
    return fig


def colorize(labels: np.ndarray, ties: np.ndarray) -> np.ndarray:
    """RGB raster in display order (top row first); ties are black."""
    rgb = PALETTE[labels % len(PALETTE)]
    rgb[ties] = 0
    return rgb[::-1]


def plot_phi_trace(trace, path, phi_tol: float | None = None) -> None:
    fig = _figure()
    ax = fig.add_subplot()
    values = np.asarray(trace, dtype=float)
    steps = np.arange(values.size)
    positive = values > 0
    ax.semilogy(steps[positive], values[positive], lw=1.2, color="C0")
    if phi_tol is not None:
        ax.axhline(phi_tol, color="0.4", ls="--", lw=0.8, label="phi_tol")
        ax.legend(frameon=False, fontsize=8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("sum of squared excess")
    fig.tight_layout()
    fig.savefig(path, metadata=_META)


def plot_partition(labels, ties, extent, sites, path) -> None:
    """Region map with site markers; ``extent`` is ``(x0, x1, y0, y1)``."""
    fig = _figure((4.0, 4.0))
    ax = fig.add_subplot()
    ax.imshow(colorize(labels, ties), extent=extent, interpolation="nearest")
    pts = np.array([s.position for s in sites])
    ax.scatter(pts[:, 0], pts[:, 1], s=14, c="white", edgecolors="black", linewidths=0.6)
    ax.set_xlim(extent[0], extent[1])
    ax.set_ylim(extent[2], extent[3])
    ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(path, metadata=_META)

