"""SVG figures for security curves and feature projections."""
import logging
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from modguard.schemas.models import SecurityCurve  # noqa: E402

logger = logging.getLogger(__name__)

# Fixed element ids and no timestamp, so reruns write identical files.
matplotlib.rcParams["svg.hashsalt"] = "modguard"
SVG_METADATA = {"Date": None, "Creator": None}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)
    logger.debug(f"Wrote figure {path}")
    return path


def plot_curves(curves: Sequence[SecurityCurve], path: Path, title: Optional[str] = None) -> Path:
    """Accuracy against PNR, one line per defense; the clean point is drawn as a dashed level."""
    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    for curve in curves:
        attacked = [p for p in curve.points if np.isfinite(p.pnr_db)]
        clean = [p for p in curve.points if not np.isfinite(p.pnr_db)]
        (line,) = ax.plot(
            [p.pnr_db for p in attacked], [p.accuracy for p in attacked], marker="o", label=curve.variant
        )
        if clean and attacked:
            ax.axhline(clean[0].accuracy, color=line.get_color(), linestyle="--", linewidth=0.8)
    ax.set_xlabel("PNR (dB)")
    ax.set_ylabel("Accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize="small")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_projection(
    coords: np.ndarray,
    labels: np.ndarray,
    class_names: Sequence[str],
    path: Path,
    title: Optional[str] = None,
) -> Path:
    """Scatter of the first two principal components coloured by class."""
    fig, ax = plt.subplots(figsize=(6.0, 5.0))
    cmap = plt.get_cmap("tab20")
    for k, name in enumerate(class_names):
        mask = labels == k
        if np.any(mask):
            ax.scatter(coords[mask, 0], coords[mask, 1], s=6, color=cmap(k % 20), label=name)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.legend(loc="best", fontsize="x-small", markerscale=2)
    if title:
        ax.set_title(title)
    return _save(fig, path)
