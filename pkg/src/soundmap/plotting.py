"""Matplotlib figures for run reports (Agg backend, files only)."""

from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .mapping import ScoreRaster  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps the bytes stable across runs
    fig.savefig(path, dpi=100, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def plot_loss_curves(history: list[dict], path: str | os.PathLike) -> Path:
    steps = [h["step"] for h in history]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 3.5))
    ax0.plot(steps, [h["total"] for h in history], color="k", lw=1.2, label="total")
    for pair in ("at", "ai", "it"):
        ax0.plot(steps, [h[f"match_{pair}"] for h in history], lw=0.8, label=f"match {pair}")
    ax0.set_yscale("log")
    ax0.set_xlabel("step")
    ax0.legend(fontsize=7)
    ax1.plot(steps, [h["lr"] for h in history], color="tab:gray")
    ax1.set_xlabel("step")
    ax1.set_ylabel("learning rate")
    fig.tight_layout()
    return _save(fig, path)


def plot_rank_histogram(ranks: np.ndarray, n: int, path: str | os.PathLike, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(np.asarray(ranks), bins=np.arange(1, n + 2) - 0.5, color="tab:blue")
    ax.axvline(np.ceil(0.1 * n) + 0.5, color="tab:red", ls="--", lw=1, label="top 10%")
    ax.set_xlabel("rank of ground truth")
    ax.set_ylabel("queries")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_raster(raster: ScoreRaster, path: str | os.PathLike, colormap: str = "viridis",
                title: str = "") -> Path:
    """Map figure with lon/lat axes and a colorbar in the raster's recorded value range."""
    lat_min, lat_max, lon_min, lon_max = raster.bbox
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(raster.values, cmap=colormap, extent=(lon_min, lon_max, lat_min, lat_max),
                   origin="upper", vmin=0.0 if raster.normalized else None,
                   vmax=1.0 if raster.normalized else None, interpolation="nearest", aspect="auto")
    cb = fig.colorbar(im, ax=ax)
    if raster.normalized:
        lo, hi = raster.value_range
        cb.set_label(f"{raster.kind} (range {lo:.3g} .. {hi:.3g})")
    else:
        cb.set_label(raster.kind)
    ax.set_xlabel("lon")
    ax.set_ylabel("lat")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)
