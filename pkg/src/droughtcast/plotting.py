"""Optional PNG figures for report directories (skill map, horizon curve)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or version strings, so reruns are byte-identical
_PNG_METADATA = {"Software": None}


def plot_r2_map(map_: np.ndarray, path, title: str = "R² per cell") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    shown = np.ma.masked_invalid(map_)
    im = ax.imshow(shown, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
    fig.colorbar(im, ax=ax, label="R²")
    ax.set_title(title)
    ax.set_xlabel("column (west to east)")
    ax.set_ylabel("row (north to south)")
    fig.savefig(path, metadata=_PNG_METADATA)
    plt.close(fig)
    return Path(path)


def plot_horizon(curve, path, title: str = "Mean R² by horizon") -> Path:
    ks = [k for k, _ in curve]
    vals = [v for _, v in curve]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ks, vals, marker="o")
    ax.set_xticks(ks)
    ax.set_xlabel("horizon k (months)")
    ax.set_ylabel("mean R²")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_METADATA)
    plt.close(fig)
    return Path(path)
