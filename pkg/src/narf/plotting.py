"""Report figures written next to the JSON/CSV outputs of the CLI."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curve(trace: Sequence[float], path, title: str = "loss", log: bool = True) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(np.arange(len(trace)), trace, lw=1)
        if log and np.all(np.asarray(trace) > 0):
            ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel(title)
        return _save(fig, path)


def mse_histogram(values: Sequence[float], path, threshold: float | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.hist(values, bins=max(5, min(30, len(values))), color="0.4")
        if threshold is not None:
            ax.axvline(threshold, color="tab:red", ls="--", lw=1)
        ax.set_xlabel("per-pixel MSE")
        ax.set_ylabel("frames")
        return _save(fig, path)


def image_rows(rows: Sequence[Sequence[np.ndarray]], titles: Sequence[str], path) -> Path:
    """Grid of images; every row holds one image per title (e.g. observed / rendered / error)."""
    n_rows, n_cols = len(rows), len(titles)
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, axes = plt.subplots(n_rows, n_cols, figsize=(2 * n_cols, 2 * n_rows), squeeze=False)
        for r, row in enumerate(rows):
            for c, img in enumerate(row):
                ax = axes[r, c]
                ax.imshow(np.clip(img, 0, 1), cmap=None if img.ndim == 3 else "magma", interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
                if r == 0:
                    ax.set_title(titles[c])
        return _save(fig, path)


def estimation_traces(loss: Sequence[float], configs: np.ndarray, path, truth=None, names=None) -> Path:
    configs = np.asarray(configs, dtype=float).reshape(len(configs), -1)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(9, 3))
        axes[0].plot(loss, lw=1)
        axes[0].set_yscale("log")
        axes[0].set_xlabel("iteration")
        axes[0].set_ylabel("masked MSE")
        for k in range(configs.shape[1]):
            label = names[k] if names else f"joint {k}"
            line, = axes[1].plot(configs[:, k], lw=1, label=label)
            if truth is not None:
                axes[1].axhline(truth[k], color=line.get_color(), ls="--", lw=0.8)
        axes[1].set_xlabel("iteration")
        axes[1].set_ylabel("configuration")
        if configs.shape[1]:
            axes[1].legend(frameon=False)
        return _save(fig, path)
