"""Matplotlib renderings of run artifacts (loss curves, benchmarks, heatmaps).

Uses the Agg backend so figures render headlessly; each figure is rasterized
into memory and written atomically next to the delimited outputs.
"""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)
import numpy as np  # noqa: E402

from .output import atomic_write_bytes  # noqa: E402


def _save(fig, path: str | Path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=110, bbox_inches="tight", metadata={"Date": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def plot_loss_curve(path: str | Path, losses: list[float], title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(np.arange(1, len(losses) + 1), losses, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    _save(fig, path)


def plot_benchmark(path: str | Path, results: dict[str, dict[str, float]]) -> None:
    """Bar chart of mean step time per regime with std whiskers."""
    names = list(results)
    means = [results[n]["mean_ms"] for n in names]
    stds = [results[n]["std_ms"] for n in names]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(names, means, yerr=stds, capsize=4, color=["#4878d0", "#ee854a", "#6acc64"][: len(names)])
    ax.set_ylabel("ms / step")
    ax.set_title("optimization step time")
    ax.grid(True, axis="y", alpha=0.3)
    _save(fig, path)


def plot_heatmap(path: str | Path, matrix: np.ndarray, title: str = "layer similarity",
                 split: int | None = None) -> None:
    """Square heatmap of a [0,1] matrix; optional partition boundary overlay."""
    m = np.asarray(matrix)
    fig, ax = plt.subplots(figsize=(4.6, 4.2))
    im = ax.imshow(m, vmin=0.0, vmax=1.0, cmap="viridis", origin="lower")
    if split is not None and 0 < split < m.shape[0]:
        for f in (ax.axvline, ax.axhline):
            f(split - 0.5, color="white", lw=1.4, ls="--")
    ax.set_xlabel("layer")
    ax.set_ylabel("layer")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.85)
    _save(fig, path)
