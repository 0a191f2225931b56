"""Static figures written next to the textual reports."""
from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .traj_data import Trajectory  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}

COLORS = {"dense": "#4c72b0", "sparse": "#dd8452", "recovered": "#55a868", "query": "#c44e52"}


@contextmanager
def style():
    with plt.rc_context(STYLE):
        yield


def plot_overlay(dense: Trajectory, sparse: Trajectory, recovered: Trajectory, path: str | Path,
                 title: str | None = None) -> Path:
    """Dense, sparse and recovered panels side by side with shared axes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with style():
        fig, axes = plt.subplots(1, 3, figsize=(9, 3.1), sharex=True, sharey=True)
        panels = [("Dense traj", dense, COLORS["dense"]),
                  ("Sparse traj", sparse, COLORS["sparse"]),
                  ("Recovered traj", recovered, COLORS["recovered"])]
        for ax, (name, tr, color) in zip(axes, panels):
            ax.plot(tr.xy[:, 0], tr.xy[:, 1], "-", color=color, lw=1.2)
            ax.plot(tr.xy[:, 0], tr.xy[:, 1], "o", color=color, ms=2.5)
            ax.set_title(name)
            ax.set_xlabel("lng")
        inserted = ~np.isin(recovered.times, sparse.times)
        axes[2].plot(recovered.xy[inserted, 0], recovered.xy[inserted, 1], "x", color=COLORS["query"],
                     ms=4, label="inserted")
        axes[2].plot(dense.xy[:, 0], dense.xy[:, 1], "-", color=COLORS["dense"], lw=0.6, alpha=0.5,
                     label="dense")
        axes[2].legend(loc="best", frameon=False)
        axes[0].set_ylabel("lat")
        if title:
            fig.suptitle(title)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_loss_curve(losses: Sequence[float], path: str | Path, window: int = 50) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    losses = np.asarray(losses, float)
    with style():
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(losses, color="0.75", lw=0.6, label="iteration")
        if len(losses) >= window:
            smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
            ax.plot(np.arange(window - 1, len(losses)), smooth, color=COLORS["dense"], label=f"mean of {window}")
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("masked loss")
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_step_histogram(hist: np.ndarray, path: str | Path, bins: int = 50) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    edges = np.linspace(0, len(hist), bins + 1).astype(int)
    counts = [hist[a:b].sum() for a, b in zip(edges[:-1], edges[1:])]
    with style():
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", color=COLORS["dense"], edgecolor="white")
        ax.set_xlabel("diffusion step t")
        ax.set_ylabel("trained count")
        fig.savefig(path)
        plt.close(fig)
    return path
