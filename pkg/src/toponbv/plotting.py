"""Figure rendering for reports (Agg backend, files only)."""

from __future__ import annotations

from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps the PNG bytes stable across runs
_PNG_META = {"Software": None}


def plot_heatmap(grid: np.ndarray, path, initial: Optional[tuple] = None,
                 best: Optional[tuple] = None, title: str = "") -> None:
    """Yaw rows by pitch columns; lighter cells have higher predicted reward."""
    fig, ax = plt.subplots(figsize=(3.6, 5.4))
    im = ax.imshow(grid, cmap="gray", origin="upper", aspect="auto")
    if initial is not None:
        ax.scatter([initial[1]], [initial[0]], marker="o", s=40, facecolors="none",
                   edgecolors="tab:blue", linewidths=1.5, label="initial")
    if best is not None:
        ax.scatter([best[1]], [best[0]], marker="x", s=40, c="tab:red", label="NBV")
    ax.set_xlabel("pitch bucket")
    ax.set_ylabel("yaw bucket")
    ax.set_xticks(range(grid.shape[1]))
    ax.set_yticks(range(0, grid.shape[0], 2))
    if title:
        ax.set_title(title, fontsize=9)
    if initial is not None or best is not None:
        ax.legend(loc="upper center", bbox_to_anchor=(0.5, -0.08), ncol=2, fontsize=7, frameon=False)
    fig.colorbar(im, ax=ax, fraction=0.08, label="predicted reward")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def plot_learning_curve(test_rewards: Sequence[float], path, baseline: Optional[float] = None,
                        train_rewards: Optional[Sequence[float]] = None) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    cycles = np.arange(len(test_rewards))
    ax.plot(cycles, test_rewards, color="black", lw=1.4, label="greedy test")
    if train_rewards is not None:
        ax.plot(cycles, train_rewards, color="0.6", lw=1.0, ls="--", label="epsilon-greedy train")
    if baseline is not None:
        ax.axhline(baseline, color="tab:red", lw=1.0, ls=":", label="uniform random")
    ax.set_xlabel("cycle")
    ax.set_ylabel("mean reward")
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
