"""Static figures: loss curves, the sigma heatmap and per-class bars."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_COLUMNS = ("L_pose", "L_context", "L_r", "L_p", "L_video", "L_total")


def plot_loss_curves(rows: list, path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
    epochs = [int(r["epoch"]) for r in rows]
    for col in LOSS_COLUMNS:
        axes[0].plot(epochs, [float(r[col]) for r in rows], label=col)
    axes[0].set_xlabel("epoch")
    axes[0].set_title("losses")
    axes[0].legend(fontsize=7)
    for col in ("pose_mse", "context_top1", "video_quality"):
        axes[1].plot(epochs, [float(r[col]) for r in rows], label=col)
    axes[1].set_xlabel("epoch")
    axes[1].set_title("held-out pretext metrics")
    axes[1].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_sigma_heatmap(rows: list, path, value: str = "downstream_top1") -> Path:
    if value not in rows[0]:
        value = "L_total"
    sp = sorted({float(r["sigma_p"]) for r in rows})
    sc = sorted({float(r["sigma_c"]) for r in rows})
    grid = np.full((len(sp), len(sc)), np.nan)
    for r in rows:
        grid[sp.index(float(r["sigma_p"])), sc.index(float(r["sigma_c"]))] = float(r[value])
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(grid, origin="lower", cmap="viridis")
    ax.set_xticks(range(len(sc)), [f"{v:g}" for v in sc])
    ax.set_yticks(range(len(sp)), [f"{v:g}" for v in sp])
    ax.set_xlabel("sigma_c")
    ax.set_ylabel("sigma_p")
    ax.set_title(value)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_per_class(rows: list, sources: list, path) -> Path:
    names = [r["name"] for r in rows]
    x = np.arange(len(names))
    width = 0.8 / max(len(sources), 1)
    fig, ax = plt.subplots(figsize=(max(6, len(names)), 3.5))
    for i, src in enumerate(sources):
        ax.bar(x + i * width, [float(r[src]) for r in rows], width, label=src)
    ax.set_xticks(x + 0.4 - width / 2, names, rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("top-1")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
