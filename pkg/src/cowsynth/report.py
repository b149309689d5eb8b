"""Static plots: loss curves, uncertainty trajectories, case montages, ablation."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

log = logging.getLogger(__name__)


def plot_loss_curves(rows: list[dict], phase: int, path: str | Path) -> Path | None:
    rows = [r for r in rows if r["phase"] == phase]
    if not rows:
        return None
    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    keys = ["l_recon"] if phase == 1 else ["l_seg", "l_loc", "combined"]
    for k in keys + ["val_loss"]:
        ax.plot(epochs, [r[k] for r in rows], marker="o", label=k)
    if phase == 2:
        ax2 = ax.twinx()
        ax2.plot(epochs, [r["val_dice"] for r in rows], "k--", label="val_dice")
        ax2.set_ylabel("validation Dice")
        ax2.legend(loc="center right")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(f"Phase {phase}")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_sigma_trajectory(rows: list[dict], path: str | Path) -> Path | None:
    rows = [r for r in rows if r["phase"] == 2]
    if not rows:
        log.info("no phase-2 rows in the training log; skipping the sigma^2 plot")
        return None
    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(epochs, [r["sigma1_sq"] for r in rows], marker="o", label="sigma1^2 (segmentation)")
    ax.semilogy(epochs, [r["sigma2_sq"] for r in rows], marker="s", label="sigma2^2 (local)")
    ax.set_xlabel("epoch")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def pick_cases(dices: dict[str, float]) -> dict[str, str]:
    """Best, median and worst case ids by Dice."""
    order = sorted(dices, key=lambda k: (dices[k], k))
    return {"worst": order[0], "median": order[(len(order) - 1) // 2], "best": order[-1]}


def plot_montage(panels: dict[str, dict[str, np.ndarray]], path: str | Path) -> Path:
    """``panels`` maps a row label to {column title: 2D image}."""
    cols = list(next(iter(panels.values())))
    fig, axes = plt.subplots(len(panels), len(cols), figsize=(3 * len(cols), 3 * len(panels)), squeeze=False)
    for i, (label, images) in enumerate(panels.items()):
        for j, title in enumerate(cols):
            ax = axes[i, j]
            ax.imshow(images[title], cmap="gray", vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(title)
            if j == 0:
                ax.set_ylabel(label)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_ablation(rows, path: str | Path) -> Path:
    labels = [r.radius for r in rows]
    dice = [r.dice for r in rows]
    ci = [r.dice_ci for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(range(len(rows)), dice, yerr=ci, fmt="o-", capsize=3)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels)
    ax.set_xlabel("dilation radius (px); 'none' = no local attention mask")
    ax.set_ylabel("test Dice")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def read_case_dices(path: str | Path) -> dict[str, float]:
    with Path(path).open() as fh:
        return {r["case_id"]: float(r["dice"]) for r in csv.DictReader(fh)}
