"""Figure rendering for the report paths: every CSV the CLI writes gets a
matching PNG next to it."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_pr_curve_figure(curve: np.ndarray, path, label: str = "model"):
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.plot(curve[:, 1], curve[:, 0], lw=1.5, label=label)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_training_curves(rows, path):
    """Loss curve, plus test MAE / F-beta when the log has them."""
    epochs = [r[0] for r in rows]
    losses = [r[2] for r in rows]
    has_test = rows and len(rows[0]) >= 5
    fig, axes = plt.subplots(1, 2 if has_test else 1,
                             figsize=(8 if has_test else 4.5, 3.2))
    ax0 = axes[0] if has_test else axes
    ax0.plot(epochs, losses, lw=1.5)
    ax0.set_xlabel("epoch")
    ax0.set_ylabel("train loss")
    ax0.grid(alpha=0.3)
    if has_test:
        ax1 = axes[1]
        ax1.plot(epochs, [r[4] for r in rows], lw=1.5, label="test F-beta")
        ax1.plot(epochs, [r[3] for r in rows], lw=1.5, label="test MAE")
        ax1.set_xlabel("epoch")
        ax1.set_ylim(0, 1)
        ax1.grid(alpha=0.3)
        ax1.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_ablation_figure(summary_rows, path):
    """Grouped bars of F-beta and MAE per variant row."""
    names = [r[0] for r in summary_rows]
    fbetas = [r[1] for r in summary_rows]
    maes = [r[2] for r in summary_rows]
    x = np.arange(len(names))
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax0.bar(x, fbetas, color="#4878b0")
    ax0.set_xticks(x, names, rotation=30, ha="right", fontsize=8)
    ax0.set_ylabel("F-beta")
    ax0.set_ylim(0, 1)
    ax0.grid(axis="y", alpha=0.3)
    ax1.bar(x, maes, color="#b04848")
    ax1.set_xticks(x, names, rotation=30, ha="right", fontsize=8)
    ax1.set_ylabel("MAE")
    ax1.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
