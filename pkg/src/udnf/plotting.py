"""Figures written next to the CSV outputs (matplotlib, Agg backend)."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def loss_curve(history: list[dict], path) -> None:
    it = [r["iter"] for r in history]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3))
    axes[0].plot(it, [r["recon_loss"] for r in history])
    axes[0].set_yscale("log")
    axes[0].set_title("reconstruction loss")
    axes[1].plot(it, [r["ce_loss"] for r in history], color="tab:orange")
    axes[1].set_title("cross entropy")
    axes[2].plot(it, [r["psnr_train"] for r in history], color="tab:green")
    acc = [r["accuracy"] for r in history]
    if not all(a != a for a in acc):  # any non-NaN
        ax2 = axes[2].twinx()
        ax2.plot(it, acc, color="tab:red", alpha=0.6)
        ax2.set_ylim(0, 1)
        ax2.set_ylabel("accuracy", color="tab:red")
    axes[2].set_title("train PSNR (dB)")
    for ax in axes:
        ax.set_xlabel("iteration")
    _save(fig, path)


def image_grid(images, path, titles=None, ncols: int = 8) -> None:
    """``images``: sequence of (H, W, 3) arrays in [0, 1]."""
    n = len(images)
    ncols = max(1, min(ncols, n))
    nrows = math.ceil(n / ncols)
    fig, axes = plt.subplots(nrows, ncols, figsize=(1.6 * ncols, 1.7 * nrows), squeeze=False)
    for k, ax in enumerate(axes.flat):
        ax.axis("off")
        if k < n:
            ax.imshow(np.clip(np.asarray(images[k]), 0, 1), interpolation="nearest")
            if titles is not None:
                ax.set_title(str(titles[k]), fontsize=7)
    _save(fig, path)


def camera_centers(path, candidates=None, selected=None, gt=None, title: str = "") -> None:
    """Top and side views of candidate, selected and ground-truth camera centers.

    ``candidates``: (V, K, 3); ``selected``: (V, 3); ``gt``: (V, 3).
    """
    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    for ax, (i, j, lab) in zip(axes, [(0, 2, "x-z"), (0, 1, "x-y")]):
        if candidates is not None:
            c = np.asarray(candidates).reshape(-1, 3)
            ax.scatter(c[:, i], c[:, j], s=6, c="0.7", label="candidates")
        if selected is not None:
            s = np.asarray(selected)
            ax.scatter(s[:, i], s[:, j], s=14, c="tab:blue", label="selected")
        if gt is not None:
            g = np.asarray(gt)
            ax.scatter(g[:, i], g[:, j], s=14, marker="x", c="tab:red", label="ground truth")
        ax.scatter([0], [0], marker="+", c="k")
        ax.set_aspect("equal")
        ax.set_title(f"{title} {lab}".strip())
    axes[0].legend(fontsize=7, loc="best")
    _save(fig, path)


def trajectory(steps, path, every: int = 10) -> None:
    """Two rows: ``x_{t-1}`` (mapped to [0, 1]) and ``x0_hat`` at every ``every``-th step."""
    picks = [s for k, s in enumerate(steps) if k % every == 0 or k == len(steps) - 1]
    fig, axes = plt.subplots(2, len(picks), figsize=(1.4 * len(picks), 3.0), squeeze=False)
    for col, s in enumerate(picks):
        prev = (np.asarray(s.x_prev) + 1.0) * 0.5
        axes[0, col].imshow(np.clip(prev, 0, 1), interpolation="nearest")
        axes[1, col].imshow(np.clip(np.asarray(s.x0_hat), 0, 1), interpolation="nearest")
        axes[0, col].set_title(f"t={s.t}", fontsize=7)
        for r in range(2):
            axes[r, col].axis("off")
    _save(fig, path)


def per_image_metrics(rows: list[dict], path) -> None:
    idx = [str(r["index"]) for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, 0.4 * len(rows)), 3))
    ax.bar(idx, [r["psnr"] for r in rows])
    ax.set_xlabel("view")
    ax.set_ylabel("PSNR (dB)")
    _save(fig, path)


def sweep(rows: list[dict], path, x: str, y: str = "test_psnr", group: str | None = None) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    groups = sorted({r[group] for r in rows}, key=str) if group else [None]
    for g in groups:
        sel = [r for r in rows if group is None or r[group] == g]
        xs = [r[x] for r in sel]
        ax.scatter(xs, [r[y] for r in sel], label=str(g) if g is not None else None)
    if all(isinstance(r[x], (int, float)) for r in rows) and x == "lam":
        ax.set_xscale("log")
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    if group:
        ax.legend(fontsize=7)
    _save(fig, path)
