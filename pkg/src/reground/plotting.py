"""Figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

MODE_STYLE = {
    "sequential": dict(color="tab:red", marker="o", label="sequential (GLIGEN)"),
    "parallel": dict(color="tab:blue", marker="s", label="parallel (rewired)"),
    "no_ca": dict(color="tab:gray", marker="^", label="no cross-attention"),
    "baseline": dict(color="black", marker="x", label="baseline"),
}


def plot_tradeoff(points, path: Path, title: str | None = None) -> Path:
    """Textual score against spatial score, one curve per mode, points labelled by gamma."""
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    for mode in dict.fromkeys(p.mode for p in points):
        pts = sorted((p for p in points if p.mode == mode), key=lambda p: p.gamma)
        style = MODE_STYLE.get(mode, dict(label=mode))
        ax.plot([p.spatial_mean for p in pts], [p.textual_mean for p in pts], lw=1.2, ms=4, **style)
        for p in pts:
            ax.annotate(f"{p.gamma:g}", (p.spatial_mean, p.textual_mean), fontsize=6,
                        xytext=(3, 3), textcoords="offset points", color=style.get("color"))
    ax.set_xlabel("spatial score (box IoU match)")
    ax.set_ylabel("textual score (prompt attributes)")
    if title:
        ax.set_title(title, fontsize=9)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def plot_loss(rows: Sequence[tuple[int, float]], path: Path, heldout: Sequence[tuple[int, float]] = ()) -> Path:
    fig, ax = plt.subplots(figsize=(4.8, 3.0))
    if rows:
        ax.plot(*zip(*rows), lw=1, label="train")
    if heldout:
        ax.plot(*zip(*heldout), lw=1, ls="--", label="held-out")
    ax.set_xlabel("step")
    ax.set_ylabel("noise MSE")
    ax.set_yscale("log")
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def image_grid(images: Sequence[np.ndarray], scale: int = 4, pad: int = 2) -> np.ndarray:
    """Side-by-side strip of ``(H, W, 3)`` images, nearest-upscaled, white separators."""
    tiles = [np.kron(np.asarray(im), np.ones((scale, scale, 1))) for im in images]
    h = tiles[0].shape[0]
    sep = np.ones((h, pad, 3))
    parts = []
    for i, t in enumerate(tiles):
        if i:
            parts.append(sep)
        parts.append(t)
    return np.concatenate(parts, axis=1)


def plot_compare(images: Sequence[np.ndarray], titles: Sequence[str], path: Path, suptitle: str | None = None) -> Path:
    fig, axes = plt.subplots(1, len(images), figsize=(1.6 * len(images), 1.9))
    for ax, im, t in zip(np.atleast_1d(axes), images, titles):
        ax.imshow(np.clip(im, 0, 1), interpolation="nearest")
        ax.set_title(t, fontsize=7)
        ax.axis("off")
    if suptitle:
        fig.suptitle(suptitle, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)
