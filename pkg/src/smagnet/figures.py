"""Matplotlib rendering for run artifacts (always alongside the CSV/JSON).

Figures are a convenience view of the delimited outputs, never the source
of truth; every plot here can be regenerated from the CSVs next to it.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_WATER = "#1f6fb4"
_LAND = "#c2803e"


def _save(fig, path) -> None:
    tmp = f"{path}.tmp"
    fig.savefig(tmp, format="png", dpi=110, bbox_inches="tight")
    plt.close(fig)
    os.replace(tmp, path)


def loss_curves(history: list[dict], path) -> None:
    ep = [r["epoch"] for r in history]
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.plot(ep, [r["train_loss"] for r in history], label="train", color=_LAND)
    ax.plot(ep, [r["val_loss_total"] for r in history], label="val total", color=_WATER)
    ax.plot(ep, [r["val_loss_sar"] for r in history], label="val sar", ls="--", lw=1)
    ax.plot(ep, [r["val_loss_fused"] for r in history], label="val fused", ls=":", lw=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    _save(fig, path)


def robustness_curve(rows: list[dict], path, label: str = "") -> None:
    r = [row["ratio"] * 100 for row in rows]
    mean = np.array([row["mean_iou"] for row in rows])
    std = np.array([row["std_iou"] for row in rows])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(r, mean, marker="o", color=_WATER, label=label or None)
    ax.fill_between(r, mean - std, mean + std, alpha=0.2, color=_WATER)
    ax.set_xlabel("missing MSI (%)")
    ax.set_ylabel("test IoU")
    ax.set_xticks(r)
    ax.grid(alpha=0.3)
    if label:
        ax.legend()
    _save(fig, path)


def misclass_histograms(hists: dict, path) -> None:
    fig, axes = plt.subplots(1, len(hists), figsize=(6 * len(hists), 4))
    for ax, (name, (edges, fn, fp)) in zip(np.atleast_1d(axes), sorted(hists.items())):
        centers = 0.5 * (edges[:-1] + edges[1:])
        width = 0.42 * (edges[1] - edges[0])
        ax.bar(centers - width / 2, fn, width=width, label="FN", color=_WATER)
        ax.bar(centers + width / 2, fp, width=width, label="FP", color=_LAND)
        ax.set_xlabel(name)
        ax.set_ylabel("misclassified pixels")
        ax.legend()
        ax.grid(alpha=0.3, axis="y")
    _save(fig, path)


def gate_pyramid(entries: dict[str, np.ndarray], path) -> None:
    """Gate / mask / SMG panels per level from a diagnostics container."""
    levels = sorted({int(k.split(".")[1][5:]) for k in entries if k.startswith("smg.level")})
    fig, axes = plt.subplots(len(levels), 3, figsize=(7.5, 2.4 * len(levels)))
    axes = np.atleast_2d(axes)
    for row, lvl in enumerate(levels):
        for col, part in enumerate(("gate", "mask", "smg")):
            img = entries[f"smg.level{lvl}.{part}"][0]
            ax = axes[row, col]
            im = ax.imshow(img, vmin=0.0, vmax=1.0, cmap="viridis", interpolation="nearest")
            ax.set_title(f"level {lvl} {part}", fontsize=9)
            ax.set_xticks([])
            ax.set_yticks([])
    fig.colorbar(im, ax=axes.ravel().tolist(), shrink=0.6)
    _save(fig, path)


def mse_map(mse: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4.4))
    im = ax.imshow(mse, cmap="magma", interpolation="nearest")
    ax.set_title("decoder divergence (per-pixel MSE)")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, shrink=0.8)
    _save(fig, path)


def report_bars(rows: list[dict], path) -> None:
    """Pooled test IoU per run for the comparison table."""
    names = [r["run"] for r in rows]
    ious = [float(r["iou"]) if r["iou"] != "" else np.nan for r in rows]
    fig, ax = plt.subplots(figsize=(max(5, 1.1 * len(rows)), 4))
    ax.bar(range(len(rows)), ious, color=_WATER)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("test IoU")
    ax.grid(alpha=0.3, axis="y")
    _save(fig, path)


def report_robustness(curves: list[tuple[str, list[dict]]], path) -> None:
    fig, ax = plt.subplots(figsize=(6.5, 4))
    for name, rows in curves:
        ax.plot(
            [row["ratio"] * 100 for row in rows],
            [row["mean_iou"] for row in rows],
            marker="o",
            label=name,
        )
    ax.set_xlabel("missing MSI (%)")
    ax.set_ylabel("test IoU")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    _save(fig, path)
