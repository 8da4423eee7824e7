"""Matplotlib renderings of the delimited outputs: loss curves next to the
training log, CMC/AP charts next to the eval files, ablation bars, and
heatmap overlays next to the raw Grad-CAM exports.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

import numpy as np  # noqa: E402


def loss_curves(log_csv, out_png) -> None:
    """Per-component loss trajectories from a training log CSV."""
    with open(log_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        return
    steps = [int(r["step"]) for r in rows]
    fig, (ax, ax_lr) = plt.subplots(
        2, 1, figsize=(7, 5), sharex=True,
        gridspec_kw={"height_ratios": [3, 1]})
    skip = {"step", "phase", "lr"}
    for key in rows[0]:
        if key in skip:
            continue
        pts = [(s, float(r[key])) for s, r in zip(steps, rows) if r[key] != ""]
        if not pts:
            continue
        xs, ys = zip(*pts)
        style = {"linewidth": 2, "color": "black"} if key == "total" else {"alpha": 0.7}
        ax.plot(xs, ys, label=key, **style)
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8, ncol=2)
    ax.grid(alpha=0.3)
    ax_lr.plot(steps, [float(r["lr"]) for r in rows], color="tab:gray")
    ax_lr.set_xlabel("step")
    ax_lr.set_ylabel("lr")
    ax_lr.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def cmc_chart(eval_json, out_png) -> None:
    payload = json.loads(Path(eval_json).read_text(encoding="utf-8"))
    cmc = payload["cmc"]
    ranks = np.arange(1, len(cmc) + 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ranks, cmc, marker="o")
    ax.axhline(payload["mAP"], color="tab:red", linestyle="--",
               label=f"mAP = {payload['mAP']:.3f}")
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate")
    ax.set_ylim(0, 1.05)
    ax.set_xticks(ranks)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def ablation_chart(rows, out_png) -> None:
    """Grouped bars from (name, mAP, rank1) tuples."""
    names = [r[0] for r in rows]
    maps = [r[1] for r in rows]
    rank1 = [r[2] for r in rows]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.bar(x - 0.18, maps, width=0.36, label="mAP")
    ax.bar(x + 0.18, rank1, width=0.36, label="rank-1")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=12)
    ax.set_ylim(0, 1.05)
    ax.grid(axis="y", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def heatmap_figure(image, heat_grid, bbox, out_png) -> None:
    """Original image, patch heat and the blended view side by side."""
    fig, axes = plt.subplots(1, 3, figsize=(7, 4))
    axes[0].imshow(image)
    top, left, h, w = bbox
    axes[0].add_patch(plt.Rectangle((left - 0.5, top - 0.5), w, h,
                                    fill=False, edgecolor="lime", linewidth=1.5))
    axes[0].set_title("input")
    axes[1].imshow(heat_grid, cmap="inferno", vmin=0.0, vmax=1.0)
    axes[1].set_title("patch heat")
    axes[2].imshow(image)
    axes[2].imshow(np.kron(heat_grid, np.ones((image.shape[0] // heat_grid.shape[0],
                                               image.shape[1] // heat_grid.shape[1]))),
                   cmap="inferno", vmin=0.0, vmax=1.0, alpha=0.5)
    axes[2].set_title("overlay")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
