"""Figures for predictions, error distributions and training curves."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

ERROR_BIN_DEG = 3.0


def plot_pred_vs_truth(truth_deg, pred_deg, path, title=""):
    """Two 2D histograms (pitch, yaw) of prediction against ground truth, in degrees."""
    truth_deg = np.asarray(truth_deg, dtype=float).reshape(-1, 2)
    pred_deg = np.asarray(pred_deg, dtype=float).reshape(-1, 2)
    fig, axes = plt.subplots(1, 2, figsize=(9, 4.2))
    for ax, k, name in zip(axes, range(2), ("pitch", "yaw")):
        t, p = truth_deg[:, k], pred_deg[:, k]
        lo = float(min(t.min(), p.min())) if len(t) else -1.0
        hi = float(max(t.max(), p.max())) if len(t) else 1.0
        if hi - lo < 1e-6:
            lo, hi = lo - 1.0, hi + 1.0
        ax.hist2d(t, p, bins=30, range=[[lo, hi], [lo, hi]], cmap="viridis")
        ax.plot([lo, hi], [lo, hi], "w--", lw=0.8)
        ax.set_xlabel(f"true {name} (deg)")
        ax.set_ylabel(f"predicted {name} (deg)")
        ax.set_aspect("equal")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_error_boxes(errors_by_variant: dict, path, title="Angular error"):
    names = list(errors_by_variant)
    fig, ax = plt.subplots(figsize=(1.6 * max(len(names), 2) + 1, 4))
    ax.boxplot([np.asarray(errors_by_variant[n]) for n in names], showfliers=True)
    ax.set_xticks(range(1, len(names) + 1), names)
    ax.set_ylabel("angular error (deg)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_error_histogram(errors_by_variant: dict, path, bin_width=ERROR_BIN_DEG):
    """Overlaid error histograms with fixed-width bins starting at zero."""
    top = max((float(np.max(e)) for e in errors_by_variant.values() if len(e)), default=bin_width)
    edges = np.arange(0.0, top + bin_width, bin_width)
    if len(edges) < 2:
        edges = np.array([0.0, bin_width])
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, e in errors_by_variant.items():
        ax.hist(np.asarray(e), bins=edges, histtype="step", lw=1.5, label=name)
    ax.set_xlabel("angular error (deg)")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_history(history, path, title=""):
    """Training loss and validation error against epoch."""
    ep = [r["epoch"] for r in history]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(ep, [r["train_loss"] for r in history], "o-", ms=3, color="tab:blue", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax1.set_yscale("log")
    val = [r["val_mean_deg"] for r in history]
    if any(np.isfinite(val)):
        ax2 = ax1.twinx()
        ax2.plot(ep, val, "s-", ms=3, color="tab:orange", label="val error")
        ax2.set_ylabel("val mean error (deg)")
    if title:
        ax1.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
