"""Matplotlib figure rendering for training and evaluation reports.

All figures are written to files (Agg backend); nothing opens a display.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import time_to_threshold


def save_training_curves(log, path, target=0.60):
    """Loss curve and validation mIoU curve with the target threshold marked."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    steps = [e.step for e in log.entries]
    ax1.plot(steps, log.losses(), lw=0.8, color="tab:blue")
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.set_title("training loss")

    vals = log.validations()
    if vals:
        vs, vm, _ = zip(*vals)
        ax2.plot(vs, vm, marker="o", ms=3, color="tab:orange")
    ax2.axhline(target, color="gray", lw=0.8, ls="--")
    crossing = time_to_threshold(log, target)
    if crossing:
        ax2.axvline(crossing[0], color="tab:red", lw=0.8, ls=":")
        ax2.annotate(f"step {crossing[0]}", (crossing[0], target),
                     textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax2.set_xlabel("step")
    ax2.set_ylabel("val mIoU")
    ax2.set_ylim(0, 1)
    ax2.set_title(f"validation mIoU (target {target:.2f})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_convergence_comparison(logs, path, target=0.60):
    """Validation mIoU curves of several runs side by side.

    ``logs`` maps a label to a TrainLog; each run's first crossing of the
    target is marked.
    """
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for label, log in logs.items():
        vals = log.validations()
        if not vals:
            continue
        vs, vm, _ = zip(*vals)
        (line,) = ax.plot(vs, vm, marker="o", ms=3, label=label)
        crossing = time_to_threshold(log, target)
        if crossing:
            ax.plot([crossing[0]], [target], marker="o", ms=9, mfc="none",
                    color=line.get_color())
    ax.axhline(target, color="gray", lw=0.8, ls="--")
    ax.set_xlabel("step")
    ax.set_ylabel("val mIoU")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    ax.set_title(f"convergence to mIoU {target:.2f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_bar(rows, path):
    """Bar chart over ablation rows: (name, miou or None) pairs."""
    names = [name for name, _ in rows]
    vals = [v if v is not None else 0.0 for _, v in rows]
    colors = ["tab:blue" if v is not None else "tab:red" for _, v in rows]
    fig, ax = plt.subplots(figsize=(max(5, 0.8 * len(rows)), 3.4))
    ax.bar(range(len(rows)), vals, color=colors)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("mIoU")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_iou_histogram(results, path, small_mask_threshold=0.05):
    """Per-episode IoU histogram, small-support-mask episodes highlighted."""
    small = [r.iou for r in results if r.support_area_fraction < small_mask_threshold]
    rest = [r.iou for r in results if r.support_area_fraction >= small_mask_threshold]
    bins = np.linspace(0, 1, 21)
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    ax.hist([rest, small], bins=bins, stacked=True,
            label=["other", f"support mask < {small_mask_threshold:.0%}"],
            color=["tab:blue", "tab:orange"])
    ax.set_xlabel("episode IoU")
    ax.set_ylabel("episodes")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
