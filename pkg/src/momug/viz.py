"""Figure rendering for generated motions, training logs and eval reports.

Every CLI path that writes delimited output can drop a PNG next to it;
rendering always goes through the Agg backend so it works headless."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_motion_plot(frames: np.ndarray, path, title: str = None):
    """Per-channel trajectory plot of one motion clip."""
    frames = np.asarray(frames)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for k in range(frames.shape[1]):
        ax.plot(frames[:, k], lw=1.2, label=f"dim {k}")
    ax.set_xlabel("frame")
    ax.set_ylabel("feature value")
    if title:
        ax.set_title(title, fontsize=10)
    ax.legend(fontsize=7, ncol=2, loc="upper right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_training_curves(records, path):
    """Loss components and learning rate over training steps.

    `records` is a list of dicts with step/lm_loss/ddpm_loss/total/lr keys
    (the training log JSONL rows)."""
    steps = [r["step"] for r in records]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    ax1.plot(steps, [r["total"] for r in records], lw=1.0, label="total")
    ax1.plot(steps, [r["ddpm_loss"] for r in records], lw=1.0, label="ddpm")
    ax1.plot(steps, [r["lm_loss"] for r in records], lw=1.0, label="lm")
    ax1.set_yscale("log")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax1.grid(alpha=0.3)
    ax2.plot(steps, [r["lr"] for r in records], lw=1.0, color="tab:red")
    ax2.set_ylabel("learning rate")
    ax2.set_xlabel("step")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_report_figure(report: dict, path):
    """Two-panel summary of an eval report: retrieval and caption metrics."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    rp = [report["r_precision_top1"], report["r_precision_top2"],
          report["r_precision_top3"]]
    ax1.bar(["top1", "top2", "top3"], rp, color="tab:blue")
    ax1.set_ylim(0, 1)
    ax1.set_title("retrieval precision (generated)")
    ax1.axhline(3 / 32, color="gray", ls="--", lw=0.8, label="top3 chance")
    ax1.legend(fontsize=8)
    text_metrics = {k: report[k] for k in ("bleu1", "bleu4", "rouge_l")}
    ax2.bar(list(text_metrics), list(text_metrics.values()), color="tab:green")
    ax2.set_ylim(0, 1)
    ax2.set_title(
        f"caption metrics (cider={report['cider']:.2f})\n"
        f"fid={report['fid']:.3f}  mm_dist={report['mm_dist']:.3f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
