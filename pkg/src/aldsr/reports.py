"""Figure rendering for the delimited outputs.

Whenever the CLI writes a CSV (training loss log, evaluation metrics), a
matplotlib PNG with the same stem is rendered next to it.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

__all__ = ["save_loss_curve", "save_metric_chart"]


def _read_loss_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            rows.append(
                (int(rec["iter"]), int(rec["epoch"]), float(rec["lr"]), float(rec["l1"]))
            )
    return rows


def save_loss_curve(rows_or_csv, png_path):
    """Render the L1 loss trajectory; lr changes are marked."""
    rows = _read_loss_csv(rows_or_csv) if isinstance(rows_or_csv, (str, Path)) else list(rows_or_csv)
    fig, ax = plt.subplots(figsize=(7, 4))
    if rows:
        its = [r[0] for r in rows]
        losses = [r[3] for r in rows]
        ax.plot(its, losses, lw=0.9, color="tab:blue")
        lrs = [r[2] for r in rows]
        for i in range(1, len(lrs)):
            if lrs[i] != lrs[i - 1]:
                ax.axvline(its[i], color="tab:red", ls="--", lw=0.8)
                ax.text(its[i], max(losses), f" lr={lrs[i]:g}", fontsize=8, color="tab:red")
        if min(losses) > 0:
            ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("L1 loss")
    ax.set_title("training loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_path, dpi=110)
    plt.close(fig)


def save_metric_chart(report, png_path):
    """Per-image PSNR and SSIM bars with mean lines."""
    names = [r.name for r in report.records]
    psnrs = [r.psnr_db for r in report.records]
    ssims = [r.ssim for r in report.records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(max(7, 1.1 * len(names) + 3), 4))
    xs = range(len(names))
    ax1.bar(xs, psnrs, color="tab:blue")
    ax1.axhline(report.mean_psnr_db, color="tab:red", ls="--", lw=1,
                label=f"mean {report.mean_psnr_db:.2f} dB")
    ax1.set_xticks(list(xs), names, rotation=45, ha="right", fontsize=8)
    ax1.set_ylabel("PSNR (dB)")
    ax1.legend(fontsize=8)
    ax2.bar(xs, ssims, color="tab:green")
    ax2.axhline(report.mean_ssim, color="tab:red", ls="--", lw=1,
                label=f"mean {report.mean_ssim:.4f}")
    ax2.set_xticks(list(xs), names, rotation=45, ha="right", fontsize=8)
    ax2.set_ylabel("SSIM")
    ax2.set_ylim(0, 1.05)
    ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path, dpi=110)
    plt.close(fig)
