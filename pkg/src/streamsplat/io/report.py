"""Run reports: quality curves as PNG figures plus a CSV of the records."""

from __future__ import annotations

import csv
import math
import os
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .metrics import MetricsRecord

CSV_FIELDS = [
    "frame",
    "trained",
    "n_gaussians",
    "loss_total",
    "loss_l1",
    "loss_depth",
    "loss_knowledge",
    "loss_scale_reg",
    "psnr",
    "ssim",
    "miou",
    "macc",
    "ate",
]


def write_report(out_dir: str, records: List[MetricsRecord]) -> str:
    report_dir = os.path.join(out_dir, "report")
    os.makedirs(report_dir, exist_ok=True)

    with open(os.path.join(report_dir, "metrics.csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for rec in records:
            row = {k: getattr(rec, k) for k in CSV_FIELDS}
            if isinstance(row["psnr"], float) and math.isinf(row["psnr"]):
                row["psnr"] = "inf"
            writer.writerow(row)

    frames = [r.frame for r in records]

    def curve(name, values, ylabel, color="tab:blue"):
        xs = [f for f, v in zip(frames, values) if v is not None and not (
            isinstance(v, float) and math.isinf(v))]
        ys = [v for v in values if v is not None and not (isinstance(v, float) and math.isinf(v))]
        fig, ax = plt.subplots(figsize=(6, 3.2))
        if xs:
            ax.plot(xs, ys, color=color, lw=1.5)
        ax.set_xlabel("frame")
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(os.path.join(report_dir, name), dpi=120)
        plt.close(fig)

    curve("psnr.png", [r.psnr for r in records], "held-out PSNR (dB)")
    curve("ssim.png", [r.ssim for r in records], "held-out SSIM", "tab:green")
    curve("miou.png", [r.miou for r in records], "held-out mIoU", "tab:orange")
    curve("loss.png", [r.loss_total for r in records], "training loss", "tab:red")
    curve("gaussians.png", [float(r.n_gaussians) for r in records], "# Gaussians", "tab:purple")
    if any(r.ate is not None for r in records):
        curve("ate.png", [r.ate for r in records], "ATE (m)", "tab:brown")
    return report_dir
