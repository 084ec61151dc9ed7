"""Figure and delimited-text rendering for training and evaluation reports."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def write_loss_report(report, csv_path, png_path) -> None:
    """Loss series as CSV plus a loss-curve figure."""
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss_total", "loss_rec", "loss_img"])
        for n, (t, r, i) in enumerate(zip(report.loss_total, report.loss_rec, report.loss_img)):
            writer.writerow([n, f"{t:.6g}", f"{r:.6g}", f"{i:.6g}"])
    fig, axis = plt.subplots(figsize=(7, 4))
    steps = np.arange(len(report.loss_total))
    axis.plot(steps, report.loss_total, label="total")
    axis.plot(steps, report.loss_rec, label="feature round-trip")
    axis.plot(steps, report.loss_img, label="image reconstruction")
    axis.set_xlabel("step")
    axis.set_ylabel("loss")
    axis.set_yscale("log")
    axis.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def write_metrics_report(metrics, csv_path, png_path) -> None:
    """Per-class IoU as CSV plus a bar chart; absent classes are skipped."""
    rows = [(c["name"], c["iou"]) for c in metrics.to_dict()["per_class"]]
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class", "iou"])
        for name, iou in rows:
            writer.writerow([name, "" if iou is None else f"{iou:.6g}"])
        writer.writerow(["miou", f"{metrics.miou:.6g}"])
    present = [(n, v) for n, v in rows if v is not None]
    fig, axis = plt.subplots(figsize=(max(4, 0.8 * len(present) + 2), 4))
    if present:
        names, values = zip(*present)
        axis.bar(names, values, color="tab:blue")
        axis.axhline(metrics.miou, color="tab:red", linestyle="--",
                     label=f"mIoU = {metrics.miou:.3f}")
        axis.legend()
    axis.set_ylabel("IoU")
    axis.set_ylim(0, 1)
    axis.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
