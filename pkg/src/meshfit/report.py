"""Delimited outputs and the figures rendered next to them.

Fit runs emit a loss-trace CSV plus a loss-curve PNG; evaluation runs
emit a per-view metrics CSV plus a bar-chart PNG.  All figures use the
Agg backend so report generation works headless.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

LOSS_FIELDS = ("stage", "step", "lr", "total", "rgb", "mask", "lpips", "depth", "normal", "reg")


def write_loss_csv(path, stage1_trace, stage2_trace) -> Path:
    """One row per optimization step; empty cells for absent terms."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_FIELDS, restval="", lineterminator="\n")
        writer.writeheader()
        for stage, trace in ((1, stage1_trace), (2, stage2_trace)):
            for row in trace:
                writer.writerow({"stage": stage, **row})
    return path


def read_loss_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = []
        for record in csv.DictReader(fh):
            rows.append(
                {
                    key: (int(value) if key in ("stage", "step") else float(value))
                    for key, value in record.items()
                    if value != ""
                }
            )
    return rows


def plot_loss_curves(stage1_trace, stage2_trace, png_path) -> Path:
    """Loss-vs-step curves for both stages, written as a PNG."""
    png_path = Path(png_path)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    for ax, trace, title in (
        (axes[0], stage1_trace, "stage 1 (volume)"),
        (axes[1], stage2_trace, "stage 2 (mesh)"),
    ):
        if trace:
            ax.plot([row["step"] for row in trace], [row["total"] for row in trace], lw=0.8)
            ax.set_yscale("log")
        ax.set_title(title)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
    fig.tight_layout()
    fig.savefig(png_path, dpi=110)
    plt.close(fig)
    return png_path


VIEW_FIELDS = ("view", "psnr", "ssim")


def write_view_metrics(report_dir, per_view) -> tuple:
    """views.csv + views.png inside report_dir; returns both paths.

    `per_view` is a list of {view, psnr, ssim} dicts.
    """
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    csv_path = report_dir / "views.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=VIEW_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in per_view:
            writer.writerow({key: row[key] for key in VIEW_FIELDS})

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    views = [row["view"] for row in per_view]
    for ax, key in ((axes[0], "psnr"), (axes[1], "ssim")):
        ax.bar(views, [row[key] for row in per_view], color="#4878a8")
        ax.set_title(f"per-view {key}")
        ax.set_xlabel("view")
        ax.set_ylabel(key)
    fig.tight_layout()
    png_path = report_dir / "views.png"
    fig.savefig(png_path, dpi=110)
    plt.close(fig)
    return csv_path, png_path
