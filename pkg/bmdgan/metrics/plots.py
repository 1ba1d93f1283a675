"""
Static report figures.
"""
import logging
import os
from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..imaging.actions import fit_linear  # noqa: E402
from .data import EvaluationReport  # noqa: E402

logger = logging.getLogger(__name__)

SCATTER_FILENAME = "bmd_scatter.png"
ABS_ERROR_FILENAME = "bmd_abs_error.png"
DICE_FILENAME = "dice_per_threshold.png"


def plot_bmd_scatter(report: EvaluationReport, path: Path) -> Path:
    true_dxa = np.array([record.true_dxa for record in report.per_case_records])
    pred_dxa = np.array([record.pred_dxa for record in report.per_case_records])
    lo = float(min(true_dxa.min(), pred_dxa.min()))
    hi = float(max(true_dxa.max(), pred_dxa.max()))

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot([lo, hi], [lo, hi], color="gray", linestyle="--", linewidth=1, label="identity")
    ax.scatter(true_dxa, pred_dxa, s=16, label=f"decomposition (PCC {report.pcc:.3f})")
    if true_dxa.size >= 2 and np.ptp(true_dxa) > 0:
        fit = fit_linear(true_dxa, pred_dxa)
        ax.plot([lo, hi], [fit.predict(lo), fit.predict(hi)], linewidth=1, label="fit")
    if report.baseline is not None:
        baseline_dxa = np.array([record.baseline_dxa for record in report.per_case_records])
        ax.scatter(
            true_dxa,
            baseline_dxa,
            s=16,
            marker="x",
            label=f"direct regression (PCC {report.baseline.pcc:.3f})",
        )
    ax.set_xlabel("True DXA-BMD (g/cm²)")
    ax.set_ylabel("Predicted DXA-BMD (g/cm²)")
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_abs_error(report: EvaluationReport, path: Path) -> Path:
    records = report.per_case_records
    data = [[abs(record.pred_dxa - record.true_dxa) for record in records]]
    labels = ["decomposition"]
    if report.baseline is not None:
        data.append([abs(record.baseline_dxa - record.true_dxa) for record in records])  # type: ignore
        labels.append("direct regression")

    fig, ax = plt.subplots(figsize=(4, 5))
    ax.boxplot(data)
    ax.set_xticks(range(1, len(labels) + 1))
    ax.set_xticklabels(labels)
    ax.set_ylabel("Absolute error (g/cm²)")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_dice_per_threshold(report: EvaluationReport, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    positions = np.arange(len(report.dice_thresholds))
    ax.bar(positions, report.dice_per_threshold)
    ax.set_xticks(positions)
    ax.set_xticklabels([f"{threshold:.0f}" for threshold in report.dice_thresholds])
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("Threshold (DRR units)")
    ax.set_ylabel("Mean Dice")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def write_plots(report: EvaluationReport, plots_dir: Path) -> List[Path]:
    plots_dir = Path(plots_dir)
    os.makedirs(plots_dir, exist_ok=True)
    paths = [
        plot_bmd_scatter(report, plots_dir / SCATTER_FILENAME),
        plot_abs_error(report, plots_dir / ABS_ERROR_FILENAME),
        plot_dice_per_threshold(report, plots_dir / DICE_FILENAME),
    ]
    logger.info(f"Wrote {len(paths)} plots to {plots_dir}")
    return paths
