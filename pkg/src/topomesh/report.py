"""CSV writers and matplotlib figures for training curves, metrics, and sweeps.

Every CSV produced by the command line gets a PNG with the same stem next
to it; the figures use the Agg backend so no display is needed.
"""

import csv
import logging

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ("epoch", "stage", "cd", "error", "boundary", "normal", "smooth", "edge", "total")
SWEEP_COLUMNS = ("tau", "gt_to_pred", "pred_to_gt", "cd", "kept_faces", "failed")


class ReportError(ValueError):
    """Nothing to report or malformed rows."""


def _require_rows(rows, what: str):
    if not rows:
        raise ReportError(f"no {what} rows to write")


def write_curves_csv(curves: list, path) -> None:
    """One row per training epoch, stage-tagged loss components."""
    _require_rows(curves, "curve")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)
        for row in curves:
            writer.writerow([row["epoch"], row["stage"]] +
                            [f"{row[k]:.12g}" for k in CURVE_COLUMNS[2:]])


def plot_curves(curves: list, path) -> None:
    """Total loss over the whole schedule with stage boundaries marked."""
    _require_rows(curves, "curve")
    totals = [row["total"] for row in curves]
    stages = [row["stage"] for row in curves]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.plot(totals, lw=1.5, label="total")
    for key, style in (("cd", "--"), ("error", ":")):
        series = [row[key] for row in curves]
        if any(v > 0 for v in series):
            ax.plot(series, style, lw=1.0, label=key)
    previous = None
    for i, stage in enumerate(stages):
        if stage != previous:
            ax.axvline(i, color="0.8", lw=0.8, zorder=0)
            ax.text(i, ax.get_ylim()[1], stage, fontsize=7, rotation=90,
                    va="top", ha="right", color="0.4")
            previous = stage
    ax.set_xlabel("epoch (cumulative)")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    logger.info("wrote %s", path)


def write_sweep_csv(rows: list, path) -> None:
    """Threshold sweep: tau against both directional distances."""
    _require_rows(rows, "sweep")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            writer.writerow([f"{row[k]:.12g}" for k in SWEEP_COLUMNS])


def plot_sweep(rows: list, path) -> None:
    """The two directional error curves crossing over the threshold range."""
    _require_rows(rows, "sweep")
    taus = [row["tau"] for row in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(taus, [row["gt_to_pred"] for row in rows], "o-", label="GT → prediction")
    ax.plot(taus, [row["pred_to_gt"] for row in rows], "s-", label="prediction → GT")
    ax.plot(taus, [row["cd"] for row in rows], "^--", color="0.5", lw=1.0, label="sum")
    ax.set_xscale("log")
    ax.set_xticks(taus)
    ax.set_xticklabels([f"{t:g}" for t in taus])
    ax.set_xlabel("pruning threshold")
    ax.set_ylabel("mean squared distance")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    logger.info("wrote %s", path)


def plot_metric_bars(summary, path) -> None:
    """Per-category CD and EMD at their reporting scales."""
    from .evaluation import CD_REPORT_SCALE, EMD_REPORT_SCALE

    categories = [c for c in summary.by_category if c != "all"]
    if not categories:
        raise ReportError("no categories to plot")
    cd = [summary.by_category[c]["cd"] * CD_REPORT_SCALE for c in categories]
    emd = [summary.by_category[c]["emd"] * EMD_REPORT_SCALE for c in categories]
    x = np.arange(len(categories))
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(categories)), 4))
    ax.bar(x - 0.2, cd, width=0.4, label="CD ×1e-3")
    ax.bar(x + 0.2, emd, width=0.4, label="EMD ×1e-2")
    ax.set_xticks(x)
    ax.set_xticklabels(categories, rotation=20, ha="right")
    ax.set_ylabel("reported value")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    logger.info("wrote %s", path)
