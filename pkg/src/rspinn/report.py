"""CSV sinks and convergence figures for run records."""
from __future__ import annotations

import csv
import math
from pathlib import Path

HEADER = ("epoch", "wall_time_s", "train_loss", "test_rel_l2", "mode")
SUMMARY_HEADER = ("seed", "status", "final_epoch", "final_test_rel_l2", "wall_time_s", "message")


def fmt(x):
    """Floats with 17 significant digits, enough to round-trip a double."""
    return f"{x:.17g}"


def write_run_csv(path, record):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for r in record.rows:
            w.writerow([r.epoch, fmt(r.wall_time_s), fmt(r.train_loss), fmt(r.test_rel_l2), r.mode])
    return path


def read_run_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["epoch"] = int(r["epoch"])
        for k in ("wall_time_s", "train_loss", "test_rel_l2"):
            r[k] = float(r[k])
    return rows


def write_summary_csv(path, records, mean, std):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        for rec in records:
            last = rec.rows[-1] if rec.rows else None
            w.writerow([
                rec.seed, rec.status, last.epoch if last else "", fmt(rec.final_error),
                fmt(last.wall_time_s) if last else "", rec.message,
            ])
        w.writerow(["mean", "", "", fmt(mean), "", ""])
        w.writerow(["std", "", "", fmt(std), "", ""])
    return path


def plot_convergence(path, records, title=""):
    """Test error against epoch and against wall time, one line per seed."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4), constrained_layout=True)
    for rec in records:
        ep = [r.epoch for r in rec.rows if math.isfinite(r.test_rel_l2)]
        wt = [r.wall_time_s for r in rec.rows if math.isfinite(r.test_rel_l2)]
        err = [r.test_rel_l2 for r in rec.rows if math.isfinite(r.test_rel_l2)]
        axes[0].plot(ep, err, label=f"seed {rec.seed}")
        axes[1].plot(wt, err, label=f"seed {rec.seed}")
        for start, mode in rec.transitions[1:]:
            axes[0].axvline(start, color="0.6", ls="--", lw=0.8)
    axes[0].set_xlabel("epoch")
    axes[1].set_xlabel("wall time [s]")
    for ax in axes:
        ax.set_yscale("log")
        ax.set_ylabel("relative L2 error")
        ax.grid(True, which="both", alpha=0.3)
    axes[0].legend(fontsize="small")
    if title:
        fig.suptitle(title)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
