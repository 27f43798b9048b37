"""Matplotlib figures for evaluation reports (rendered to files, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import PRECISION_THRESHOLDS, SUCCESS_THRESHOLDS, EvalReport  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_success(report: EvalReport, path, label="tracker"):
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(SUCCESS_THRESHOLDS, report.success_curve, label=f"{label} [{report.auc:.3f}]")
    ax.set(xlabel="overlap threshold", ylabel="success rate", xlim=(0, 1), ylim=(0, 1.02))
    ax.legend(loc="lower left")
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_precision(report: EvalReport, path, label="tracker"):
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(PRECISION_THRESHOLDS, report.precision_curve, label=f"{label} [{report.precision_at_20:.3f}]")
    ax.axvline(20, color="grey", lw=0.8, ls="--")
    ax.set(xlabel="location error threshold (px)", ylabel="precision", xlim=(0, 50), ylim=(0, 1.02))
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_overlap(report: EvalReport, path, label="tracker"):
    ious = np.array([f[0] for f in report.per_frame])
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(np.arange(1, len(ious) + 1), ious, label=label)
    ax.set(xlabel="frame", ylabel="overlap ratio", ylim=(0, 1.02))
    ax.legend(loc="lower left")
    ax.grid(alpha=0.3)
    _save(fig, path)


def render_all(report: EvalReport, out_dir, label="tracker") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / "success.png", out_dir / "precision.png", out_dir / "overlap.png"]
    for fn, p in zip((plot_success, plot_precision, plot_overlap), paths):
        fn(report, p, label)
    return paths
