"""One-pass evaluation metrics, report files and the correlation benchmark."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .crops import BBox

SUCCESS_THRESHOLDS = np.round(np.arange(21) * 0.05, 10)
PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64)
PRECISION_AT = 20


def iou(a: BBox, b: BBox) -> float:
    ax0, ay0 = a.cx - a.w / 2, a.cy - a.h / 2
    bx0, by0 = b.cx - b.w / 2, b.cy - b.h / 2
    iw = min(ax0 + a.w, bx0 + b.w) - max(ax0, bx0)
    ih = min(ay0 + a.h, by0 + b.h) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(min(1.0, inter / (a.w * a.h + b.w * b.h - inter)))


def center_error(a: BBox, b: BBox) -> float:
    return float(np.hypot(a.cx - b.cx, a.cy - b.cy))


def _trapezoid(y, x) -> float:
    y, x = np.asarray(y, dtype=np.float64), np.asarray(x, dtype=np.float64)
    return float(np.sum((y[1:] + y[:-1]) * np.diff(x)) / 2)


def success_curve(ious, thresholds=SUCCESS_THRESHOLDS) -> tuple[np.ndarray, float]:
    """Fraction of frames with IoU strictly above each threshold, and the AUC."""
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise ValueError("success_curve needs at least one frame")
    thresholds = np.asarray(thresholds, dtype=np.float64)
    curve = (ious[None, :] > thresholds[:, None]).mean(axis=1)
    span = thresholds[-1] - thresholds[0]
    auc = _trapezoid(curve, thresholds) / span if span > 0 else float(curve[0])
    return curve, auc


def precision_curve(errors, thresholds=PRECISION_THRESHOLDS) -> tuple[np.ndarray, float]:
    """Fraction of frames with centre error strictly below each threshold."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("precision_curve needs at least one frame")
    thresholds = np.asarray(thresholds, dtype=np.float64)
    curve = (errors[None, :] < thresholds[:, None]).mean(axis=1)
    return curve, float((errors < PRECISION_AT).mean())


@dataclass
class EvalReport:
    per_frame: list[tuple[float, float]]
    success_curve: np.ndarray
    auc: float
    precision_curve: np.ndarray
    precision_at_20: float
    fps: float

    @property
    def mean_iou(self) -> float:
        return float(np.mean([f[0] for f in self.per_frame]))


def evaluate(predicted, groundtruth, fps=float("nan")) -> EvalReport:
    predicted, groundtruth = list(predicted), list(groundtruth)
    if len(predicted) != len(groundtruth):
        raise ValueError(f"length mismatch: {len(predicted)} results vs {len(groundtruth)} ground-truth boxes")
    per_frame = [(iou(p, g), center_error(p, g)) for p, g in zip(predicted, groundtruth)]
    s_curve, auc = success_curve([f[0] for f in per_frame])
    p_curve, p20 = precision_curve([f[1] for f in per_frame])
    return EvalReport(per_frame, s_curve, auc, p_curve, p20, float(fps))


def merge_reports(reports) -> EvalReport:
    """Pool the frames of several sequences into one report (fps averaged)."""
    reports = list(reports)
    per_frame = [f for r in reports for f in r.per_frame]
    s_curve, auc = success_curve([f[0] for f in per_frame])
    p_curve, p20 = precision_curve([f[1] for f in per_frame])
    fps = [r.fps for r in reports if np.isfinite(r.fps)]
    return EvalReport(per_frame, s_curve, auc, p_curve, p20, float(np.mean(fps)) if fps else float("nan"))


def write_report(path, report: EvalReport, dat_dir=None):
    """Sectioned CSV; with ``dat_dir`` also two-column .dat files per curve."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["# per-frame"])
        w.writerow(["frame", "iou", "center_error"])
        for i, (o, e) in enumerate(report.per_frame, 1):
            w.writerow([i, f"{o:.6f}", f"{e:.6f}"])
        w.writerow(["# success"])
        w.writerow(["threshold", "value"])
        for t, v in zip(SUCCESS_THRESHOLDS, report.success_curve):
            w.writerow([f"{t:.2f}", f"{v:.6f}"])
        w.writerow(["# precision"])
        w.writerow(["threshold", "value"])
        for t, v in zip(PRECISION_THRESHOLDS, report.precision_curve):
            w.writerow([f"{t:g}", f"{v:.6f}"])
        w.writerow(["# summary (fps excludes frame 1)"])
        w.writerow(["auc", "precision_at_20", "fps"])
        w.writerow([f"{report.auc:.6f}", f"{report.precision_at_20:.6f}", f"{report.fps:.3f}"])
    if dat_dir is not None:
        dat_dir = Path(dat_dir)
        dat_dir.mkdir(parents=True, exist_ok=True)
        for name, xs, ys in (
            ("success", SUCCESS_THRESHOLDS, report.success_curve),
            ("precision", PRECISION_THRESHOLDS, report.precision_curve),
            ("overlap", np.arange(1, len(report.per_frame) + 1), [f[0] for f in report.per_frame]),
        ):
            lines = [f"# {name}"] + [f"{x:g} {y:.6f}" for x, y in zip(xs, ys)]
            (dat_dir / f"{name}.dat").write_text("\n".join(lines) + "\n")


def read_report(path) -> dict:
    """Parse a report CSV back into its sections (lists of row dicts)."""
    sections, current, header = {}, None, None
    with Path(path).open(newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            if row[0].startswith("#"):
                current = row[0][1:].strip().split(" ")[0]
                sections[current], header = [], None
            elif header is None:
                header = row
            else:
                sections[current].append({k: float(v) for k, v in zip(header, row)})
    return sections


# ---------------------------------------------------------------- correlation cost


def xcorr_flops(exemplar_dims, instance_dims) -> int:
    """Multiplies in a valid cross-correlation: C*h*w*H'*W'."""
    c, h, w = exemplar_dims
    c2, H, W = instance_dims
    if c != c2:
        raise T.ShapeError(f"channel mismatch: exemplar {c} vs instance {c2}")
    oh, ow = T.out_size(T.ShapeSpec(H, W, h, w))
    return int(c * h * w * oh * ow)


@dataclass
class BenchRow:
    exemplar: tuple[int, int, int]
    instance: tuple[int, int, int]
    flops: int
    seconds: float


def _exemplar_dims(aspect: float, channels=128, long_side=6) -> tuple[int, int, int]:
    short = max(1, int(round(long_side / aspect)))
    return (channels, long_side, short)


def bench_xcorr(aspect_ratios=(1.0, 2.0), repeats=50, channels=128, instance=22, seed=0) -> list[BenchRow]:
    """Median wall time of xcorr per exemplar aspect (w = 6 / aspect cells)."""
    if repeats < 10:
        raise ValueError("repeats must be >= 10")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((channels, instance, instance))
    with threadpool_limits(limits=1):
        return [_time_one(_exemplar_dims(a, channels), x, repeats, rng) for a in aspect_ratios]


def _time_one(dims, x, repeats, rng) -> BenchRow:
    z = rng.standard_normal(dims)
    for _ in range(3):
        T.xcorr(z, x)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        T.xcorr(z, x)
        times.append(time.perf_counter() - t0)
    return BenchRow(dims, x.shape, xcorr_flops(dims, x.shape), float(np.median(times)))


def format_bench(rows) -> str:
    base = rows[0]
    lines = ["exemplar,instance,flops,seconds,flop_ratio,time_ratio"]
    for r in rows:
        lines.append(
            "{}x{}x{},{}x{}x{},{},{:.6g},{:.2f},{:.2f}".format(
                *r.exemplar, *r.instance, r.flops, r.seconds, base.flops / r.flops, base.seconds / r.seconds
            )
        )
    return "\n".join(lines) + "\n"
