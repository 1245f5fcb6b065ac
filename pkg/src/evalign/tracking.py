"""Single-object tracking evaluation over axis-aligned box sequences.

Produces the three standard curves: success rate over IoU thresholds
(21 points, 0 to 1 in steps of 0.05), precision over center-error
thresholds in pixels (51 points, 0 to 50), and normalized precision,
where the center error is divided component-wise by the ground-truth box
extents before taking the Euclidean norm (51 points, 0 to 0.5). Summary
scalars are the success AUC (curve mean), precision at the 20-px
operating point, and the normalized-precision AUC. Frames flagged absent
are excluded from every denominator.
"""

import csv
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned box: top-left corner plus positive extents."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box extents must be positive, got w={self.w}, h={self.h}")

    @property
    def center(self):
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)


@dataclass
class TrackSequence:
    """Per-frame (prediction, truth, present) triples."""

    frames: list  # of (Box, Box, bool)

    def __post_init__(self):
        if not self.frames:
            raise ValueError("track sequence is empty")


SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
NORM_PRECISION_THRESHOLDS = np.linspace(0.0, 0.5, 51)


@dataclass
class MetricCurves:
    success: np.ndarray  # 21 fractions over IoU thresholds
    precision: np.ndarray  # 51 fractions over pixel thresholds
    norm_precision: np.ndarray  # 51 fractions over normalized thresholds
    sr_auc: float
    pr_at_20: float
    npr_auc: float

    def summaries(self) -> dict:
        return {
            "sr_auc": self.sr_auc,
            "pr_at_20": self.pr_at_20,
            "npr_auc": self.npr_auc,
        }


def iou(a: Box, b: Box) -> float:
    """Intersection over union; zero for disjoint boxes."""
    x1 = max(a.x, b.x)
    y1 = max(a.y, b.y)
    x2 = min(a.x + a.w, b.x + b.w)
    y2 = min(a.y + a.h, b.y + b.h)
    iw = max(x2 - x1, 0.0)
    ih = max(y2 - y1, 0.0)
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def evaluate(seq: TrackSequence) -> MetricCurves:
    """Compute all three curves and their summary scalars.

    A frame counts as a success at threshold t when its IoU is >= t, as
    precise at threshold t when its center error is <= t. The >= / <=
    conventions make perfect tracks score exactly one everywhere.
    """
    ious = []
    cerr = []
    nerr = []
    for pred, truth, present in seq.frames:
        if not present:
            continue
        ious.append(iou(pred, truth))
        pc, tc = pred.center, truth.center
        dx, dy = pc[0] - tc[0], pc[1] - tc[1]
        cerr.append(np.hypot(dx, dy))
        nerr.append(np.hypot(dx / truth.w, dy / truth.h))
    if not ious:
        raise ValueError("every frame is flagged absent")
    ious = np.asarray(ious)
    cerr = np.asarray(cerr)
    nerr = np.asarray(nerr)
    success = (ious[:, None] >= SUCCESS_THRESHOLDS[None, :]).mean(axis=0)
    precision = (cerr[:, None] <= PRECISION_THRESHOLDS[None, :]).mean(axis=0)
    norm_prec = (nerr[:, None] <= NORM_PRECISION_THRESHOLDS[None, :]).mean(axis=0)
    return MetricCurves(
        success=success,
        precision=precision,
        norm_precision=norm_prec,
        sr_auc=float(success.mean()),
        pr_at_20=float(precision[20]),
        npr_auc=float(norm_prec.mean()),
    )


SEQUENCE_CSV_HEADER = [
    "frame",
    "pred_x",
    "pred_y",
    "pred_w",
    "pred_h",
    "gt_x",
    "gt_y",
    "gt_w",
    "gt_h",
    "present",
]


def write_sequence_csv(seq: TrackSequence, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SEQUENCE_CSV_HEADER)
        for i, (pred, truth, present) in enumerate(seq.frames):
            writer.writerow(
                [
                    i,
                    repr(pred.x),
                    repr(pred.y),
                    repr(pred.w),
                    repr(pred.h),
                    repr(truth.x),
                    repr(truth.y),
                    repr(truth.w),
                    repr(truth.h),
                    int(present),
                ]
            )


def read_sequence_csv(path) -> TrackSequence:
    """Parse a sequence file; malformed rows raise with their line number."""
    frames = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SEQUENCE_CSV_HEADER:
            raise ValueError(f"line 1: unexpected sequence CSV header: {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(SEQUENCE_CSV_HEADER):
                raise ValueError(f"line {lineno}: expected {len(SEQUENCE_CSV_HEADER)} fields")
            try:
                vals = [float(c) for c in row[1:9]]
                present = bool(int(row[9]))
                pred = Box(*vals[:4])
                truth = Box(*vals[4:])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"line {lineno}: {exc}") from exc
            frames.append((pred, truth, present))
    return TrackSequence(frames)


CURVES_CSV_HEADER = ["metric", "threshold", "value"]


def write_curves_csv(curves: MetricCurves, path) -> None:
    """Long-format dump: one row per (curve, threshold) pair."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVES_CSV_HEADER)
        for name, thresholds, values in (
            ("success", SUCCESS_THRESHOLDS, curves.success),
            ("precision", PRECISION_THRESHOLDS, curves.precision),
            ("norm_precision", NORM_PRECISION_THRESHOLDS, curves.norm_precision),
        ):
            for t, v in zip(thresholds, values):
                writer.writerow([name, repr(float(t)), repr(float(v))])
