"""Longitudinal sample-based comparison of detected and ground-truth curbs."""

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import MalformedFileError
from .fitting import SIDES, CurbPolynomial

TN, TP, FP, FN = 0, 1, 2, 3
# both curves cover the sample but disagree: a false detection and a missed curb at once
MISMATCH = 4
CLASS_NAMES = ("TN", "TP", "FP", "FN", "MISMATCH")
REPORT_HEADER = ["y_lo", "y_hi", "tp", "fp", "tn", "fn", "precision", "recall"]


@dataclass(frozen=True)
class GroundTruthCurb:
    frame_id: int
    side: str
    c3: float
    c2: float
    c1: float
    c0: float
    y_min: float
    y_max: float

    def __post_init__(self):
        # same invariants as a detection
        self.as_polynomial()

    def as_polynomial(self):
        return CurbPolynomial(self.c3, self.c2, self.c1, self.c0, self.y_min, self.y_max, self.side)

    def lateral(self, y):
        return self.as_polynomial().lateral(y)

    def covers(self, y):
        y = np.asarray(y, dtype=np.float64)
        return (y >= self.y_min) & (y <= self.y_max)


def parse_ground_truth(text):
    """``frame_id,side,c3,c2,c1,c0,y_min,y_max`` lines -> ``{frame_id: {side: gt}}``."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if lineno == 1 and parts[0].lower() in ("frame_id", "frame"):
            continue
        if len(parts) != 8:
            raise MalformedFileError(f"line {lineno}: expected 8 fields, got {len(parts)}")
        try:
            gt = GroundTruthCurb(int(parts[0]), parts[1], *map(float, parts[2:]))
        except ValueError as exc:
            raise MalformedFileError(f"line {lineno}: {exc}") from exc
        out.setdefault(gt.frame_id, {})[gt.side] = gt
    return out


def read_ground_truth(path):
    return parse_ground_truth(Path(path).read_text())


def format_ground_truth(gts):
    lines = ["frame_id,side,c3,c2,c1,c0,y_min,y_max"]
    for g in gts:
        lines.append(f"{g.frame_id},{g.side},{g.c3!r},{g.c2!r},{g.c1!r},{g.c0!r},{g.y_min!r},{g.y_max!r}")
    return "\n".join(lines) + "\n"


def classify_samples(det, gt, y_samples, lateral_tol=0.3):
    """Per-sample class codes.

    :data:`MISMATCH` marks samples covered by both curves with a lateral
    error above ``lateral_tol``; interval counts book it as FP and FN.
    """
    y = np.asarray(y_samples, dtype=np.float64)
    det_cov = det.covers(y) if det is not None else np.zeros(y.shape, dtype=bool)
    gt_cov = gt.covers(y) if gt is not None else np.zeros(y.shape, dtype=bool)
    close = np.zeros(y.shape, dtype=bool)
    both = det_cov & gt_cov
    if both.any():
        close[both] = np.abs(det.lateral(y[both]) - gt.lateral(y[both])) <= lateral_tol
    out = np.full(y.shape, TN, dtype=np.int8)
    out[gt_cov & ~det_cov] = FN
    out[det_cov & ~gt_cov] = FP
    out[both & ~close] = MISMATCH
    out[both & close] = TP
    return out


def sample_positions(y_start=0.0, y_stop=30.0, step=0.5):
    n = int(np.floor((y_stop - y_start) / step + 1e-9))
    return y_start + step * np.arange(n)


def default_bins(y_start=0.0, y_stop=30.0, width=2.0):
    n = int(round((y_stop - y_start) / width))
    return y_start + width * np.arange(n + 1)


def _ratio(num, den):
    return num / den if den > 0 else None


@dataclass(frozen=True)
class IntervalMetrics:
    y_lo: float
    y_hi: float
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("counts must be >= 0")

    @property
    def precision(self):
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self):
        return _ratio(self.tp, self.tp + self.fn)

    def __add__(self, other):
        if (self.y_lo, self.y_hi) != (other.y_lo, other.y_hi):
            raise ValueError("cannot add metrics of different intervals")
        return IntervalMetrics(self.y_lo, self.y_hi, self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


def interval_metrics(classes, y, bins):
    """Tally classes into half-open intervals ``[bins[i], bins[i+1])``."""
    classes = np.asarray(classes)
    y = np.asarray(y, dtype=np.float64)
    bins = np.asarray(bins, dtype=np.float64)
    if bins.ndim != 1 or bins.size < 2 or np.any(np.diff(bins) <= 0):
        raise ValueError("bins must be a strictly increasing sequence of at least 2 edges")
    idx = np.searchsorted(bins, y, side="right") - 1
    ok = (idx >= 0) & (idx < bins.size - 1)
    nb = bins.size - 1
    counts = np.zeros((nb, 5), dtype=np.int64)
    np.add.at(counts, (idx[ok], classes[ok].astype(np.int64)), 1)
    counts[:, FP] += counts[:, MISMATCH]
    counts[:, FN] += counts[:, MISMATCH]
    return [
        IntervalMetrics(float(bins[i]), float(bins[i + 1]), int(counts[i, TP]), int(counts[i, FP]),
                        int(counts[i, TN]), int(counts[i, FN]))
        for i in range(nb)
    ]


def evaluate_frame(dets, gts, y_samples, bins, lateral_tol=0.3):
    """Per-side and combined interval metrics for one frame.

    ``dets`` and ``gts`` map side -> polynomial (or ``None``).
    """
    out = {}
    for side in SIDES:
        cls = classify_samples((dets or {}).get(side), (gts or {}).get(side), y_samples, lateral_tol)
        out[side] = interval_metrics(cls, y_samples, bins)
    out["combined"] = [a + b for a, b in zip(out["left"], out["right"])]
    return out


@dataclass
class MetricsReport:
    intervals: list

    def totals(self):
        return IntervalMetrics(self.intervals[0].y_lo, self.intervals[-1].y_hi,
                               sum(m.tp for m in self.intervals), sum(m.fp for m in self.intervals),
                               sum(m.tn for m in self.intervals), sum(m.fn for m in self.intervals))

    def restrict(self, y_lo, y_hi):
        return MetricsReport([m for m in self.intervals if m.y_lo >= y_lo and m.y_hi <= y_hi])

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for m in self.intervals:
            p, r = m.precision, m.recall
            w.writerow([_num(m.y_lo), _num(m.y_hi), m.tp, m.fp, m.tn, m.fn,
                        "" if p is None else f"{p:.6f}", "" if r is None else f"{r:.6f}"])
        return buf.getvalue()


def _num(v):
    return f"{v:g}"


def aggregate_report(per_frame):
    """Sum interval counts over frames; every frame must use the same bins."""
    per_frame = list(per_frame)
    if not per_frame:
        raise ValueError("no frame metrics to aggregate")
    edges = [(m.y_lo, m.y_hi) for m in per_frame[0]]
    total = list(per_frame[0])
    for frame in per_frame[1:]:
        if [(m.y_lo, m.y_hi) for m in frame] != edges:
            raise ValueError("frames use different interval bins")
        total = [a + b for a, b in zip(total, frame)]
    return MetricsReport(total)


def read_report(path):
    rows = list(csv.DictReader(io.StringIO(Path(path).read_text())))
    return MetricsReport([
        IntervalMetrics(float(r["y_lo"]), float(r["y_hi"]), int(r["tp"]), int(r["fp"]), int(r["tn"]), int(r["fn"]))
        for r in rows
    ])


@dataclass(frozen=True)
class EvalConfig:
    sample_step: float = 0.5
    lateral_tol: float = 0.3
    bin_width: float = 2.0
    y_start: float = 0.0
    y_stop: float = 30.0

    def __post_init__(self):
        for name in ("sample_step", "lateral_tol", "bin_width"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not self.y_stop > self.y_start:
            raise ValueError("y_stop must exceed y_start")

    def samples(self):
        return sample_positions(self.y_start, self.y_stop, self.sample_step)

    def bins(self):
        return default_bins(self.y_start, self.y_stop, self.bin_width)
