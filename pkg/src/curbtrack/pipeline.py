"""Per-frame orchestration: features, masking, ultrasonic fusion, fitting, tracking."""

import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from sklearn.base import BaseEstimator

from .evaluation import EvalConfig, aggregate_report, evaluate_frame
from .exceptions import ConfigError, CurbTrackError, DegenerateFitError, InsufficientPointsError
from .features import CandidateSet, FilterConfig, compute_features, search_candidates
from .fitting import SIDES, ThetaShiftState, fit_side, least_squares_poly
from .masking import CalibrationConfig, MaskingConfig, build_vscan, mask_by_boxes, mask_by_stixels
from .tracking import TrackerConfig, track_step
from .ultrasonic import UltrasonicConfig, to_lidar_frame

STAGES = ("features", "search", "camera_mask", "vscan_mask", "ultrasonic", "fitting", "tracking")
CLOSE_RANGE = (0.0, 4.0)


@dataclass(frozen=True)
class FittingConfig:
    theta_bin: float = 1.0
    x_bin: float = 0.1
    x_select_tol: float = 0.3
    origin_jump_thres: float = 1.0

    def initial_state(self):
        return ThetaShiftState(None, self.origin_jump_thres, self.theta_bin, self.x_bin, self.x_select_tol)


@dataclass(frozen=True)
class FusionConfig:
    weight: int = 3

    def __post_init__(self):
        if int(self.weight) != self.weight or self.weight < 1:
            raise ValueError("fusion weight must be a positive integer")


@dataclass(frozen=True)
class StageToggles:
    enable_camera_mask: bool = False
    enable_vscan_mask: bool = False
    enable_tracking: bool = False
    enable_ultrasonic: bool = False


EXPERIMENTS = {
    1: StageToggles(),
    2: StageToggles(True, True, False, False),
    3: StageToggles(True, True, True, False),
    4: StageToggles(True, True, True, True),
}

_SECTIONS = {
    "filter": FilterConfig,
    "masking": MaskingConfig,
    "fitting": FittingConfig,
    "tracker": TrackerConfig,
    "ultrasonic": UltrasonicConfig,
    "fusion": FusionConfig,
    "eval": EvalConfig,
    "stages": StageToggles,
}
INPUT_KEYS = ("frames", "boxes", "ultrasonic_log", "calibration", "ground_truth")


@dataclass(frozen=True)
class PipelineConfig:
    filter: FilterConfig = field(default_factory=FilterConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    fitting: FittingConfig = field(default_factory=FittingConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    ultrasonic: UltrasonicConfig = field(default_factory=UltrasonicConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    stages: StageToggles = field(default_factory=StageToggles)
    inputs: dict = field(default_factory=dict)

    @classmethod
    def experiment(cls, number, **overrides):
        if number not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {sorted(EXPERIMENTS)}, got {number}")
        return replace(cls(stages=EXPERIMENTS[number]), **overrides)

    @classmethod
    def from_mapping(cls, data, experiment=None):
        """Build from a nested mapping; an ``experiment`` key or argument picks the toggle preset.

        Unknown sections or keys raise :class:`ConfigError`.
        """
        data = dict(data or {})
        exp = experiment if experiment is not None else data.pop("experiment", None)
        data.pop("experiment", None)
        base = cls.experiment(int(exp)) if exp is not None else cls()
        kwargs = {}
        for name, value in data.items():
            if name == "inputs":
                unknown = set(value or {}) - set(INPUT_KEYS)
                if unknown:
                    raise ConfigError(f"unknown input keys: {sorted(unknown)}")
                kwargs["inputs"] = dict(value or {})
                continue
            if name not in _SECTIONS:
                raise ConfigError(f"unknown config section {name!r}")
            section = _SECTIONS[name]
            known = {f.name for f in fields(section)}
            unknown = set(value or {}) - known
            if unknown:
                raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
            try:
                kwargs[name] = replace(getattr(base, name), **(value or {}))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name} settings: {exc}") from exc
        return replace(base, **kwargs)

    def to_mapping(self):
        out = {name: asdict(getattr(self, name)) for name in _SECTIONS}
        out["inputs"] = dict(self.inputs)
        return out


def load_config(path, experiment=None):
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return PipelineConfig.from_mapping(data, experiment)


@dataclass
class PipelineState:
    config: PipelineConfig
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    theta_states: dict = None
    tracks: dict = None

    def __post_init__(self):
        if self.theta_states is None:
            self.theta_states = {s: self.config.fitting.initial_state() for s in SIDES}
        if self.tracks is None:
            self.tracks = {s: None for s in SIDES}


@dataclass
class FrameResult:
    frame_id: int
    polynomials: dict
    timings: dict
    counts: dict
    error: Optional[str] = None

    def to_record(self, with_timings=False):
        rec = {
            "frame_id": int(self.frame_id),
            "left": None if self.polynomials.get("left") is None else self.polynomials["left"].to_dict(),
            "right": None if self.polynomials.get("right") is None else self.polynomials["right"].to_dict(),
            "counts": dict(self.counts),
        }
        if self.error is not None:
            rec["error"] = self.error
        if with_timings:
            rec["timings_us"] = dict(self.timings)
        return rec


class _Clock:
    def __init__(self):
        self.timings = {s: 0 for s in STAGES}

    def run(self, stage, fn, *args):
        t0 = time.perf_counter_ns()
        out = fn(*args)
        self.timings[stage] += (time.perf_counter_ns() - t0) // 1000
        return out


def _ultrasonic_points(est, cal):
    """Accepted ultrasonic returns as ``{side: (k, 2) xy}``."""
    pts = to_lidar_frame(est, cal)[:, :2] if est is not None else np.zeros((0, 2))
    return {"left": pts[pts[:, 0] < 0], "right": pts[pts[:, 0] > 0]}


def _ultrasonic_fallback(pts, side):
    close = pts[(pts[:, 1] >= CLOSE_RANGE[0]) & (pts[:, 1] <= CLOSE_RANGE[1])]
    if len(close) < 2:
        return None
    try:
        poly = least_squares_poly(close, side, degree=1)
    except (InsufficientPointsError, DegenerateFitError, ValueError):
        return None
    return replace(poly, ultrasonic=True)


def run_frame(frame, boxes=None, ultra_estimate=None, state=None):
    """Process one frame with the stages enabled in ``state.config``.

    Returns ``(FrameResult, state)``; ``state`` is updated in place and also
    returned for chaining.
    """
    state = state if state is not None else PipelineState(PipelineConfig())
    cfg = state.config
    toggles = cfg.stages
    clock = _Clock()
    t_start = time.perf_counter_ns()

    if len(frame) == 0:
        cands = CandidateSet()
    else:
        flags = clock.run("features", compute_features, frame, cfg.filter)
        cands = clock.run("search", search_candidates, frame, flags)
    n_cands = len(cands)

    if toggles.enable_camera_mask and boxes:
        m = cfg.masking
        cands = clock.run("camera_mask", mask_by_boxes, cands, frame, boxes, state.calibration, m.score_thres)
    if toggles.enable_vscan_mask and len(cands):
        m = cfg.masking

        def vscan(c):
            _, stixels = build_vscan(frame, m.az_bin, m.range_bin, m.obstacle_height_thres)
            return mask_by_stixels(c, frame, stixels, m.margin, m.az_bin)

        cands = clock.run("vscan_mask", vscan, cands)

    us_pts = {s: np.zeros((0, 2)) for s in SIDES}
    if toggles.enable_ultrasonic and ultra_estimate is not None:
        us_pts = clock.run("ultrasonic", _ultrasonic_points, ultra_estimate, state.calibration)

    def fit_all():
        out = {}
        for side in SIDES:
            idx = cands.side(side)
            pts = np.column_stack([frame.x[idx], frame.y[idx]]) if len(idx) else np.zeros((0, 2))
            poly, state.theta_states[side] = fit_side(
                pts, state.theta_states[side], side, us_pts[side], cfg.fusion.weight
            )
            if poly is not None and len(us_pts[side]):
                poly = replace(poly, ultrasonic=True)
            if poly is None and len(us_pts[side]):
                poly = _ultrasonic_fallback(us_pts[side], side)
            out[side] = poly
        return out

    polys = clock.run("fitting", fit_all)

    if toggles.enable_tracking:
        def track_all():
            out = {}
            for side in SIDES:
                state.tracks[side], out[side] = track_step(state.tracks[side], polys[side], cfg.tracker)
            return out

        polys = clock.run("tracking", track_all)

    timings = dict(clock.timings)
    timings["total"] = (time.perf_counter_ns() - t_start) // 1000
    counts = {"raw": len(frame), "candidates": n_cands, "masked": len(cands)}
    return FrameResult(int(frame.frame_id), polys, timings, counts), state


@dataclass
class SequenceResult:
    results: list
    report: Optional[object] = None
    side_reports: dict = None

    def records(self, with_timings=False):
        return [r.to_record(with_timings) for r in self.results]

    def jsonl(self, with_timings=False):
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.records(with_timings))

    def timing_summary(self):
        """Per-stage ``(mean, p50, p90, p99, max)`` in microseconds over successful frames."""
        ok = [r for r in self.results if r.error is None]
        out = {}
        for stage in STAGES + ("total",):
            vals = np.array([r.timings.get(stage, 0) for r in ok], dtype=np.float64)
            if vals.size == 0:
                continue
            out[stage] = {
                "mean": float(vals.mean()),
                "p50": float(np.percentile(vals, 50)),
                "p90": float(np.percentile(vals, 90)),
                "p99": float(np.percentile(vals, 99)),
                "max": float(vals.max()),
            }
        return out

    def timing_csv(self):
        lines = ["stage,mean_us,p50_us,p90_us,p99_us,max_us"]
        for stage, s in self.timing_summary().items():
            lines.append(f"{stage},{s['mean']:.1f},{s['p50']:.1f},{s['p90']:.1f},{s['p99']:.1f},{s['max']:.1f}")
        return "\n".join(lines) + "\n"


def run_sequence(frames, config=None, boxes=None, ultrasonic=None, ground_truth=None, calibration=None):
    """Run frames in order, threading tracker and Theta Shift state.

    ``frames`` yields :class:`PointFrame` objects, or ``(frame_id, exception)``
    pairs for frames that could not be read; those become error records.
    ``boxes`` maps frame id to boxes, ``ultrasonic`` is an
    :class:`UltrasonicProcessor` (queried at each frame timestamp) and
    ``ground_truth`` maps frame id to ``{side: GroundTruthCurb}``.
    """
    config = config or PipelineConfig()
    state = PipelineState(config, calibration or CalibrationConfig())
    results = []
    per_frame = {s: [] for s in ("left", "right", "combined")}
    samples, bins = config.eval.samples(), config.eval.bins()
    for item in frames:
        if isinstance(item, tuple):
            fid, exc = item
            results.append(FrameResult(int(fid), {s: None for s in SIDES}, {}, {}, f"{type(exc).__name__}: {exc}"))
            continue
        frame = item
        est = ultrasonic.estimate_at(frame.timestamp) if ultrasonic is not None else None
        try:
            res, state = run_frame(frame, (boxes or {}).get(frame.frame_id, []), est, state)
        except CurbTrackError as exc:
            res = FrameResult(int(frame.frame_id), {s: None for s in SIDES}, {}, {}, f"{type(exc).__name__}: {exc}")
        results.append(res)
        if ground_truth is not None and res.error is None:
            metrics = evaluate_frame(res.polynomials, ground_truth.get(frame.frame_id, {}), samples, bins,
                                     config.eval.lateral_tol)
            for key in per_frame:
                per_frame[key].append(metrics[key])
    out = SequenceResult(results)
    if ground_truth is not None and per_frame["combined"]:
        out.report = aggregate_report(per_frame["combined"])
        out.side_reports = {s: aggregate_report(per_frame[s]) for s in SIDES}
    return out


class CurbDetector(BaseEstimator):
    """Estimator wrapper over :func:`run_sequence`.

    ``predict`` returns, per frame, a ``{side: CurbPolynomial or None}`` dict.
    Tracker state lives in ``state_`` and carries over between calls.
    """

    def __init__(self, experiment=2, config=None, calibration=None):
        self.experiment = experiment
        self.config = config
        self.calibration = calibration

    def _resolved_config(self):
        if self.config is not None:
            return self.config
        return PipelineConfig.experiment(self.experiment)

    def fit(self, frames=None, y=None):
        self.state_ = PipelineState(self._resolved_config(), self.calibration or CalibrationConfig())
        return self

    def predict(self, frames, boxes=None, ultrasonic=None):
        if not hasattr(self, "state_"):
            self.fit()
        out = []
        for frame in frames:
            est = ultrasonic.estimate_at(frame.timestamp) if ultrasonic is not None else None
            res, self.state_ = run_frame(frame, (boxes or {}).get(frame.frame_id, []), est, self.state_)
            out.append(res.polynomials)
        return out
