"""Temporal smoothing of curb polynomials with per-sample polar EKFs.

Each curb is represented by ``N`` points sampled uniformly along its
longitudinal span. Every sample carries a state ``(rho, theta, rho_dot)``
where ``theta = atan2(y, x)`` in degrees and ``rho_dot`` is in metres per
frame. Measurements are ``(rho, theta)`` so the measurement model is linear.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from numpy.polynomial import polynomial as P
from sklearn.base import BaseEstimator

from .exceptions import DegenerateFitError, InsufficientPointsError, UndefinedAngleError
from .fitting import CurbPolynomial, least_squares_poly

A = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
H = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
ACTIVE, COASTING, DROPPED = "active", "coasting", "dropped"


@dataclass(frozen=True)
class TrackerConfig:
    sample_count: int = 10
    process_noise_scale: float = 0.005
    sigma_rho: float = 0.2
    sigma_theta: float = 1.0
    max_coast: int = 5
    gate: float = 1.0
    init_inflation: float = 10.0

    def __post_init__(self):
        if self.sample_count < 4:
            raise ValueError("sample_count must be >= 4")
        for name in ("process_noise_scale", "sigma_rho", "sigma_theta", "gate", "init_inflation"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.max_coast < 0:
            raise ValueError("max_coast must be >= 0")

    @property
    def R(self):
        return np.diag([self.sigma_rho**2, self.sigma_theta**2])


@dataclass(frozen=True)
class PolarTrackState:
    rho: float
    theta: float
    rho_dot: float = 0.0
    covariance: np.ndarray = field(default_factory=lambda: np.eye(3))
    age: int = 0
    misses: int = 0

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"rho must be > 0, got {self.rho}")
        P = np.array(self.covariance, dtype=np.float64)
        if P.shape != (3, 3) or not np.allclose(P, P.T, rtol=0, atol=1e-9 * max(1.0, np.abs(P).max())):
            raise ValueError("covariance must be a symmetric 3x3 matrix")
        P.setflags(write=False)
        object.__setattr__(self, "covariance", P)

    @property
    def mean(self):
        return np.array([self.rho, self.theta, self.rho_dot])

    def xy(self):
        return polar_to_cartesian(self.rho, self.theta)


def cartesian_to_polar(p, v=None):
    """``(rho, phi_deg, rho_dot)`` of point ``p`` with optional velocity ``v``."""
    x, y = float(p[0]), float(p[1])
    rho = float(np.hypot(x, y))
    if rho == 0.0:
        raise UndefinedAngleError("polar angle of the origin is undefined")
    phi = float(np.degrees(np.arctan2(y, x)))
    rho_dot = 0.0 if v is None else (x * float(v[0]) + y * float(v[1])) / rho
    return rho, phi, rho_dot


def polar_to_cartesian(rho, theta):
    t = np.radians(theta)
    return rho * np.cos(t), rho * np.sin(t)


def wrap_angle(deg):
    """Wrap to (-180, 180]."""
    out = np.mod(np.asarray(deg, dtype=np.float64) + 180.0, 360.0) - 180.0
    return np.where(out == -180.0, 180.0, out) if np.ndim(out) else (180.0 if out == -180.0 else float(out))


def _sym(P):
    return 0.5 * (P + P.T)


def ekf_predict(s, delta_theta=0.0, cfg=TrackerConfig()):
    x = A @ s.mean + np.array([0.0, float(delta_theta), 0.0])
    q = (cfg.process_noise_scale * s.rho) ** 2
    P = _sym(A @ s.covariance @ A.T + q * np.eye(3))
    # keep the range positive; a collapse through the sensor is not physical
    rho = max(float(x[0]), 1e-6)
    return PolarTrackState(rho, float(x[1]), float(x[2]), P, s.age + 1, s.misses)


def innovation(s, z):
    dz = np.array([float(z[0]) - s.rho, float(wrap_angle(float(z[1]) - s.theta))])
    return dz


def gate_distance(s, z):
    """Innovation expressed in metres: radial error and arc length at ``rho``."""
    dz = innovation(s, z)
    return float(np.hypot(dz[0], s.rho * np.radians(dz[1])))


def ekf_update(s, z, cfg=TrackerConfig(), use_gate=True):
    """Correct ``s`` with measurement ``z = (rho, theta)``.

    A measurement farther than ``cfg.gate`` (metres) is rejected and the
    state comes back unchanged apart from an incremented miss count.
    """
    if use_gate and gate_distance(s, z) > cfg.gate:
        return replace(s, misses=s.misses + 1)
    P = s.covariance
    S = H @ P @ H.T + cfg.R
    K = np.linalg.solve(S.T, (P @ H.T).T).T
    x = s.mean + K @ innovation(s, z)
    IKH = np.eye(3) - K @ H
    # Joseph form keeps the covariance PSD under rounding
    P_new = _sym(IKH @ P @ IKH.T + K @ cfg.R @ K.T)
    return PolarTrackState(max(float(x[0]), 1e-6), float(x[1]), float(x[2]), P_new, s.age, 0)


def sample_curve_points(poly, n):
    """``n`` points with Y evenly spaced over ``[y_min, y_max]`` inclusive."""
    if n < 2:
        raise ValueError("need at least 2 samples")
    y = np.linspace(poly.y_min, poly.y_max, int(n))
    return np.column_stack([poly.lateral(y), y])


def closest_point(poly, p, slack=0.0):
    """Foot of the perpendicular from ``p`` onto ``poly`` as ``(x, y)``.

    The span may be stretched by ``slack`` metres at both ends. ``None`` when the
    nearest point is a span end, i.e. ``p`` lies beyond the curve.
    """
    px, py = float(p[0]), float(p[1])
    f = np.array([poly.c0, poly.c1, poly.c2, poly.c3])
    # d/dy of the squared distance: (f(y) - px) f'(y) + (y - py) = 0
    g = P.polyadd(P.polymul(P.polysub(f, [px]), P.polyder(f)), [-py, 1.0])
    lo, hi = poly.y_min - slack, poly.y_max + slack
    trimmed = np.where(np.abs(g) <= 1e-12 * np.abs(g).max(), 0.0, g)
    roots = P.polyroots(np.trim_zeros(trimmed, "b"))
    y = roots[np.abs(roots.imag) <= 1e-6 * np.maximum(1.0, np.abs(roots))].real
    dg = P.polyder(g)
    for _ in range(3):  # polish; tiny high-order terms make polyroots loose
        d = P.polyval(y, dg)
        y = np.where(d != 0.0, y - P.polyval(y, g) / np.where(d != 0.0, d, 1.0), y)
    y = np.concatenate([[lo, hi], y[(y > lo) & (y < hi)]])
    best = int(np.argmin((P.polyval(y, f) - px) ** 2 + (y - py) ** 2))
    if best < 2:
        return None
    return float(P.polyval(y[best], f)), float(y[best])


@dataclass(frozen=True)
class CurbTrack:
    side: str
    samples: tuple
    last_output: Optional[CurbPolynomial] = None
    status: str = ACTIVE
    misses: int = 0
    degree: int = 3

    def points(self):
        return np.array([s.xy() for s in self.samples])


def _degree_of(poly):
    if poly.c3 != 0.0:
        return 3
    if poly.c2 != 0.0:
        return 2
    return 1


def _initial_covariance(cfg):
    # a new sample starts at rest; range-rate uncertainty only enters through Q
    return cfg.init_inflation * np.diag([cfg.sigma_rho**2, cfg.sigma_theta**2, 0.0])


def _init_track(det, cfg):
    P0 = _initial_covariance(cfg)
    samples = []
    for p in sample_curve_points(det, cfg.sample_count):
        rho, theta, _ = cartesian_to_polar(p)
        samples.append(PolarTrackState(rho, theta, 0.0, P0))
    return CurbTrack(det.side, tuple(sorted(samples, key=lambda s: s.theta)), None, ACTIVE, 0, _degree_of(det))


def _refit(track, detection=None, max_coast=None):
    live = [s for s in track.samples if max_coast is None or s.misses <= max_coast]
    # stale samples only steer the fit when too few fresh ones remain
    pts = np.array([s.xy() for s in live]) if len(live) >= 2 else track.points()
    try:
        poly = least_squares_poly(pts, track.side, degree=track.degree)
    except (InsufficientPointsError, DegenerateFitError, ValueError):
        return None
    if detection is not None:
        # report the span seen this frame, but never far past the samples
        reach = (poly.y_max - poly.y_min) / max(len(pts) - 1, 1)
        lo = max(detection.y_min, poly.y_min - reach)
        hi = min(detection.y_max, poly.y_max + reach)
        if lo < hi:
            poly = replace(poly, y_min=lo, y_max=hi)
        poly = replace(poly, lidar=detection.lidar, ultrasonic=detection.ultrasonic)
    return replace(poly, tracked=True)


def track_step(track, detection, cfg=TrackerConfig()):
    """Advance one frame. Returns ``(track or None, output polynomial or None)``."""
    if track is not None and track.status == DROPPED:
        track = None
    if track is None:
        if detection is None:
            return None, None
        track = _init_track(detection, cfg)
        out = _refit(track, detection)
        return replace(track, last_output=out), out

    if detection is None:
        samples = tuple(replace(ekf_predict(s, 0.0, cfg), misses=s.misses + 1) for s in track.samples)
        misses = track.misses + 1
        status = DROPPED if misses > cfg.max_coast else COASTING
        track = replace(track, samples=samples, misses=misses, status=status)
        if status == DROPPED:
            return replace(track, last_output=None), None
        out = _refit(track)
        return replace(track, last_output=out), out

    # each predicted sample is measured at its foot point on the detection, which
    # moves it by the lateral offset alone; no azimuth shift is estimated
    spacing = (detection.y_max - detection.y_min) / (cfg.sample_count - 1)
    updated = []
    for s in track.samples:
        pred = ekf_predict(s, 0.0, cfg)
        foot = closest_point(detection, pred.xy(), slack=spacing)
        if foot is None:
            updated.append(replace(pred, misses=s.misses + 1))
            continue
        rho, theta, _ = cartesian_to_polar(foot)
        if s.misses >= cfg.max_coast:
            # lost for too long; restart this sample from the measurement
            updated.append(PolarTrackState(rho, theta, 0.0, _initial_covariance(cfg), s.age + 1, 0))
        else:
            updated.append(ekf_update(pred, (rho, theta), cfg))
    matched = sum(u.misses == 0 for u in updated)
    samples = tuple(sorted(updated, key=lambda s: s.theta))
    misses = 0 if matched else track.misses + 1
    status = ACTIVE if matched else (DROPPED if misses > cfg.max_coast else COASTING)
    track = replace(track, samples=samples, misses=misses, status=status, degree=_degree_of(detection))
    if status == DROPPED:
        return replace(track, last_output=None), None
    out = _refit(track, detection if matched else None, cfg.max_coast)
    return replace(track, last_output=out), out


class CurbTracker(BaseEstimator):
    """Sequential tracker for one side; ``fit`` runs a whole detection sequence."""

    def __init__(self, sample_count=10, process_noise_scale=0.005, sigma_rho=0.2, sigma_theta=1.0,
                 max_coast=5, gate=1.0):
        self.sample_count = sample_count
        self.process_noise_scale = process_noise_scale
        self.sigma_rho = sigma_rho
        self.sigma_theta = sigma_theta
        self.max_coast = max_coast
        self.gate = gate

    def _cfg(self):
        return TrackerConfig(self.sample_count, self.process_noise_scale, self.sigma_rho, self.sigma_theta,
                             self.max_coast, self.gate)

    def fit(self, detections, y=None):
        self.track_ = None
        self.outputs_ = [self.step(d) for d in detections]
        return self

    def step(self, detection):
        if not hasattr(self, "track_"):
            self.track_ = None
        self.track_, out = track_step(self.track_, detection, self._cfg())
        return out

    def predict(self, detections):
        """Outputs for a continuation of the sequence (state carries over)."""
        return [self.step(d) for d in detections]
