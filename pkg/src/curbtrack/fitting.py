"""Curb point selection and cubic fitting.

The Theta Shift selector picks the dominant line in a candidate cloud with
two histogram modes: first the orientation of every point seen from a
chosen origin, then the lateral offset after rotating that orientation onto
the longitudinal axis. Everything here is deterministic given the inputs,
the per-side :class:`ThetaShiftState` and, for RANSAC, the seed.
"""

from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_xy
from .exceptions import DegenerateFitError, InsufficientPointsError, NoFitError

SIDES = ("left", "right")


@dataclass(frozen=True)
class CurbPolynomial:
    """Lateral offset ``X(Y) = c3*Y**3 + c2*Y**2 + c1*Y + c0`` valid on ``[y_min, y_max]``."""

    c3: float
    c2: float
    c1: float
    c0: float
    y_min: float
    y_max: float
    side: str = "right"
    lidar: bool = False
    ultrasonic: bool = False
    tracked: bool = False
    rms: float = float("nan")

    def __post_init__(self):
        if self.side not in SIDES:
            raise ValueError(f"side must be left or right, got {self.side!r}")
        vals = (self.c3, self.c2, self.c1, self.c0, self.y_min, self.y_max)
        if not all(np.isfinite(vals)):
            raise ValueError("polynomial coefficients and span must be finite")
        if not self.y_min < self.y_max:
            raise ValueError(f"need y_min < y_max, got {self.y_min} >= {self.y_max}")
        mid = self.lateral(0.5 * (self.y_min + self.y_max))
        if (mid >= 0) if self.side == "left" else (mid <= 0):
            raise ValueError(f"{self.side} curb must have {'negative' if self.side == 'left' else 'positive'} "
                             f"lateral offset at mid-span, got {mid:.3f}")

    @property
    def coeffs(self):
        return (self.c3, self.c2, self.c1, self.c0)

    def lateral(self, y):
        y = np.asarray(y, dtype=np.float64)
        return ((self.c3 * y + self.c2) * y + self.c1) * y + self.c0

    def covers(self, y):
        y = np.asarray(y, dtype=np.float64)
        return (y >= self.y_min) & (y <= self.y_max)

    def to_dict(self):
        return {
            "side": self.side,
            "c3": self.c3, "c2": self.c2, "c1": self.c1, "c0": self.c0,
            "y_min": self.y_min, "y_max": self.y_max,
            "lidar": self.lidar, "ultrasonic": self.ultrasonic, "tracked": self.tracked,
            "rms": None if not np.isfinite(self.rms) else self.rms,
        }

    @classmethod
    def from_dict(cls, data):
        rms = data.get("rms")
        return cls(
            float(data["c3"]), float(data["c2"]), float(data["c1"]), float(data["c0"]),
            float(data["y_min"]), float(data["y_max"]), data.get("side", "right"),
            bool(data.get("lidar", False)), bool(data.get("ultrasonic", False)),
            bool(data.get("tracked", False)), float("nan") if rms is None else float(rms),
        )


@dataclass(frozen=True)
class ThetaShiftState:
    previous_origin: Optional[tuple] = None
    origin_jump_thres: float = 1.0
    theta_bin: float = 1.0
    x_bin: float = 0.1
    x_select_tol: float = 0.3
    previous_theta_mode: Optional[float] = None
    previous_x_mode: Optional[float] = None

    def __post_init__(self):
        for name in ("origin_jump_thres", "theta_bin", "x_bin", "x_select_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")

    def reset(self):
        return replace(self, previous_origin=None, previous_theta_mode=None, previous_x_mode=None)


class ThetaShiftResult(NamedTuple):
    indices: np.ndarray
    points: np.ndarray
    state: ThetaShiftState
    origin: tuple
    theta_mode: float
    x_mode: float


def _histogram_mode(values, width, previous=None):
    """Index mask of the most populated ``width`` bin.

    Bins are ``[k*width, (k+1)*width)``. Equal counts go to the bin whose
    centre is nearest ``previous`` when given, else to the lowest bin.
    """
    bins = np.floor(values / width).astype(np.int64)
    uniq, counts = np.unique(bins, return_counts=True)
    best = uniq[counts == counts.max()]
    if best.size > 1 and previous is not None:
        centres = (best + 0.5) * width
        pick = best[np.argmin(np.abs(centres - previous))]
    else:
        pick = best[0]
    return bins == pick


def _fold_direction(shifted):
    """Undirected orientation from +y toward +x, in degrees within [-90, 90)."""
    theta = np.degrees(np.arctan2(shifted[:, 0], shifted[:, 1]))
    flip = (theta >= 90.0) | (theta < -90.0)
    vec = np.where(flip[:, None], -shifted, shifted)
    theta = np.degrees(np.arctan2(vec[:, 0], vec[:, 1]))
    theta[theta >= 90.0] -= 180.0
    return theta, vec


def _pick_origin(pts, state):
    mean = pts.mean(axis=0)
    if state.previous_origin is not None:
        d = np.hypot(*(pts - np.asarray(state.previous_origin, dtype=np.float64)).T)
        j = int(np.argmin(d))
        if d[j] <= state.origin_jump_thres:
            return j
    # nearest to the mean x; ties by distance to the mean y, then index
    order = np.lexsort((np.arange(len(pts)), np.abs(pts[:, 1] - mean[1]), np.abs(pts[:, 0] - mean[0])))
    return int(order[0])


def theta_shift_select(points, state=None):
    """Select the points of the dominant line in ``points`` (n, 2).

    Orientation is measured from the longitudinal axis and folded to
    [-90, 90) since a line through the origin is seen in both directions.
    The orientation mode is refined to the direction of the summed vectors
    in the winning bin, so distant points (whose angles are least noisy)
    dominate. Returns a :class:`ThetaShiftResult`.
    """
    state = ThetaShiftState() if state is None else state
    pts = check_xy(points)
    if len(pts) < 4:
        raise InsufficientPointsError(f"theta shift needs at least 4 points, got {len(pts)}")
    o = _pick_origin(pts, state)
    origin = pts[o]
    shifted = pts - origin
    others = np.flatnonzero(np.any(shifted != 0.0, axis=1))
    if others.size == 0:
        raise InsufficientPointsError("all candidate points coincide")
    theta, vec = _fold_direction(shifted[others])
    in_mode = _histogram_mode(theta, state.theta_bin, state.previous_theta_mode)
    total = vec[in_mode].sum(axis=0)
    theta_mode = float(np.degrees(np.arctan2(total[0], total[1])))

    m = np.radians(theta_mode)
    cm, sm = np.cos(m), np.sin(m)
    rot_x = shifted[:, 0] * cm - shifted[:, 1] * sm
    in_x = _histogram_mode(rot_x, state.x_bin, state.previous_x_mode)
    x_mode = float(rot_x[in_x].mean())
    keep = np.flatnonzero(np.abs(rot_x - x_mode) <= state.x_select_tol)

    new_state = replace(
        state,
        previous_origin=(float(origin[0]), float(origin[1])),
        previous_theta_mode=theta_mode,
        previous_x_mode=x_mode,
    )
    return ThetaShiftResult(keep, pts[keep], new_state, (float(origin[0]), float(origin[1])), theta_mode, x_mode)


def least_squares_poly(points, side="right", degree=None, weights=None):
    """Least-squares lateral polynomial ``X(Y)`` through ``points`` (n, 2).

    ``degree=None`` fits a cubic when at least 6 points are given and a line
    otherwise; the result is always reported as four coefficients. Integer
    ``weights`` act as point multiplicities.
    """
    pts = check_xy(points)
    auto = degree is None
    if auto:
        if len(pts) < 4:
            raise InsufficientPointsError(f"need at least 4 points, got {len(pts)}")
        degree = 3 if len(pts) >= 6 else 1
    if degree not in (1, 2, 3):
        raise ValueError("degree must be 1, 2 or 3")
    if len(pts) < degree + 1:
        raise InsufficientPointsError(f"degree {degree} needs {degree + 1} points, got {len(pts)}")
    x, y = pts[:, 0], pts[:, 1]
    w = np.ones(len(pts)) if weights is None else np.asarray(weights, dtype=np.float64)
    V = np.vander(y, degree + 1)
    sw = np.sqrt(w)
    A = V * sw[:, None]
    # column scaling keeps the system well conditioned for Y in the tens of metres
    scale = np.linalg.norm(A, axis=0)
    if np.any(scale == 0):
        raise DegenerateFitError("design matrix has an all-zero column")
    sol, _, rank, _ = np.linalg.lstsq(A / scale, x * sw, rcond=None)
    if rank < degree + 1:
        raise DegenerateFitError(f"rank-deficient fit (rank {rank} < {degree + 1})")
    c = np.zeros(4)
    c[3 - degree:] = sol / scale
    resid = x - np.polyval(c, y)
    rms = float(np.sqrt(np.sum(w * resid**2) / np.sum(w)))
    return CurbPolynomial(*(float(v) for v in c), float(y.min()), float(y.max()), side, rms=rms)


class RansacResult(NamedTuple):
    line: tuple  # (a, b, c) with a*x + b*y + c = 0 and a**2 + b**2 = 1
    inliers: np.ndarray
    residual: float


def ransac_line(points, seed=0, iterations=100, inlier_tol=0.3):
    """Two-point RANSAC line maximising the inlier count.

    Ties go to the lower sum of squared inlier distances; the first such
    model wins if those are equal too.
    """
    pts = check_xy(points, min_rows=2)
    rng = np.random.default_rng(seed)
    n = len(pts)
    best = None
    for _ in range(int(iterations)):
        i, j = rng.choice(n, size=2, replace=False)
        d = pts[j] - pts[i]
        norm = np.hypot(*d)
        if norm == 0:
            continue
        a, b = -d[1] / norm, d[0] / norm
        c = -(a * pts[i, 0] + b * pts[i, 1])
        dist = np.abs(pts @ np.array([a, b]) + c)
        inl = dist <= inlier_tol
        count = int(inl.sum())
        resid = float(np.sum(dist[inl] ** 2))
        if best is None or count > best[0] or (count == best[0] and resid < best[1]):
            best = (count, resid, (float(a), float(b), float(c)), np.flatnonzero(inl))
    if best is None or best[0] < 2:
        raise NoFitError("no RANSAC model with at least 2 inliers")
    return RansacResult(best[2], best[3], best[1])


def fit_side(points, state, side, extra=None, extra_weight=1):
    """Theta Shift plus least squares for one side; ``(poly or None, state)``.

    ``extra`` points (e.g. ultrasonic returns) join the fit after selection
    with multiplicity ``extra_weight``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    try:
        sel = theta_shift_select(pts, state)
    except InsufficientPointsError:
        return None, state
    chosen, new_state = sel.points, sel.state
    weights = np.ones(len(chosen))
    if extra is not None and len(extra):
        extra = np.asarray(extra, dtype=np.float64).reshape(-1, 2)
        chosen = np.vstack([chosen, extra])
        weights = np.concatenate([weights, np.full(len(extra), float(extra_weight))])
    try:
        poly = least_squares_poly(chosen, side, weights=weights)
    except (InsufficientPointsError, DegenerateFitError, ValueError):
        return None, new_state
    return replace(poly, lidar=True), new_state


def fit_curb(cands, frame, states=None):
    """Per-side fit of a :class:`CandidateSet` drawn from ``frame``.

    Returns ``({side: poly or None}, {side: state})``; failures on a side
    yield ``None`` for that side.
    """
    states = dict(states or {})
    polys, new_states = {}, {}
    for side in SIDES:
        idx = cands.side(side)
        pts = np.column_stack([frame.x[idx], frame.y[idx]]) if len(idx) else np.zeros((0, 2))
        polys[side], new_states[side] = fit_side(pts, states.get(side, ThetaShiftState()), side)
    return polys, new_states


class ThetaShiftRegressor(RegressorMixin, BaseEstimator):
    """Estimator view of Theta Shift + least squares for one side.

    ``fit`` takes an (n, 2) array of (x, y) candidates; ``predict`` maps
    longitudinal positions to lateral offsets.
    """

    def __init__(self, side="right", theta_bin=1.0, x_bin=0.1, x_select_tol=0.3, origin_jump_thres=1.0):
        self.side = side
        self.theta_bin = theta_bin
        self.x_bin = x_bin
        self.x_select_tol = x_select_tol
        self.origin_jump_thres = origin_jump_thres

    def fit(self, X, y=None):
        state = ThetaShiftState(None, self.origin_jump_thres, self.theta_bin, self.x_bin, self.x_select_tol)
        sel = theta_shift_select(X, state)
        self.selected_ = sel.indices
        self.state_ = sel.state
        self.poly_ = replace(least_squares_poly(sel.points, self.side), lidar=True)
        return self

    def predict(self, y):
        check_is_fitted(self, "poly_")
        return self.poly_.lateral(np.asarray(y, dtype=np.float64).reshape(-1))

    def score(self, X, y=None):
        # R^2 of lateral offsets on (x, y) pairs
        pts = check_xy(X)
        return super().score(pts[:, 1], pts[:, 0])
