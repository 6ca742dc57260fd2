"""Per-point curb feature filters and the candidate search that combines them.

All filters work on a ring- and azimuth-ordered :class:`PointFrame`; windows
never reach across ring boundaries. Results are plain boolean arrays aligned
with the frame's points.
"""

from dataclasses import dataclass, field, fields

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_frame


@dataclass(frozen=True)
class FilterConfig:
    k: int = 5
    dir_angle_thres: float = 160.0
    elev_thres: float = 0.04
    edge_window_n: int = 5
    edge_count_thres: int = 2
    cont_dist_thres: float = 0.5
    mark_both_discontinuous: bool = False
    # cumulative-rise test used by the candidate search
    rise_baseline: int = 30
    rise_smooth: int = 8
    rise_thres: float = 0.012

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.rise_smooth < 1 or self.rise_baseline < 1:
            raise ValueError("rise_smooth and rise_baseline must be >= 1")
        if not self.edge_window_n >= self.edge_count_thres >= 1:
            raise ValueError("need edge_window_n >= edge_count_thres >= 1")
        for name in ("dir_angle_thres", "elev_thres", "cont_dist_thres", "rise_thres"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")

    @classmethod
    def from_mapping(cls, mapping):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in dict(mapping or {}).items() if k in names})


@dataclass
class FeatureFlags:
    direction_change: np.ndarray
    elevated: np.ndarray
    edge_start: np.ndarray
    edge_end: np.ndarray
    continuous: np.ndarray
    theta: np.ndarray
    rising: np.ndarray = None

    def __post_init__(self):
        if self.rising is None:
            self.rising = np.zeros_like(self.elevated)

    def __len__(self):
        return self.theta.shape[0]

    def qualifying(self):
        """Points satisfying the candidate rule used by :func:`search_candidates`."""
        height = self.elevated | self.edge_start | self.rising
        return self.direction_change & height & self.continuous


@dataclass
class CandidateSet:
    left: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    right: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.left = np.asarray(self.left, dtype=np.int64).reshape(-1)
        self.right = np.asarray(self.right, dtype=np.int64).reshape(-1)

    def __len__(self):
        return self.left.size + self.right.size

    def side(self, name):
        return self.left if name == "left" else self.right

    def all_indices(self):
        return np.concatenate([self.left, self.right])

    def keep(self, mask_fn):
        """New set holding indices for which ``mask_fn(indices)`` is true."""
        return CandidateSet(self.left[mask_fn(self.left)], self.right[mask_fn(self.right)])

    def without(self, removed):
        removed = np.asarray(list(removed), dtype=np.int64)
        return CandidateSet(self.left[~np.isin(self.left, removed)], self.right[~np.isin(self.right, removed)])

    def equals(self, other):
        return np.array_equal(self.left, other.left) and np.array_equal(self.right, other.right)


def _ring_ids(ring, n):
    if ring is None:
        return np.zeros(n, dtype=np.int64)
    return np.asarray(ring, dtype=np.int64)


def _same_ring_prev(ring):
    """True where a point has a predecessor in the same ring."""
    out = np.zeros(ring.shape[0], dtype=bool)
    out[1:] = ring[1:] == ring[:-1]
    return out


def direction_change_theta(frame, k):
    """Angle between the summed left and right neighbour vectors, in degrees.

    Points with fewer than ``k`` same-ring neighbours on either side, and
    points whose summed vectors have zero length, get 180.
    """
    xyz = frame.xyz
    n = len(frame)
    pos, length = frame.position_in_ring()
    interior = (pos >= k) & (pos <= length - 1 - k)
    theta = np.full(n, 180.0)
    idx = np.flatnonzero(interior)
    if idx.size == 0:
        return theta
    p = xyz[idx]
    left = np.zeros_like(p)
    right = np.zeros_like(p)
    for j in range(1, k + 1):
        left += xyz[idx - j] - p
        right += xyz[idx + j] - p
    dot = np.einsum("ij,ij->i", left, right)
    norm = np.linalg.norm(left, axis=1) * np.linalg.norm(right, axis=1)
    ok = norm > 0
    cos = np.clip(dot[ok] / norm[ok], -1.0, 1.0)
    vals = np.full(idx.size, 180.0)
    vals[ok] = np.degrees(np.arccos(cos))
    theta[idx] = vals
    return theta


def ring_local_minima(values, ring):
    """Strict local minima within each ring; a flat run counts once, at its left end."""
    values = np.asarray(values)
    n = values.shape[0]
    out = np.zeros(n, dtype=bool)
    if n < 3:
        return out
    new_run = np.ones(n, dtype=bool)
    new_run[1:] = (ring[1:] != ring[:-1]) | (values[1:] != values[:-1])
    starts = np.flatnonzero(new_run)
    ends = np.append(starts[1:], n) - 1
    run_ring = ring[starts]
    run_val = values[starts]
    has_left = np.zeros(starts.size, dtype=bool)
    has_left[1:] = run_ring[1:] == run_ring[:-1]
    has_right = np.zeros(starts.size, dtype=bool)
    has_right[:-1] = run_ring[:-1] == run_ring[1:]
    left_val = np.roll(run_val, 1)
    right_val = np.roll(run_val, -1)
    is_min = has_left & has_right & (left_val > run_val) & (right_val > run_val)
    out[starts[is_min]] = True
    return out


def direction_change_filter(frame, cfg=FilterConfig()):
    """Flag points where the scan line bends sharply.

    Returns ``(flags, theta)``. A point is flagged when its angle is below
    ``cfg.dir_angle_thres`` and is a local minimum along its ring.
    """
    frame = check_frame(frame)
    theta = direction_change_theta(frame, cfg.k)
    flags = (theta < cfg.dir_angle_thres) & ring_local_minima(theta, frame.ring)
    pos, length = frame.position_in_ring()
    flags &= (pos >= cfg.k) & (pos <= length - 1 - cfg.k)
    return flags, theta


def elevation_filter(frame, cfg=FilterConfig()):
    """Flag points higher than their same-ring predecessor by more than ``elev_thres``."""
    frame = check_frame(frame)
    z = frame.z
    res = np.zeros(len(frame), dtype=bool)
    if len(frame) > 1:
        res[1:] = (z[1:] - z[:-1]) > cfg.elev_thres
    return res & _same_ring_prev(frame.ring)


def edge_counts(elevated, n, ring=None):
    """Elevated counts among the ``n`` same-ring points left and right of each point."""
    elevated = np.asarray(elevated, dtype=bool)
    size = elevated.shape[0]
    ring = _ring_ids(ring, size)
    csum = np.concatenate([[0], np.cumsum(elevated, dtype=np.int64)])
    i = np.arange(size)
    start = np.searchsorted(ring, ring, side="left")
    stop = np.searchsorted(ring, ring, side="right")
    left_lo = np.maximum(start, i - n)
    right_hi = np.minimum(stop, i + n + 1)
    return csum[i] - csum[left_lo], csum[right_hi] - csum[i + 1]


def edge_filter(elevated, cfg=FilterConfig(), ring=None):
    """Mark transitions between flat and rising stretches of a scan line.

    ``ring`` gives the ring id of each entry (default: a single ring) so the
    count windows can be truncated at ring boundaries. Returns
    ``(edge_start, edge_end)``.
    """
    left, right = edge_counts(elevated, cfg.edge_window_n, ring)
    t = cfg.edge_count_thres
    return (left < t) & (right > t), (left > t) & (right < t)


def continuous_filter(frame, cfg=FilterConfig()):
    """Flag points whose same-ring successor lies closer than ``cont_dist_thres``.

    The last point of each ring takes its predecessor's value. With
    ``mark_both_discontinuous`` the right-hand point of a gap is cleared too.
    """
    frame = check_frame(frame)
    n = len(frame)
    res = np.zeros(n, dtype=bool)
    if n < 2:
        return res
    has_next = np.zeros(n, dtype=bool)
    has_next[:-1] = frame.ring[:-1] == frame.ring[1:]
    gap_ok = np.zeros(n, dtype=bool)
    gap_ok[:-1] = np.linalg.norm(frame.xyz[1:] - frame.xyz[:-1], axis=1) < cfg.cont_dist_thres
    gap_ok &= has_next
    res = gap_ok.copy()
    has_prev = _same_ring_prev(frame.ring)
    last = ~has_next & has_prev
    res[last] = res[np.flatnonzero(last) - 1]
    if cfg.mark_both_discontinuous:
        prev_ok = np.ones(n, dtype=bool)
        prev_ok[1:] = np.where(has_prev[1:], gap_ok[:-1], True)
        res &= prev_ok
    return res


def rise_filter(frame, cfg=FilterConfig()):
    """Flag points where the smoothed height has climbed by ``rise_thres``.

    Compares the mean z of the ``rise_smooth`` points starting at ``i`` with
    the mean z of the same-sized window starting ``rise_baseline`` points
    earlier in the ring. A vertical curb face crossed at a shallow angle rises
    by well under a millimetre per azimuth step, which the point-to-point
    elevation test cannot see; this windowed test can.
    """
    frame = check_frame(frame)
    n = len(frame)
    m, w = cfg.rise_baseline, cfg.rise_smooth
    pos, length = frame.position_in_ring()
    valid = (pos >= m) & (pos + w <= length)
    csum = np.concatenate([[0.0], np.cumsum(frame.z)])
    i = np.arange(n)
    ahead = (csum[np.minimum(i + w, n)] - csum[i]) / w
    base = np.maximum(i - m, 0)
    behind = (csum[np.minimum(base + w, n)] - csum[base]) / w
    return valid & (ahead - behind > cfg.rise_thres)


def compute_features(frame, cfg=FilterConfig()):
    frame = check_frame(frame)
    direction, theta = direction_change_filter(frame, cfg)
    elevated = elevation_filter(frame, cfg)
    start, end = edge_filter(elevated, cfg, frame.ring)
    continuous = continuous_filter(frame, cfg)
    return FeatureFlags(direction, elevated, start, end, continuous, theta, rise_filter(frame, cfg))


def search_candidates(frame, flags):
    """Pick at most one candidate per ring and side.

    Each ring is scanned outward from straight ahead: ascending azimuth on the
    right (x > 0), descending azimuth on the left (x < 0). The first point
    satisfying :meth:`FeatureFlags.qualifying` is taken, i.e. a direction
    change on a continuous stretch backed by a height cue (elevated, edge
    start or cumulative rise).
    """
    frame = check_frame(frame)
    ok = flags.qualifying()
    left, right = [], []
    x = frame.x
    for sl in frame.ring_slices():
        idx = np.arange(sl.start, sl.stop)
        q = ok[sl]
        r_hits = idx[q & (x[sl] > 0)]
        if r_hits.size:
            right.append(r_hits[0])
        l_hits = idx[q & (x[sl] < 0)]
        if l_hits.size:
            left.append(l_hits[-1])
    return CandidateSet(np.array(left, dtype=np.int64), np.array(right, dtype=np.int64))


class CurbFeatureExtractor(TransformerMixin, BaseEstimator):
    """Transformer from a :class:`PointFrame` to its :class:`CandidateSet`.

    After ``transform``, the flags for the last frame are kept in
    ``flags_`` for inspection.
    """

    def __init__(self, k=5, dir_angle_thres=160.0, elev_thres=0.04, edge_window_n=5,
                 edge_count_thres=2, cont_dist_thres=0.5, mark_both_discontinuous=False,
                 rise_baseline=30, rise_smooth=8, rise_thres=0.012):
        self.k = k
        self.dir_angle_thres = dir_angle_thres
        self.elev_thres = elev_thres
        self.edge_window_n = edge_window_n
        self.edge_count_thres = edge_count_thres
        self.cont_dist_thres = cont_dist_thres
        self.mark_both_discontinuous = mark_both_discontinuous
        self.rise_baseline = rise_baseline
        self.rise_smooth = rise_smooth
        self.rise_thres = rise_thres

    def fit(self, X=None, y=None):
        self.config_ = FilterConfig(**self.get_params())
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        self.flags_ = compute_features(X, self.config_)
        return search_candidates(X, self.flags_)
