"""Frame ingestion: binary parsers, ring reconstruction and ring downsampling.

Internal vehicle frame convention: y forward, x right, z up. Azimuth is the
compass-style angle ``atan2(x, y)`` in degrees, so 0 points straight ahead and
90 points to the right.
"""

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_frame, check_points, check_ring_count
from .exceptions import IngestWarning, MalformedFileError

KITTI_RECORD = np.dtype("<f4")
CSF1_MAGIC = b"CSF1"
CSF1_HEADER = struct.Struct("<4sIHQ")
CSF1_POINT = np.dtype(
    [
        ("x", "<f4"),
        ("y", "<f4"),
        ("z", "<f4"),
        ("intensity", "<f4"),
        ("ring", "<u2"),
        ("azimuth", "<f4"),
    ]
)
# largest float32 strictly below 360
_AZ_MAX_F32 = np.nextafter(np.float32(360.0), np.float32(0.0))


class LidarPoint(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float = 0.0
    ring: int = 0
    azimuth: float = 0.0


@dataclass(frozen=True)
class RingModel:
    """Per-ring elevation table used to recover scan membership."""

    vertical_angles: tuple
    angle_tolerance: float = 0.5

    def __post_init__(self):
        angles = np.asarray(self.vertical_angles, dtype=np.float64)
        if angles.ndim != 1 or angles.size == 0:
            raise ValueError("vertical_angles must be a non-empty sequence")
        if np.any(np.diff(angles) <= 0):
            raise ValueError("vertical_angles must be strictly increasing")
        if not self.angle_tolerance > 0:
            raise ValueError("angle_tolerance must be > 0")
        object.__setattr__(self, "vertical_angles", tuple(float(a) for a in angles))

    @property
    def ring_count(self):
        return len(self.vertical_angles)

    @classmethod
    def uniform(cls, lowest, highest, count, angle_tolerance=0.5):
        return cls(tuple(np.linspace(lowest, highest, count)), angle_tolerance)

    @classmethod
    def vlp16(cls, angle_tolerance=0.5):
        return cls.uniform(-15.0, 15.0, 16, angle_tolerance)

    @classmethod
    def hdl64(cls, angle_tolerance=0.5):
        # upper block: +2 .. -8.33 in 1/3 deg steps; lower block: -8.83 .. -24.33 in 1/2 deg steps
        upper = 2.0 - np.arange(32) / 3.0
        lower = -8.83 - 0.5 * np.arange(32)
        return cls(tuple(np.sort(np.concatenate([upper, lower]))), angle_tolerance)

    @classmethod
    def from_file(cls, path, angle_tolerance=0.5):
        """One elevation angle in degrees per line; ``#`` starts a comment."""
        angles = []
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                angles.append(float(line))
        return cls(tuple(sorted(angles)), angle_tolerance)


@dataclass(frozen=True, eq=False)
class PointFrame:
    """Ring- and azimuth-ordered point cloud.

    Arrays are parallel and of equal length. Use :meth:`from_arrays` to build a
    frame from unordered data; the constructor only validates.
    """

    xyz: np.ndarray
    intensity: np.ndarray
    ring: np.ndarray
    azimuth: np.ndarray
    ring_count: int = 16
    frame_id: int = 0
    timestamp: int = 0
    _bounds: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        xyz = np.ascontiguousarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = xyz.shape[0]
        intensity = np.asarray(self.intensity, dtype=np.float64).reshape(n)
        ring = np.asarray(self.ring, dtype=np.int64).reshape(n)
        azimuth = np.asarray(self.azimuth, dtype=np.float64).reshape(n)
        ring_count = check_ring_count(self.ring_count)
        if not np.all(np.isfinite(xyz)):
            raise ValueError("frame coordinates must be finite")
        if n and (ring.min() < 0 or ring.max() >= ring_count):
            raise ValueError("ring index out of range for ring_count")
        if n and (azimuth.min() < 0 or azimuth.max() >= 360.0):
            raise ValueError("azimuth must lie in [0, 360)")
        if n > 1:
            dr = np.diff(ring)
            if np.any(dr < 0) or np.any((dr == 0) & (np.diff(azimuth) < 0)):
                raise ValueError("points must be ordered by (ring, azimuth)")
        for name, value in (("xyz", xyz), ("intensity", intensity), ("ring", ring), ("azimuth", azimuth)):
            value.flags.writeable = False
            object.__setattr__(self, name, value)
        object.__setattr__(self, "ring_count", ring_count)
        bounds = np.searchsorted(ring, np.arange(ring_count + 1), side="left")
        object.__setattr__(self, "_bounds", bounds)

    @classmethod
    def from_arrays(cls, xyz, intensity=None, ring=None, azimuth=None, ring_count=16,
                    frame_id=0, timestamp=0):
        """Build a frame from unordered arrays, computing azimuth if absent."""
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        n = xyz.shape[0]
        if intensity is None:
            intensity = np.zeros(n)
        if ring is None:
            ring = np.zeros(n, dtype=np.int64)
        if azimuth is None:
            azimuth = azimuth_deg(xyz[:, 0], xyz[:, 1])
        ring = np.asarray(ring, dtype=np.int64)
        azimuth = np.asarray(azimuth, dtype=np.float64)
        order = np.lexsort((azimuth, ring))
        return cls(xyz[order], np.asarray(intensity, dtype=np.float64)[order], ring[order],
                   azimuth[order], ring_count, frame_id, timestamp)

    @classmethod
    def empty(cls, ring_count=16, frame_id=0, timestamp=0):
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0),
                   ring_count, frame_id, timestamp)

    def __len__(self):
        return self.xyz.shape[0]

    @property
    def x(self):
        return self.xyz[:, 0]

    @property
    def y(self):
        return self.xyz[:, 1]

    @property
    def z(self):
        return self.xyz[:, 2]

    @property
    def ring_bounds(self):
        """Offsets ``b`` such that ring ``r`` occupies ``[b[r], b[r+1])``."""
        return self._bounds

    def ring_slices(self):
        b = self._bounds
        return [slice(b[r], b[r + 1]) for r in range(self.ring_count) if b[r + 1] > b[r]]

    def position_in_ring(self):
        """Index of each point within its own ring, and that ring's length."""
        start = self._bounds[self.ring]
        length = self._bounds[self.ring + 1] - start
        return np.arange(len(self)) - start, length

    def point(self, i):
        x, y, z = self.xyz[i]
        return LidarPoint(float(x), float(y), float(z), float(self.intensity[i]),
                          int(self.ring[i]), float(self.azimuth[i]))

    def subset(self, mask):
        """Frame restricted to ``mask`` (boolean or index array); order preserved."""
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.sort(np.asarray(mask))
        return PointFrame(self.xyz[idx], self.intensity[idx], self.ring[idx], self.azimuth[idx],
                          self.ring_count, self.frame_id, self.timestamp)

    def equals(self, other):
        return (
            isinstance(other, PointFrame)
            and self.ring_count == other.ring_count
            and self.frame_id == other.frame_id
            and self.timestamp == other.timestamp
            and np.array_equal(self.xyz, other.xyz)
            and np.array_equal(self.intensity, other.intensity)
            and np.array_equal(self.ring, other.ring)
            and np.array_equal(self.azimuth, other.azimuth)
        )


def azimuth_deg(x, y):
    """Compass azimuth of horizontal coordinates in [0, 360)."""
    az = np.degrees(np.arctan2(x, y))
    az = np.where(az < 0, az + 360.0, az)
    # -0.0 and tiny negatives can round up to exactly 360
    return np.where(az >= 360.0, 0.0, az)


def spherical_to_cartesian(r, azimuth, elevation):
    """Convert (range, azimuth, elevation) in metres/degrees to vehicle x, y, z."""
    r = np.asarray(r, dtype=np.float64)
    az = np.radians(azimuth)
    el = np.radians(elevation)
    horiz = r * np.cos(el)
    return horiz * np.sin(az), horiz * np.cos(az), r * np.sin(el)


def cartesian_to_spherical(x, y, z):
    """Inverse of :func:`spherical_to_cartesian`; elevation is 0 at the origin."""
    x, y, z = (np.asarray(v, dtype=np.float64) for v in (x, y, z))
    horiz = np.hypot(x, y)
    r = np.hypot(horiz, z)
    elevation = np.degrees(np.arctan2(z, horiz))
    return r, azimuth_deg(x, y), elevation


def parse_kitti_bin(data):
    """Parse a KITTI velodyne scan into an ``(n, 4)`` float32 array.

    Records are four little-endian float32 values ``x, y, z, reflectance`` in
    the sensor's native axes. Records holding NaN or Inf are dropped and an
    :class:`IngestWarning` reports how many.
    """
    data = bytes(data)
    if len(data) % 16:
        raise MalformedFileError(f"KITTI scan length {len(data)} is not a multiple of 16 bytes")
    records = np.frombuffer(data, dtype=KITTI_RECORD).reshape(-1, 4)
    finite = np.all(np.isfinite(records), axis=1)
    dropped = int(records.shape[0] - finite.sum())
    if dropped:
        warnings.warn(f"dropped {dropped} non-finite KITTI record(s)", IngestWarning, stacklevel=2)
        records = records[finite]
    return records.copy()


def write_kitti_bin(records):
    records = np.asarray(records)
    if records.ndim != 2 or records.shape[1] != 4:
        raise ValueError("KITTI records must have shape (n, 4)")
    return records.astype(KITTI_RECORD).tobytes()


def kitti_to_vehicle(records, axes=("-y", "x", "z")):
    """Remap native KITTI axes (x forward, y left) into the vehicle frame.

    ``axes`` names the source column feeding each of vehicle x, y, z, with an
    optional leading minus. The default gives vehicle ``(-y, x, z)``.
    Reflectance is clipped to [0, 1] and returned as the fourth column.
    """
    records = np.asarray(records, dtype=np.float64)
    cols = {"x": 0, "y": 1, "z": 2}
    out = np.empty((records.shape[0], 4))
    for k, spec in enumerate(axes):
        sign = -1.0 if spec.startswith("-") else 1.0
        out[:, k] = sign * records[:, cols[spec.lstrip("+-")]]
    out[:, 3] = np.clip(records[:, 3], 0.0, 1.0)
    return out


def assign_rings(points, model, frame_id=0, timestamp=0):
    """Classify each point into the ring with the nearest vertical angle.

    ``points`` is ``(n, 3)`` or ``(n, 4)`` (x, y, z[, intensity]) in the vehicle
    frame. Points whose angular residual exceeds ``model.angle_tolerance``
    (or that sit at the origin) are dropped with an :class:`IngestWarning`.
    """
    pts = check_points(points, n_columns=(3, 4))
    angles = np.asarray(model.vertical_angles)
    r, _, elevation = cartesian_to_spherical(pts[:, 0], pts[:, 1], pts[:, 2])
    hi = np.clip(np.searchsorted(angles, elevation), 1, len(angles) - 1) if len(angles) > 1 else np.zeros(len(pts), int)
    lo = np.maximum(hi - 1, 0)
    pick = np.where(np.abs(elevation - angles[lo]) <= np.abs(angles[hi] - elevation), lo, hi)
    residual = np.abs(elevation - angles[pick])
    keep = (residual <= model.angle_tolerance) & (r > 0)
    dropped = int(len(pts) - keep.sum())
    if dropped:
        warnings.warn(f"dropped {dropped} point(s) outside every ring tolerance band",
                      IngestWarning, stacklevel=2)
    intensity = pts[keep, 3] if pts.shape[1] == 4 else None
    return PointFrame.from_arrays(pts[keep, :3], intensity, pick[keep], ring_count=model.ring_count,
                                  frame_id=frame_id, timestamp=timestamp)


def downsample_rings(frame, target):
    """Keep every ``ring_count // target``-th ring and renumber densely."""
    frame = check_frame(frame)
    target = int(target)
    if target <= 0 or frame.ring_count % target:
        raise ValueError(f"target {target} does not divide ring_count {frame.ring_count}")
    check_ring_count(target)
    stride = frame.ring_count // target
    keep = frame.ring % stride == 0
    return PointFrame(frame.xyz[keep], frame.intensity[keep], frame.ring[keep] // stride,
                      frame.azimuth[keep], target, frame.frame_id, frame.timestamp)


def encode_csf1(frame):
    frame = check_frame(frame)
    body = np.empty(len(frame), dtype=CSF1_POINT)
    body["x"], body["y"], body["z"] = frame.x, frame.y, frame.z
    body["intensity"] = frame.intensity
    body["ring"] = frame.ring
    body["azimuth"] = np.minimum(frame.azimuth.astype(np.float32), _AZ_MAX_F32)
    header = CSF1_HEADER.pack(CSF1_MAGIC, len(frame), frame.ring_count, int(frame.timestamp))
    return header + body.tobytes()


def decode_csf1(data, frame_id=0):
    data = bytes(data)
    if len(data) < CSF1_HEADER.size:
        raise MalformedFileError("CSF1 file shorter than its header")
    magic, count, ring_count, timestamp = CSF1_HEADER.unpack_from(data)
    if magic != CSF1_MAGIC:
        raise MalformedFileError(f"bad CSF1 magic {magic!r}")
    expected = CSF1_HEADER.size + count * CSF1_POINT.itemsize
    if len(data) != expected:
        raise MalformedFileError(f"CSF1 size {len(data)} does not match {count} points")
    body = np.frombuffer(data, dtype=CSF1_POINT, offset=CSF1_HEADER.size, count=count)
    xyz = np.stack([body["x"], body["y"], body["z"]], axis=1).astype(np.float64)
    try:
        return PointFrame(xyz, body["intensity"].astype(np.float64), body["ring"].astype(np.int64),
                          body["azimuth"].astype(np.float64), ring_count, frame_id, timestamp)
    except ValueError as exc:
        raise MalformedFileError(f"invalid CSF1 content: {exc}") from exc


def write_csf1(path, frame):
    Path(path).write_bytes(encode_csf1(frame))


def read_csf1(path, frame_id=None):
    path = Path(path)
    if frame_id is None:
        frame_id = frame_id_from_path(path)
    return decode_csf1(path.read_bytes(), frame_id)


def read_kitti_frame(path, model, axes=("-y", "x", "z"), frame_id=None):
    """Read a KITTI ``.bin`` file straight into a ring-assigned frame."""
    path = Path(path)
    if frame_id is None:
        frame_id = frame_id_from_path(path)
    records = kitti_to_vehicle(parse_kitti_bin(path.read_bytes()), axes)
    return assign_rings(records, model, frame_id=frame_id)


def frame_id_from_path(path):
    digits = "".join(ch for ch in Path(path).stem if ch.isdigit())
    return int(digits) if digits else 0


class RingAssigner(TransformerMixin, BaseEstimator):
    """Transformer wrapping :func:`assign_rings` (and optionally downsampling).

    ``transform`` takes an ``(n, 3|4)`` array of vehicle-frame points and
    returns a :class:`PointFrame`.
    """

    def __init__(self, vertical_angles=None, angle_tolerance=0.5, target_rings=None):
        self.vertical_angles = vertical_angles
        self.angle_tolerance = angle_tolerance
        self.target_rings = target_rings

    def fit(self, X=None, y=None):
        angles = self.vertical_angles
        if angles is None:
            angles = RingModel.vlp16().vertical_angles
        self.model_ = RingModel(tuple(angles), self.angle_tolerance)
        check_ring_count(self.model_.ring_count)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        frame = assign_rings(X, self.model_)
        if self.target_rings is not None:
            frame = downsample_rings(frame, self.target_rings)
        return frame
