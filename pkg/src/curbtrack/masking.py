"""False-positive removal: camera bounding boxes and a virtual-scan stixel grid."""

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import yaml
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_frame, check_points
from .exceptions import ConfigError, MalformedFileError

# LiDAR (x right, y forward, z up) -> camera (x right, y down, z forward)
LIDAR_TO_CAMERA = np.array(
    [[1.0, 0.0, 0.0, 0.0],
     [0.0, 0.0, -1.0, 0.0],
     [0.0, 1.0, 0.0, 0.0],
     [0.0, 0.0, 0.0, 1.0]]
)


class MountPose(NamedTuple):
    x: float
    y: float
    z: float
    yaw_deg: float


def _default_mounts():
    return tuple(MountPose(0.9, float(y), -0.5, 90.0) for y in (0.0, 1.3, 2.7, 4.0))


@dataclass(frozen=True)
class CalibrationConfig:
    fx: float = 700.0
    fy: float = 700.0
    cx: float = 640.0
    cy: float = 360.0
    extrinsic: tuple = tuple(map(tuple, LIDAR_TO_CAMERA))
    image_size: tuple = (1280, 720)
    ultrasonic_mounts: tuple = field(default_factory=_default_mounts)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("fx and fy must be positive")
        ext = np.asarray(self.extrinsic, dtype=np.float64)
        if ext.shape != (4, 4) or not np.all(np.isfinite(ext)):
            raise ConfigError("extrinsic must be a finite 4x4 matrix")
        rot = ext[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ConfigError("extrinsic rotation block is not orthonormal")
        if len(self.ultrasonic_mounts) != 4:
            raise ConfigError(f"expected exactly 4 ultrasonic mounts, got {len(self.ultrasonic_mounts)}")
        w, h = self.image_size
        if not (w > 0 and h > 0):
            raise ConfigError("image size must be positive")
        object.__setattr__(self, "extrinsic", tuple(tuple(float(v) for v in row) for row in ext))
        object.__setattr__(self, "ultrasonic_mounts", tuple(MountPose(*map(float, m)) for m in self.ultrasonic_mounts))

    @property
    def matrix(self):
        return np.asarray(self.extrinsic, dtype=np.float64)

    @classmethod
    def from_mapping(cls, data):
        """Build from nested or dotted keys (``intrinsics.fx`` etc.)."""
        flat = _flatten(data or {})
        try:
            kw = {k: float(flat[f"intrinsics.{k}"]) for k in ("fx", "fy", "cx", "cy")}
            rows = []
            for i in range(4):
                row = flat[f"extrinsic.row{i}"]
                if isinstance(row, str):
                    row = row.replace(",", " ").split()
                row = [float(v) for v in row]
                if len(row) != 4:
                    raise ConfigError(f"extrinsic.row{i} needs 4 numbers")
                rows.append(tuple(row))
            kw["extrinsic"] = tuple(rows)
            kw["image_size"] = (int(flat["image.width"]), int(flat["image.height"]))
            mounts = []
            for i in range(4):
                mounts.append(MountPose(*(float(flat[f"ultrasonic.{i}.{k}"]) for k in ("x", "y", "z", "yaw_deg"))))
            kw["ultrasonic_mounts"] = tuple(mounts)
        except KeyError as exc:
            raise ConfigError(f"calibration is missing key {exc.args[0]}") from exc
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid calibration value: {exc}") from exc
        return cls(**kw)

    def to_mapping(self):
        return {
            "intrinsics": {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy},
            "extrinsic": {f"row{i}": list(row) for i, row in enumerate(self.extrinsic)},
            "image": {"width": int(self.image_size[0]), "height": int(self.image_size[1])},
            "ultrasonic": {i: dict(m._asdict()) for i, m in enumerate(self.ultrasonic_mounts)},
        }


def _flatten(data, prefix=""):
    out = {}
    for key, value in dict(data).items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out


def load_calibration(path):
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse calibration {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"calibration {path} is not a key/value document")
    return CalibrationConfig.from_mapping(data)


def save_calibration(path, cal):
    Path(path).write_text(yaml.safe_dump(cal.to_mapping(), sort_keys=False))


@dataclass(frozen=True)
class BoundingBox2D:
    frame_id: int
    label: str
    score: float
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError("box needs x1 < x2 and y1 < y2")

    def clamp(self, image_size):
        w, h = image_size
        x1, x2 = np.clip([self.x1, self.x2], 0, w)
        y1, y2 = np.clip([self.y1, self.y2], 0, h)
        if not (x1 < x2 and y1 < y2):
            return None
        return BoundingBox2D(self.frame_id, self.label, self.score, float(x1), float(y1), float(x2), float(y2))

    def contains(self, u, v):
        return (u >= self.x1) & (u <= self.x2) & (v >= self.y1) & (v <= self.y2)


def parse_detections(text):
    """Parse ``frame_id,class,score,x1,y1,x2,y2`` lines into ``{frame_id: [boxes]}``."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if lineno == 1 and parts[0].lower() in ("frame_id", "frame"):
            continue
        if len(parts) != 7:
            raise MalformedFileError(f"line {lineno}: expected 7 fields, got {len(parts)}")
        try:
            box = BoundingBox2D(int(parts[0]), parts[1], float(parts[2]), *map(float, parts[3:]))
        except ValueError as exc:
            raise MalformedFileError(f"line {lineno}: {exc}") from exc
        out.setdefault(box.frame_id, []).append(box)
    return out


def read_detections(path):
    return parse_detections(Path(path).read_text())


def format_detections(boxes):
    lines = ["frame_id,class,score,x1,y1,x2,y2"]
    for b in boxes:
        lines.append(f"{b.frame_id},{b.label},{b.score:.6g},{b.x1:.6f},{b.y1:.6f},{b.x2:.6f},{b.y2:.6f}")
    return "\n".join(lines) + "\n"


def camera_points(xyz, cal):
    """LiDAR-frame points (n, 3) expressed in camera axes."""
    xyz = check_points(xyz, n_columns=3, name="xyz")
    m = cal.matrix
    return xyz @ m[:3, :3].T + m[:3, 3]


def project_points(xyz, cal):
    """Pixel coordinates (n, 2) and an in-view mask for LiDAR-frame points."""
    cam = camera_points(xyz, cal)
    depth = cam[:, 2]
    front = depth > 0
    uv = np.full((len(cam), 2), np.nan)
    uv[front, 0] = cal.fx * cam[front, 0] / depth[front] + cal.cx
    uv[front, 1] = cal.fy * cam[front, 1] / depth[front] + cal.cy
    w, h = cal.image_size
    with np.errstate(invalid="ignore"):
        inside = front & (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
    return uv, inside


def project_to_image(p, cal) -> Optional[tuple]:
    """Pixel ``(u, v)`` of one point, or ``None`` when behind the camera or out of frame."""
    xyz = np.asarray(p[:3], dtype=np.float64).reshape(1, 3)
    uv, inside = project_points(xyz, cal)
    if not inside[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


def backproject(u, v, depth, cal):
    """LiDAR-frame point seen at pixel ``(u, v)`` with camera depth ``depth``."""
    cam = np.array([(u - cal.cx) * depth / cal.fx, (v - cal.cy) * depth / cal.fy, depth])
    m = cal.matrix
    return m[:3, :3].T @ (cam - m[:3, 3])


def mask_by_boxes(cands, frame, boxes, cal, score_thres=0.5):
    """Drop candidates whose projection falls inside a confident box."""
    frame = check_frame(frame)
    boxes = [b for b in (boxes or []) if b.score >= score_thres]
    ids = {b.frame_id for b in boxes}
    if ids and ids != {frame.frame_id}:
        raise ValueError(f"boxes belong to frames {sorted(ids)}, not {frame.frame_id}")
    if not boxes or len(cands) == 0:
        return cands

    def outside(idx):
        if idx.size == 0:
            return np.ones(0, dtype=bool)
        uv, inside = project_points(frame.xyz[idx], cal)
        hit = np.zeros(idx.size, dtype=bool)
        for b in boxes:
            hit |= inside & b.contains(uv[:, 0], uv[:, 1])
        return ~hit

    return cands.keep(outside)


@dataclass
class VScanGrid:
    """Polar occupancy grid; cell ``(i, j)`` covers azimuth ``[i*az_bin, (i+1)*az_bin)``
    and horizontal range ``[j*range_bin, (j+1)*range_bin)``."""

    az_bin: float
    range_bin: float
    min_z: np.ndarray
    max_z: np.ndarray
    count: np.ndarray

    @property
    def shape(self):
        return self.count.shape

    def cell_of(self, azimuth, rng):
        ia = np.floor(np.asarray(azimuth) / self.az_bin).astype(np.int64) % self.shape[0]
        ir = np.floor(np.asarray(rng) / self.range_bin).astype(np.int64)
        return ia, ir

    def cell_bounds(self, ia, ir):
        return (ia * self.az_bin, (ia + 1) * self.az_bin), (ir * self.range_bin, (ir + 1) * self.range_bin)

    def height(self):
        with np.errstate(invalid="ignore"):
            return np.where(self.count > 0, self.max_z - self.min_z, 0.0)


class Stixel(NamedTuple):
    az_index: int
    range: float
    height: float
    range_index: int


def horizontal_range(frame):
    return np.hypot(frame.x, frame.y)


def build_vscan(frame, az_bin=1.0, range_bin=0.25, obstacle_height_thres=0.3):
    """Accumulate z extents per polar cell and emit stixels for tall cells.

    Returns ``(grid, stixels)`` with stixels ordered by (azimuth, range) cell.
    """
    frame = check_frame(frame)
    if not (az_bin > 0 and range_bin > 0):
        raise ValueError("bin widths must be positive")
    n_az = int(np.ceil(360.0 / az_bin - 1e-9))
    rng = horizontal_range(frame)
    n_r = int(np.floor(rng.max() / range_bin)) + 1 if len(frame) else 1
    count = np.zeros((n_az, n_r), dtype=np.int64)
    min_z = np.full((n_az, n_r), np.inf)
    max_z = np.full((n_az, n_r), -np.inf)
    if len(frame):
        ia = np.minimum(np.floor(frame.azimuth / az_bin).astype(np.int64), n_az - 1)
        ir = np.floor(rng / range_bin).astype(np.int64)
        flat = ia * n_r + ir
        np.add.at(count.reshape(-1), flat, 1)
        np.minimum.at(min_z.reshape(-1), flat, frame.z)
        np.maximum.at(max_z.reshape(-1), flat, frame.z)
    empty = count == 0
    min_z[empty] = np.nan
    max_z[empty] = np.nan
    grid = VScanGrid(float(az_bin), float(range_bin), min_z, max_z, count)
    height = grid.height()
    tall = np.argwhere(height >= obstacle_height_thres)
    stixels = [Stixel(int(i), float(j * range_bin), float(height[i, j]), int(j)) for i, j in tall]
    return grid, stixels


def stixel_fence(stixels, n_az):
    """Nearest stixel range per azimuth bin (``inf`` where none)."""
    fence = np.full(n_az, np.inf)
    for s in stixels:
        fence[s.az_index] = min(fence[s.az_index], s.range)
    return fence


def mask_by_stixels(cands, frame, stixels, margin=0.2, az_bin=1.0):
    """Drop candidates on or behind a stixel in their azimuth bin.

    The occluded region starts ``margin`` before the stixel's near edge and
    is widened sideways by ``margin`` of arc length at the candidate range.
    """
    frame = check_frame(frame)
    if not stixels or len(cands) == 0:
        return cands
    n_az = int(np.ceil(360.0 / az_bin - 1e-9))
    fence = stixel_fence(stixels, n_az)
    rng = horizontal_range(frame)

    def visible(idx):
        if idx.size == 0:
            return np.ones(0, dtype=bool)
        r = rng[idx]
        az = frame.azimuth[idx]
        ia = np.minimum(np.floor(az / az_bin).astype(np.int64), n_az - 1)
        spread = np.degrees(margin / np.maximum(r, 1e-6))
        reach = np.ceil(spread / az_bin).astype(np.int64) + 1
        out = np.ones(idx.size, dtype=bool)
        for k in range(idx.size):
            for d in range(-reach[k], reach[k] + 1):
                j = (ia[k] + d) % n_az
                if not np.isfinite(fence[j]):
                    continue
                lo, hi = j * az_bin, (j + 1) * az_bin
                gap = _angular_gap(az[k], lo, hi)
                if gap <= spread[k] and r[k] >= fence[j] - margin:
                    out[k] = False
                    break
        return out

    return cands.keep(visible)


def _angular_gap(a, lo, hi):
    """Degrees from angle ``a`` to the arc ``[lo, hi)``; 0 inside."""
    if lo <= a < hi:
        return 0.0
    d1 = (lo - a) % 360.0
    d2 = (a - hi) % 360.0
    return min(d1, d2)


class BoxMasker(BaseEstimator):
    def __init__(self, calibration=None, score_thres=0.5):
        self.calibration = calibration
        self.score_thres = score_thres

    def fit(self, frame, boxes=None):
        self.frame_ = check_frame(frame)
        self.boxes_ = list(boxes or [])
        self.calibration_ = self.calibration or CalibrationConfig()
        return self

    def transform(self, cands):
        check_is_fitted(self, "frame_")
        return mask_by_boxes(cands, self.frame_, self.boxes_, self.calibration_, self.score_thres)


class VScanMasker(TransformerMixin, BaseEstimator):
    """Fit on a frame to build its stixels, then transform candidate sets."""

    def __init__(self, az_bin=1.0, range_bin=0.25, obstacle_height_thres=0.3, margin=0.2):
        self.az_bin = az_bin
        self.range_bin = range_bin
        self.obstacle_height_thres = obstacle_height_thres
        self.margin = margin

    def fit(self, frame, y=None):
        self.frame_ = check_frame(frame)
        self.grid_, self.stixels_ = build_vscan(frame, self.az_bin, self.range_bin, self.obstacle_height_thres)
        return self

    def transform(self, cands):
        check_is_fitted(self, "stixels_")
        return mask_by_stixels(cands, self.frame_, self.stixels_, self.margin, self.az_bin)


@dataclass(frozen=True)
class MaskingConfig:
    score_thres: float = 0.5
    az_bin: float = 1.0
    range_bin: float = 0.25
    obstacle_height_thres: float = 0.3
    margin: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.score_thres <= 1.0:
            raise ValueError("score_thres must be in [0, 1]")
        for name in ("az_bin", "range_bin", "obstacle_height_thres"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
