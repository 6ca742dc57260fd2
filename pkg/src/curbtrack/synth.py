"""Analytic scene generator for labeled LiDAR frames and ultrasonic logs.

Scenes are built from a flat road plane, curbs modelled as vertical steps
following a cubic ``x = c3*y**3 + c2*y**2 + c1*y + c0``, oriented boxes and
vertical walls. Rays are cast exactly against these surfaces, so with zero
noise every returned point lies on a surface to machine precision.
"""

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import yaml

from .exceptions import ConfigError
from .ingest import PointFrame, RingModel

ROAD, CURB_FACE, CURB_TOP, BOX, WALL = 0, 1, 2, 3, 4
SURFACE_NAMES = {ROAD: "road", CURB_FACE: "curb_face", CURB_TOP: "curb_top", BOX: "box", WALL: "wall"}

NO_ECHO_DISTANCE = 10.0
_GRID_STEPS = 96
_BISECT_STEPS = 60


@dataclass
class CurbSpec:
    side: str = "right"
    coeffs: tuple = (0.0, 0.0, 0.0, 3.5)
    height: float = 0.12

    def __post_init__(self):
        if self.side not in ("left", "right"):
            raise ConfigError(f"curb side must be left or right, got {self.side!r}")
        if not self.height > 0:
            raise ConfigError("curb height must be > 0")
        self.coeffs = tuple(float(c) for c in self.coeffs)
        if len(self.coeffs) != 4:
            raise ConfigError("curb coeffs must be (c3, c2, c1, c0)")

    @property
    def sign(self):
        return 1.0 if self.side == "right" else -1.0

    def lateral(self, y):
        c3, c2, c1, c0 = self.coeffs
        return ((c3 * y + c2) * y + c1) * y + c0


@dataclass
class BoxObstacle:
    """Oriented box. ``yaw_deg`` turns the length axis from +y toward +x."""

    center: tuple = (0.0, 0.0)
    size: tuple = (4.5, 1.8, 1.5)
    yaw_deg: float = 0.0
    base_z: float = None
    label: str = "car"


@dataclass
class WallObstacle:
    start: tuple = (8.0, -20.0)
    end: tuple = (8.0, 40.0)
    height: float = 2.0


@dataclass
class LidarMount:
    height: float = 0.6
    vertical_angles: tuple = tuple(np.linspace(-15.0, 15.0, 16))
    azimuth_resolution: float = 0.2
    max_range: float = 100.0

    def ring_model(self, angle_tolerance=0.5):
        return RingModel(tuple(self.vertical_angles), angle_tolerance)


@dataclass
class UltrasonicMount:
    x: float = 0.9
    y: float = 0.0
    z: float = -0.5
    yaw_deg: float = 90.0


def default_ultrasonic_mounts():
    return [UltrasonicMount(0.9, y, -0.5, 90.0) for y in (0.0, 1.3, 2.7, 4.0)]


@dataclass
class NoiseSpec:
    range_sigma: float = 0.0
    ultrasonic_sigma: float = 0.0
    spike_probability: float = 0.0


@dataclass
class SceneSpec:
    curbs: list = field(default_factory=lambda: [CurbSpec()])
    road_z: float = None
    boxes: list = field(default_factory=list)
    walls: list = field(default_factory=list)
    ego_box: BoxObstacle = None
    lidar: LidarMount = field(default_factory=LidarMount)
    ultrasonic_mounts: list = field(default_factory=default_ultrasonic_mounts)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0

    def __post_init__(self):
        if self.road_z is None:
            self.road_z = -float(self.lidar.height)
        if not self.lidar.azimuth_resolution > 0:
            raise ConfigError("azimuth_resolution must be > 0")
        if self.road_z >= 0:
            raise ConfigError("road_z must be below the sensor")
        for curb in self.curbs:
            if curb.height >= -self.road_z:
                raise ConfigError("curb height must stay below the sensor")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        try:
            lidar = LidarMount(**data.pop("lidar", {}) or {})
            kwargs = dict(
                curbs=[CurbSpec(**c) for c in data.pop("curbs", [asdict(CurbSpec())])],
                boxes=[BoxObstacle(**b) for b in data.pop("boxes", [])],
                walls=[WallObstacle(**w) for w in data.pop("walls", [])],
                lidar=lidar,
                noise=NoiseSpec(**data.pop("noise", {}) or {}),
            )
            ego = data.pop("ego_box", None)
            kwargs["ego_box"] = BoxObstacle(**ego) if ego else None
            if "ultrasonic_mounts" in data:
                kwargs["ultrasonic_mounts"] = [UltrasonicMount(**m) for m in data.pop("ultrasonic_mounts")]
            kwargs.update(data)
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"invalid scene description: {exc}") from exc


def load_scene(path):
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse scene file {path}: {exc}") from exc
    return SceneSpec.from_dict(data)


def save_scene(path, scene):
    data = scene.to_dict()
    Path(path).write_text(yaml.safe_dump(_plain(data), sort_keys=False))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass
class FrameLabels:
    """Per-point ground truth emitted alongside a rendered frame.

    ``surface`` holds one of the surface codes, ``object_index`` the index of
    the curb/box/wall hit (-1 for road). ``corner_index`` maps
    ``(ring, side)`` to the point nearest the road-to-face kink seen when
    scanning outward from straight ahead.
    """

    surface: np.ndarray
    object_index: np.ndarray
    corner_index: dict
    kink_xy: dict


def _ray_directions(mount):
    az = np.arange(0.0, 360.0, mount.azimuth_resolution)
    el = np.asarray(mount.vertical_angles, dtype=np.float64)
    ring = np.repeat(np.arange(el.size), az.size)
    azg = np.tile(az, el.size)
    elg = np.repeat(el, az.size)
    return ring, azg, elg


def _curb_g(curb, s, sin_az, cos_az):
    """Signed lateral offset of the horizontal ray point; > 0 inside the raised side."""
    return curb.sign * (s * sin_az - curb.lateral(s * cos_az))


def _first_entry(curb, s_max, sin_az, cos_az):
    """Smallest s in (0, s_max] where the ray enters the raised side, else inf."""
    n = s_max.size
    frac = np.linspace(0.0, 1.0, _GRID_STEPS + 1)[1:]
    s_grid = s_max[:, None] * frac[None, :]
    g = _curb_g(curb, s_grid, sin_az[:, None], cos_az[:, None])
    g0 = _curb_g(curb, np.zeros(n), sin_az, cos_az)
    prev = np.concatenate([g0[:, None], g[:, :-1]], axis=1)
    entering = (prev < 0) & (g >= 0)
    has = entering.any(axis=1)
    out = np.full(n, np.inf)
    if not has.any():
        return out
    k = np.argmax(entering[has], axis=1)
    lo = np.where(k == 0, 0.0, s_grid[has, np.maximum(k - 1, 0)])
    hi = s_grid[has, k]
    sa, ca = sin_az[has], cos_az[has]
    for _ in range(_BISECT_STEPS):
        mid = 0.5 * (lo + hi)
        inside = _curb_g(curb, mid, sa, ca) >= 0
        hi = np.where(inside, mid, hi)
        lo = np.where(inside, lo, mid)
    out[has] = hi
    return out


def _box_hit(box, road_z, d):
    """Slant distance to the first intersection with an oriented box, inf if none."""
    yaw = np.radians(box.yaw_deg)
    along = np.array([np.sin(yaw), np.cos(yaw)])
    across = np.array([np.cos(yaw), -np.sin(yaw)])
    c = np.asarray(box.center, dtype=np.float64)
    length, width, height = box.size
    base = road_z if box.base_z is None else box.base_z
    # origin is the sensor at (0, 0, 0)
    o_u, o_v = -c @ along, -c @ across
    d_u = d[:, 0] * along[0] + d[:, 1] * along[1]
    d_v = d[:, 0] * across[0] + d[:, 1] * across[1]
    t_near = np.full(len(d), -np.inf)
    t_far = np.full(len(d), np.inf)
    for o, dd, lo, hi in ((o_u, d_u, -length / 2, length / 2), (o_v, d_v, -width / 2, width / 2),
                          (0.0, d[:, 2], base, base + height)):
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - o) / dd
            t2 = (hi - o) / dd
        parallel = np.abs(dd) < 1e-15
        inside = (o >= lo) & (o <= hi)
        # parallel rays: unbounded inside the slab, a miss outside it
        t1 = np.where(parallel, np.where(inside, -np.inf, np.inf), t1)
        t2 = np.where(parallel, np.inf, t2)
        t_near = np.maximum(t_near, np.minimum(t1, t2))
        t_far = np.minimum(t_far, np.maximum(t1, t2))
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def _wall_hit(wall, road_z, sin_az, cos_az, tan_el, cos_el):
    a = np.asarray(wall.start, dtype=np.float64)
    b = np.asarray(wall.end, dtype=np.float64)
    e = b - a
    # solve s * (sin, cos) = a + u * e
    det = -sin_az * e[1] + cos_az * e[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (-a[0] * e[1] + a[1] * e[0]) / det
        u = (sin_az * a[1] - cos_az * a[0]) / det
    z = s * tan_el
    ok = (np.abs(det) > 1e-15) & (s > 0) & (u >= 0) & (u <= 1) & (z >= road_z) & (z <= road_z + wall.height)
    return np.where(ok, s / cos_el, np.inf)


def render_lidar_frame(scene, frame_id=0, timestamp=None):
    """Ray-cast one frame of the scene.

    Returns ``(PointFrame, FrameLabels)``. Rays that hit nothing within the
    mount's ``max_range`` or that hit the ego body are omitted. Range noise is
    drawn from a generator seeded by ``(scene.seed, frame_id)``.
    """
    mount = scene.lidar
    road_z = scene.road_z
    ring, az, el = _ray_directions(mount)
    az_r, el_r = np.radians(az), np.radians(el)
    sin_az, cos_az = np.sin(az_r), np.cos(az_r)
    cos_el, tan_el = np.cos(el_r), np.tan(el_r)
    d = np.stack([cos_el * sin_az, cos_el * cos_az, np.sin(el_r)], axis=1)
    n = len(az)
    s_cap = mount.max_range * cos_el

    best_t = np.full(n, np.inf)
    surface = np.full(n, -1, dtype=np.int64)
    obj = np.full(n, -1, dtype=np.int64)

    def take(t, code, index):
        better = t < best_t
        best_t[better] = t[better]
        surface[better] = code
        obj[better] = index

    with np.errstate(divide="ignore", invalid="ignore"):
        s_ground = np.where(tan_el < 0, road_z / tan_el, np.inf)
    s_ground_c = np.minimum(s_ground, s_cap)

    on_road = np.isfinite(s_ground)
    for curb in scene.curbs:
        on_road &= ~(_curb_g(curb, np.where(on_road, s_ground, 0.0), sin_az, cos_az) >= 0)
    take(np.where(on_road, s_ground / cos_el, np.inf), ROAD, -1)

    for ci, curb in enumerate(scene.curbs):
        top_z = road_z + curb.height
        s_entry = _first_entry(curb, s_ground_c, sin_az, cos_az)
        with np.errstate(invalid="ignore"):
            z_entry = s_entry * tan_el
        face = np.isfinite(s_entry) & (z_entry <= top_z) & (z_entry >= road_z)
        take(np.where(face, s_entry / cos_el, np.inf), CURB_FACE, ci)
        with np.errstate(divide="ignore", invalid="ignore"):
            s_top = np.where(tan_el < 0, top_z / tan_el, np.inf)
        top = np.isfinite(s_top) & (_curb_g(curb, np.where(np.isfinite(s_top), s_top, 0.0), sin_az, cos_az) >= 0)
        take(np.where(top, s_top / cos_el, np.inf), CURB_TOP, ci)

    for bi, box in enumerate(scene.boxes):
        take(_box_hit(box, road_z, d), BOX, bi)
    for wi, wall in enumerate(scene.walls):
        take(_wall_hit(wall, road_z, sin_az, cos_az, tan_el, cos_el), WALL, wi)

    keep = np.isfinite(best_t) & (best_t <= mount.max_range)
    if scene.ego_box is not None:
        keep &= ~(_box_hit(scene.ego_box, road_z, d) < best_t)

    t = best_t[keep]
    if scene.noise.range_sigma > 0:
        rng = np.random.default_rng([int(scene.seed), int(frame_id)])
        t = t + rng.normal(0.0, scene.noise.range_sigma, t.size)
    xyz = d[keep] * t[:, None]
    azk = az[keep]
    if timestamp is None:
        timestamp = int(frame_id) * 100_000
    frame = PointFrame(xyz, np.full(t.size, 0.5), ring[keep], azk, len(mount.vertical_angles),
                       int(frame_id), int(timestamp))
    surf, objk = surface[keep], obj[keep]
    corner, kink = _corners(scene, frame, surf, objk)
    return frame, FrameLabels(surf, objk, corner, kink)


def _corners(scene, frame, surface, obj):
    """Locate, per ring and curb, the road-to-face transition nearest straight ahead."""
    corner, kink = {}, {}
    el_all = np.asarray(scene.lidar.vertical_angles)
    for sl in frame.ring_slices():
        r = int(frame.ring[sl.start])
        tan_el = np.tan(np.radians(el_all[r]))
        if tan_el >= 0:
            continue
        s_ground = scene.road_z / tan_el
        for ci, curb in enumerate(scene.curbs):
            idx = np.arange(sl.start, sl.stop)
            if curb.side == "left":
                idx = idx[::-1]
            side_mask = (frame.x[idx] > 0) if curb.side == "right" else (frame.x[idx] < 0)
            idx = idx[side_mask]
            surf = surface[idx]
            hits = (surf == CURB_FACE) & (obj[idx] == ci)
            prev_road = np.concatenate([[False], surf[:-1] == ROAD])
            trans = np.flatnonzero(hits & prev_road)
            if trans.size == 0:
                continue
            j = trans[0]
            a, b = idx[j - 1], idx[j]
            az_a, az_b = frame.azimuth[a], frame.azimuth[b]

            def inside(az_deg):
                rad = np.radians(az_deg)
                return _curb_g(curb, s_ground, np.sin(rad), np.cos(rad)) >= 0

            lo, hi = az_a, az_b
            for _ in range(_BISECT_STEPS):
                mid = 0.5 * (lo + hi)
                if inside(mid):
                    hi = mid
                else:
                    lo = mid
            k_az = np.radians(0.5 * (lo + hi))
            kink[(r, curb.side)] = (s_ground * np.sin(k_az), s_ground * np.cos(k_az))
            kink_deg = np.degrees(k_az)
            corner[(r, curb.side)] = int(a if abs(az_a - kink_deg) <= abs(az_b - kink_deg) else b)
    return corner, kink


def render_ultrasonic(scene, timestamp):
    """One reading per ultrasonic mount at ``timestamp`` (microseconds).

    The true value is the horizontal distance along the mount axis to the
    nearest curb face, or :data:`NO_ECHO_DISTANCE` when none is in range.
    """
    from .ultrasonic import UltrasonicReading

    rng = np.random.default_rng([int(scene.seed), 7919, int(timestamp)])
    readings = []
    for sid, mount in enumerate(scene.ultrasonic_mounts):
        true = true_ultrasonic_distance(scene, mount)
        value = true + (rng.normal(0.0, scene.noise.ultrasonic_sigma) if scene.noise.ultrasonic_sigma > 0 else 0.0)
        if scene.noise.spike_probability > 0 and rng.random() < scene.noise.spike_probability:
            value = rng.uniform(0.0, NO_ECHO_DISTANCE)
        readings.append(UltrasonicReading(int(timestamp), sid, max(float(value), 0.0)))
    return readings


def true_ultrasonic_distance(scene, mount):
    yaw = np.radians(mount.yaw_deg)
    sa, ca = np.sin(yaw), np.cos(yaw)
    best = NO_ECHO_DISTANCE
    for curb in scene.curbs:
        # curb surface relative to the mount: shift the lateral model by the mount offset
        shifted = CurbSpec(curb.side, _shift_cubic(curb.coeffs, mount.x, mount.y), curb.height)
        s = _first_entry(shifted, np.array([NO_ECHO_DISTANCE]), np.array([sa]), np.array([ca]))[0]
        if np.isfinite(s):
            best = min(best, float(s))
    return best


def _shift_cubic(coeffs, dx, dy):
    """Coefficients of ``x' = f(y' + dy) - dx`` for a cubic ``f``."""
    shifted = np.poly1d(coeffs)(np.poly1d([1.0, dy])) - dx
    c = np.zeros(4)
    c[4 - len(shifted.coeffs):] = shifted.coeffs
    return tuple(c)


def ground_truth_of(scene, frame_id=0):
    """Ground-truth curbs clipped to the span where some ring meets the curb line.

    The span is the extent of the analytic intersections between each
    downward ring's ground circle and the curb line (occlusion ignored).
    """
    from .evaluation import GroundTruthCurb

    out = []
    for curb in scene.curbs:
        ys = curb_ring_intersections(scene, curb)
        if ys.size == 0:
            continue
        c3, c2, c1, c0 = curb.coeffs
        out.append(GroundTruthCurb(frame_id, curb.side, c3, c2, c1, c0, float(ys.min()), float(ys.max())))
    return out


def curb_ring_intersections(scene, curb):
    """Longitudinal positions where ring ground circles cross the curb line."""
    ys = []
    for el in scene.lidar.vertical_angles:
        tan_el = np.tan(np.radians(el))
        if tan_el >= 0:
            continue
        radius = scene.road_z / tan_el
        if radius > scene.lidar.max_range * np.cos(np.radians(el)):
            continue
        f = np.poly1d(curb.coeffs)
        # f(y)^2 + y^2 - R^2 = 0
        h = f * f + np.poly1d([1.0, 0.0, 0.0]) - radius**2
        roots = np.roots(h.coeffs)
        real = roots[np.abs(roots.imag) < 1e-9].real
        for y in real:
            if curb.sign * f(y) > 0:
                ys.append(float(y))
    return np.asarray(ys)


def box_image_bbox(box, road_z, calibration):
    """Tight pixel rectangle around a box's projected corners, clamped to the image.

    Returns ``None`` when no corner is in front of the camera.
    """
    from .masking import camera_points

    yaw = np.radians(box.yaw_deg)
    along = np.array([np.sin(yaw), np.cos(yaw)])
    across = np.array([np.cos(yaw), -np.sin(yaw)])
    length, width, height = box.size
    base = road_z if box.base_z is None else box.base_z
    corners = []
    for su in (-0.5, 0.5):
        for sv in (-0.5, 0.5):
            xy = np.asarray(box.center) + su * length * along + sv * width * across
            for z in (base, base + height):
                corners.append((xy[0], xy[1], z))
    cam = camera_points(np.asarray(corners), calibration)
    front = cam[:, 2] > 1e-6
    if not front.any():
        return None
    cam = cam[front]
    u = calibration.fx * cam[:, 0] / cam[:, 2] + calibration.cx
    v = calibration.fy * cam[:, 1] / cam[:, 2] + calibration.cy
    w, h = calibration.image_size
    x1, x2 = np.clip([u.min(), u.max()], 0, w)
    y1, y2 = np.clip([v.min(), v.max()], 0, h)
    if x2 <= x1 or y2 <= y1:
        return None
    return float(x1), float(y1), float(x2), float(y2)
