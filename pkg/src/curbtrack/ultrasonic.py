"""Ultrasonic distance channels: median filtering, constancy gating, confidence and
conversion of accepted ranges into LiDAR-frame points."""

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .exceptions import MalformedFileError

N_SENSORS = 4


class UltrasonicReading(NamedTuple):
    timestamp: int
    sensor_id: int
    distance: float

    def validate(self):
        if not 0 <= self.sensor_id < N_SENSORS:
            raise ValueError(f"sensor_id must be in [0, {N_SENSORS}), got {self.sensor_id}")
        if not (np.isfinite(self.distance) and self.distance >= 0):
            raise ValueError(f"distance must be finite and >= 0, got {self.distance}")
        return self


@dataclass(frozen=True)
class UltrasonicConfig:
    window: int = 5
    sigma_agree: float = 0.5
    max_range: float = 7.0
    constancy_window: int = 8
    constancy_eps: float = 0.15

    def __post_init__(self):
        if self.window < 1 or self.constancy_window < 1:
            raise ValueError("window sizes must be >= 1")
        if not (self.sigma_agree > 0 and self.max_range > 0 and self.constancy_eps > 0):
            raise ValueError("sigma_agree, max_range and constancy_eps must be > 0")


@dataclass
class SensorChannel:
    """Per-sensor state: the last ``window`` raw readings and recent filtered values."""

    sensor_id: int
    window: int = 5
    history: int = 8
    buffer: deque = None
    filtered_history: deque = None
    filtered: Optional[float] = None
    last_timestamp: Optional[int] = None

    def __post_init__(self):
        if self.buffer is None:
            self.buffer = deque(maxlen=self.window)
        if self.filtered_history is None:
            self.filtered_history = deque(maxlen=self.history)

    def copy(self):
        return SensorChannel(self.sensor_id, self.window, self.history, deque(self.buffer, maxlen=self.window),
                             deque(self.filtered_history, maxlen=self.history), self.filtered, self.last_timestamp)


def median_filter_channel(ch, r):
    """Push reading ``r`` and refresh the channel's median; returns a new channel."""
    if r.sensor_id != ch.sensor_id:
        raise ValueError(f"reading for sensor {r.sensor_id} pushed to channel {ch.sensor_id}")
    r.validate()
    out = ch.copy()
    out.buffer.append(float(r.distance))
    out.filtered = float(np.median(np.asarray(out.buffer)))
    out.filtered_history.append(out.filtered)
    out.last_timestamp = int(r.timestamp)
    return out


def estimate_confidence(channels, cfg=UltrasonicConfig()):
    """``exp(-std/sigma_agree)`` over in-range filtered values, scaled by the in-range share."""
    vals = np.array([c.filtered for c in channels if c.filtered is not None], dtype=np.float64)
    if len(channels) == 0:
        return 0.0
    valid = vals[vals <= cfg.max_range]
    if valid.size == 0:
        return 0.0
    spread = float(np.std(valid))
    return float(np.exp(-spread / cfg.sigma_agree) * valid.size / len(channels))


def detect_curb_distance(ch, constancy_window=8, constancy_eps=0.15, max_range=7.0):
    """Accepted distance when the channel is in range and steady, else ``None``."""
    if ch.filtered is None or ch.filtered > max_range:
        return None
    recent = list(ch.filtered_history)[-constancy_window:]
    if len(recent) < constancy_window:
        return None
    if max(recent) - min(recent) >= constancy_eps:
        return None
    return ch.filtered


@dataclass
class UltrasonicEstimate:
    distances: tuple = (None,) * N_SENSORS
    confidence: float = 0.0
    timestamp: int = 0

    def __post_init__(self):
        self.distances = tuple(None if d is None else float(d) for d in self.distances)
        if all(d is None for d in self.distances):
            self.confidence = 0.0

    @property
    def accepted(self):
        return [i for i, d in enumerate(self.distances) if d is not None]


def _sincos_deg(deg):
    # exact for the usual quarter-turn mounts, where cos(90 deg) would leave ~6e-17
    q, r = divmod(float(deg), 90.0)
    if r == 0.0:
        return ((0.0, 1.0), (1.0, 0.0), (0.0, -1.0), (-1.0, 0.0))[int(q) % 4]
    t = np.radians(deg)
    return float(np.sin(t)), float(np.cos(t))


def to_lidar_frame(est, cal):
    """LiDAR-frame points (k, 3) for the accepted channels of ``est``."""
    mounts = cal.ultrasonic_mounts
    if len(mounts) != N_SENSORS:
        raise ValueError(f"calibration must hold {N_SENSORS} ultrasonic mounts")
    pts = []
    for i in est.accepted:
        m = mounts[i]
        s, c = _sincos_deg(m.yaw_deg)
        d = est.distances[i]
        # yaw from +y toward +x, same convention as azimuth
        pts.append((m.x + d * s, m.y + d * c, m.z))
    return np.asarray(pts, dtype=np.float64).reshape(-1, 3)


@dataclass
class UltrasonicProcessor:
    """Runs the four channels over a reading stream and hands out estimates.

    ``estimate_at(t)`` returns the latest estimate completed at or before
    ``t``; an estimate completes once every sensor has reported for a
    timestamp.
    """

    cfg: UltrasonicConfig = field(default_factory=UltrasonicConfig)
    channels: list = None
    estimates: list = field(default_factory=list)
    _pending: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.channels is None:
            self.channels = [SensorChannel(i, self.cfg.window, self.cfg.constancy_window) for i in range(N_SENSORS)]

    def push(self, r):
        self.channels[r.sensor_id] = median_filter_channel(self.channels[r.sensor_id], r)
        seen = self._pending.setdefault(int(r.timestamp), set())
        seen.add(r.sensor_id)
        if len(seen) == N_SENSORS:
            del self._pending[int(r.timestamp)]
            self.estimates.append(self.current(int(r.timestamp)))

    def current(self, timestamp):
        cfg = self.cfg
        dists = tuple(
            detect_curb_distance(ch, cfg.constancy_window, cfg.constancy_eps, cfg.max_range) for ch in self.channels
        )
        conf = estimate_confidence(self.channels, cfg) if all(c.filtered is not None for c in self.channels) else 0.0
        return UltrasonicEstimate(dists, conf, timestamp)

    def feed(self, readings):
        for r in sorted(readings, key=lambda r: (r.timestamp, r.sensor_id)):
            self.push(r)
        return self

    def estimate_at(self, timestamp):
        best = None
        for est in self.estimates:
            if est.timestamp <= timestamp:
                best = est
            else:
                break
        return best


def parse_ultrasonic_log(text):
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if lineno == 1 and parts[0].lower().startswith("timestamp"):
            continue
        if len(parts) != 3:
            raise MalformedFileError(f"line {lineno}: expected 3 fields, got {len(parts)}")
        try:
            out.append(UltrasonicReading(int(parts[0]), int(parts[1]), float(parts[2])).validate())
        except ValueError as exc:
            raise MalformedFileError(f"line {lineno}: {exc}") from exc
    return out


def read_ultrasonic_log(path):
    return parse_ultrasonic_log(Path(path).read_text())


def format_ultrasonic_log(readings):
    lines = ["timestamp_us,sensor_id,distance_m"]
    lines += [f"{r.timestamp},{r.sensor_id},{r.distance:.6f}" for r in readings]
    return "\n".join(lines) + "\n"
