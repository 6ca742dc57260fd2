import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curbtrack.exceptions import MalformedFileError
from curbtrack.masking import CalibrationConfig, MountPose
from curbtrack.synth import CurbSpec, NoiseSpec, SceneSpec, render_ultrasonic
from curbtrack.ultrasonic import (SensorChannel, UltrasonicConfig, UltrasonicEstimate, UltrasonicProcessor,
                                  UltrasonicReading, detect_curb_distance, estimate_confidence,
                                  format_ultrasonic_log, median_filter_channel, parse_ultrasonic_log,
                                  to_lidar_frame)


def feed(values, sensor=0, window=5, history=8):
    ch = SensorChannel(sensor, window, history)
    out = []
    for t, v in enumerate(values):
        ch = median_filter_channel(ch, UltrasonicReading(t, sensor, v))
        out.append(ch.filtered)
    return ch, out


def channel_at(value, sensor=0):
    ch, _ = feed([value] * 8, sensor)
    return ch


# ---- median


def test_median_constant_and_spike():
    assert feed([2.0, 2.0, 2.0])[0].filtered == 2.0
    assert feed([2.0, 9.9, 2.1])[0].filtered == 2.1


def test_median_even_count_is_mean_of_middle():
    assert feed([1.0, 4.0, 2.0, 3.0])[0].filtered == 2.5


def test_median_returns_new_channel():
    ch = SensorChannel(1)
    out = median_filter_channel(ch, UltrasonicReading(0, 1, 2.0))
    assert ch.filtered is None and len(ch.buffer) == 0
    assert out.filtered == 2.0
    with pytest.raises(ValueError):
        median_filter_channel(ch, UltrasonicReading(0, 2, 2.0))


def test_median_square_wave_against_brute_force():
    rng = np.random.default_rng(0)
    n, half = 1000, 50
    level = np.where((np.arange(n) // half) % 2 == 0, 2.0, 3.0)
    noisy = level.copy()
    # isolated spikes, kept clear of the edges
    for i in range(0, n, 13):
        if 5 <= i % half <= half - 5:
            noisy[i] = rng.uniform(0, 10)
    _, filt = feed(noisy.tolist())
    ref = [statistics.median(noisy[max(0, i - 4):i + 1]) for i in range(n)]
    assert filt == ref
    for edge in range(half, n, half):
        settled = next(k for k in range(edge, n) if filt[k] == level[edge])
        assert settled - edge < 3
        assert all(f == level[edge] for f in filt[settled:edge + half])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 20), min_size=1, max_size=30), st.integers(1, 7))
def test_median_bounded_by_buffer(values, window):
    ch, _ = feed(values, window=window)
    buf = list(ch.buffer)
    assert min(buf) <= ch.filtered <= max(buf)
    if len(buf) % 2:
        assert ch.filtered in buf
    else:
        s = sorted(buf)
        assert ch.filtered == pytest.approx((s[len(s) // 2 - 1] + s[len(s) // 2]) / 2)


# ---- confidence


def test_confidence_cases():
    cfg = UltrasonicConfig()
    assert estimate_confidence([channel_at(2.5, i) for i in range(4)], cfg) == 1.0
    assert estimate_confidence([channel_at(8.0, i) for i in range(4)], cfg) == 0.0
    chans = [channel_at(v, i) for i, v in enumerate((2.0, 2.1, 2.0, 2.1))]
    assert estimate_confidence(chans, cfg) == pytest.approx(math.exp(-0.05 / 0.5), rel=1e-9)
    assert estimate_confidence(chans, cfg) == pytest.approx(0.905, abs=5e-4)


def test_confidence_scaled_by_valid_share():
    chans = [channel_at(2.0, 0), channel_at(2.0, 1), channel_at(9.0, 2), channel_at(9.5, 3)]
    assert estimate_confidence(chans) == 0.5


# ---- constancy gate


def test_detect_constant_accepted():
    assert detect_curb_distance(channel_at(2.5)) == 2.5


def test_detect_beyond_seven_metres():
    assert detect_curb_distance(channel_at(8.2)) is None


def test_detect_alternating_rejected():
    ch, _ = feed([2.5, 3.5] * 8)
    assert detect_curb_distance(ch) is None


def test_detect_needs_full_window():
    ch, _ = feed([2.5] * 7)
    assert detect_curb_distance(ch) is None


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 12), min_size=1, max_size=40), st.floats(0.5, 10))
def test_detect_never_exceeds_max_range(values, max_range):
    ch, _ = feed(values)
    d = detect_curb_distance(ch, 8, 0.15, max_range)
    assert d is None or d <= max_range


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=40, max_size=40), st.integers(0, 3))
def test_channels_are_independent(others, sensor):
    own = [2.0 + 0.01 * (i % 3) for i in range(10)]

    def run(other_values):
        proc = UltrasonicProcessor()
        for t in range(10):
            for s in range(4):
                v = own[t] if s == sensor else other_values[(t * 4 + s) % len(other_values)]
                proc.push(UltrasonicReading(t, s, v))
        return proc.estimates[-1].distances[sensor]

    assert run(others) == run([5.0] * 40)


# ---- conversion to LiDAR frame


def cal_with(mount):
    return CalibrationConfig(ultrasonic_mounts=(mount,) + tuple(MountPose(0.9, y, -0.5, 90.0) for y in (1, 2, 3)))


def test_to_lidar_frame_hand_case():
    cal = cal_with(MountPose(0.5, 1.0, -0.4, 90.0))
    pts = to_lidar_frame(UltrasonicEstimate((2.0, None, None, None), 1.0, 0), cal)
    assert pts.shape == (1, 3)
    assert pts[0] == pytest.approx((2.5, 1.0, -0.4), abs=1e-12)


def test_to_lidar_frame_empty():
    assert to_lidar_frame(UltrasonicEstimate(), CalibrationConfig()).shape == (0, 3)


def test_estimate_confidence_zero_when_all_absent():
    assert UltrasonicEstimate((None,) * 4, 0.8, 0).confidence == 0.0


def test_synthetic_rig_beside_curb():
    sigma = 0.02
    scene = SceneSpec(curbs=[CurbSpec("right", (0, 0, 0, 3.0))], noise=NoiseSpec(ultrasonic_sigma=sigma), seed=2)
    proc = UltrasonicProcessor()
    for t in range(0, 40 * 25_000, 25_000):
        proc.feed(render_ultrasonic(scene, t))
    est = proc.estimate_at(10**9)
    assert est.accepted == [0, 1, 2, 3]
    cal = CalibrationConfig(ultrasonic_mounts=tuple((m.x, m.y, m.z, m.yaw_deg) for m in scene.ultrasonic_mounts))
    pts = to_lidar_frame(est, cal)
    assert len(pts) == len(est.accepted)
    assert np.all(np.abs(pts[:, 0] - 3.0) < 4 * sigma)
    assert np.allclose(pts[:, 1], [m.y for m in scene.ultrasonic_mounts])
    assert est.confidence > 0.9


# ---- processor and log format


def test_processor_estimate_at():
    proc = UltrasonicProcessor()
    assert proc.estimate_at(0) is None
    for t in (100, 200, 300):
        for s in range(4):
            proc.push(UltrasonicReading(t, s, 2.0))
    proc.push(UltrasonicReading(400, 0, 2.0))  # incomplete
    assert [e.timestamp for e in proc.estimates] == [100, 200, 300]
    assert proc.estimate_at(250).timestamp == 200
    assert proc.estimate_at(10_000).timestamp == 300
    assert proc.estimate_at(99) is None


def test_log_roundtrip():
    readings = [UltrasonicReading(t, s, 1.5 + s) for t in (0, 25_000) for s in range(4)]
    assert parse_ultrasonic_log(format_ultrasonic_log(readings)) == readings


@pytest.mark.parametrize("text", ["1,2\n", "1,7,2.0\n", "1,0,-3\n", "a,0,1.0\n"])
def test_log_malformed(text):
    with pytest.raises(MalformedFileError):
        parse_ultrasonic_log(text)


def test_config_validation():
    with pytest.raises(ValueError):
        UltrasonicConfig(window=0)
    with pytest.raises(ValueError):
        UltrasonicConfig(sigma_agree=0)
