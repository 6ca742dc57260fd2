import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curbtrack.exceptions import IngestWarning, MalformedFileError
from curbtrack.ingest import (PointFrame, RingAssigner, RingModel, assign_rings, cartesian_to_spherical,
                              decode_csf1, downsample_rings, encode_csf1, kitti_to_vehicle, parse_kitti_bin,
                              read_csf1, read_kitti_frame, spherical_to_cartesian, write_csf1, write_kitti_bin)
from curbtrack.synth import LidarMount, SceneSpec, render_lidar_frame


def ring_grid_frame(ring_count, per_ring, seed=0):
    """Frame with exactly ``per_ring`` points on every ring."""
    rng = np.random.default_rng(seed)
    n = ring_count * per_ring
    ring = np.repeat(np.arange(ring_count), per_ring)
    az = np.tile(np.sort(rng.uniform(0, 360, per_ring)), ring_count)
    xyz = rng.normal(0, 5, (n, 3))
    return PointFrame(xyz, rng.uniform(0, 1, n), ring, az, ring_count, 3, 12345)


def ordered(frame):
    key = frame.ring * 1000.0 + frame.azimuth
    return np.all(np.diff(key) >= 0)


# ---- KITTI


def test_kitti_zero_records():
    out = parse_kitti_bin(bytes(32))
    assert out.shape == (2, 4)
    assert np.all(out == 0)


def test_kitti_empty_file():
    assert parse_kitti_bin(b"").shape == (0, 4)


def test_kitti_bad_length():
    with pytest.raises(MalformedFileError):
        parse_kitti_bin(bytes(17))


def test_kitti_roundtrip_random_records():
    rng = np.random.default_rng(1)
    recs = rng.normal(0, 20, (1000, 4)).astype(np.float32)
    data = write_kitti_bin(recs)
    back = parse_kitti_bin(data)
    assert back.tobytes() == recs.tobytes()
    assert write_kitti_bin(back) == data


def test_kitti_nonfinite_dropped_with_warning():
    recs = np.array([[1, 2, 3, 0.5], [np.nan, 0, 0, 0], [0, np.inf, 0, 0], [4, 5, 6, 0.1]], dtype=np.float32)
    with pytest.warns(IngestWarning, match="dropped 2"):
        out = parse_kitti_bin(write_kitti_bin(recs))
    assert out.shape == (2, 4)
    assert np.array_equal(out, recs[[0, 3]])


def test_kitti_axis_remap():
    recs = np.array([[10.0, 2.0, -1.0, 1.5]])
    out = kitti_to_vehicle(recs)
    assert out.tolist() == [[-2.0, 10.0, -1.0, 1.0]]


# ---- spherical


def test_spherical_axis_cases():
    assert np.allclose(spherical_to_cartesian(1, 0, 0), (0, 1, 0), atol=1e-15)
    assert np.allclose(spherical_to_cartesian(0, 123, -45), (0, 0, 0))
    assert np.allclose(spherical_to_cartesian(2, 90, 0), (2, 0, 0), atol=1e-15)


def test_spherical_roundtrip_random():
    rng = np.random.default_rng(2)
    r = rng.uniform(0.1, 120, 10000)
    az = rng.uniform(0, 360, 10000)
    el = rng.uniform(-89, 89, 10000)
    r2, az2, el2 = cartesian_to_spherical(*spherical_to_cartesian(r, az, el))
    assert np.max(np.abs(r2 - r) / r) < 1e-9
    daz = (az2 - az + 180) % 360 - 180
    assert np.max(np.abs(daz)) < 1e-9 * 360
    assert np.max(np.abs(el2 - el)) < 1e-9 * 90


# ---- rings


def test_assign_rings_exact_elevations():
    model = RingModel.vlp16()
    pts = np.array([spherical_to_cartesian(10, 30, -15.0), spherical_to_cartesian(10, 60, 15.0)])
    frame = assign_rings(pts, model)
    assert frame.ring.tolist() == [0, 15]


def test_assign_rings_recovers_generating_ring_with_jitter():
    scene = SceneSpec()
    truth, _ = render_lidar_frame(scene, 0)
    rng = np.random.default_rng(5)
    r, az, el = cartesian_to_spherical(truth.x, truth.y, truth.z)
    el = el + rng.uniform(-0.05, 0.05, el.size)
    xyz = np.column_stack(spherical_to_cartesian(r, az, el))
    perm = rng.permutation(len(xyz))
    frame = assign_rings(xyz[perm], scene.lidar.ring_model(0.5))
    assert len(frame) == len(truth)
    assert np.array_equal(frame.ring, truth.ring)
    assert np.allclose(frame.azimuth, truth.azimuth, atol=1e-9)


def test_assign_rings_drops_out_of_band_points():
    model = RingModel.vlp16()
    pts = np.array([spherical_to_cartesian(10, 0, -15.0), spherical_to_cartesian(10, 0, -14.0),
                    spherical_to_cartesian(10, 0, 20.0)])
    with pytest.warns(IngestWarning, match="dropped 2"):
        frame = assign_rings(pts, model)
    assert len(frame) == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-30, 30), st.floats(-30, 30), st.floats(-5, 5)), min_size=0, max_size=60))
def test_assign_rings_conserves_points(pts):
    model = RingModel.vlp16()
    arr = np.array(pts, dtype=np.float64).reshape(-1, 3)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        frame = assign_rings(arr, model)
    dropped = 0
    for w in caught:
        if issubclass(w.category, IngestWarning):
            dropped += int(str(w.message).split()[1])
    assert len(frame) + dropped == len(arr)
    assert ordered(frame)


def test_ring_model_validation():
    with pytest.raises(ValueError):
        RingModel((1.0, 0.5))
    assert RingModel.hdl64().ring_count == 64
    assert RingModel.vlp16().vertical_angles[0] == -15.0


def test_ring_model_from_file(tmp_path):
    p = tmp_path / "angles.txt"
    p.write_text("# vlp16 subset\n1.0\n-1.0\n3.0  # top\n")
    assert RingModel.from_file(p).vertical_angles == (-1.0, 1.0, 3.0)


# ---- downsampling


def test_downsample_identity():
    f = ring_grid_frame(64, 20)
    assert downsample_rings(f, 64).equals(f)


def test_downsample_stride_rings_and_count():
    f = ring_grid_frame(64, 37)
    out = downsample_rings(f, 16)
    assert out.ring_count == 16
    assert sorted(set(out.ring.tolist())) == list(range(16))
    assert len(out) == 16 * 37
    kept = np.isin(f.ring, np.arange(0, 64, 4))
    assert np.array_equal(out.xyz, f.xyz[kept])
    assert np.array_equal(out.ring, f.ring[kept] // 4)


def test_downsample_composes():
    f = ring_grid_frame(64, 11, seed=3)
    assert downsample_rings(downsample_rings(f, 32), 16).equals(downsample_rings(f, 16))


def test_downsample_rejects_non_divisor():
    with pytest.raises(ValueError):
        downsample_rings(ring_grid_frame(64, 3), 24)


# ---- CSF1


def test_csf1_roundtrip_bit_identical(tmp_path):
    scene = SceneSpec()
    frame, _ = render_lidar_frame(scene, 4)
    path = tmp_path / "000004.csf1"
    write_csf1(path, frame)
    back = read_csf1(path)
    assert back.frame_id == 4
    assert encode_csf1(back) == path.read_bytes()
    f32 = frame.xyz.astype(np.float32).astype(np.float64)
    assert np.array_equal(back.xyz, f32)
    assert np.array_equal(back.ring, frame.ring)
    assert back.timestamp == frame.timestamp


def test_csf1_header_layout():
    f = ring_grid_frame(16, 2)
    data = encode_csf1(f)
    magic, count, rc, ts = struct.unpack_from("<4sIHQ", data)
    assert (magic, count, rc, ts) == (b"CSF1", 32, 16, 12345)
    assert len(data) == 18 + 32 * 22


@pytest.mark.parametrize("data", [b"", b"XXXX" + bytes(14), encode_csf1(ring_grid_frame(16, 2))[:-3]])
def test_csf1_malformed(data):
    with pytest.raises(MalformedFileError):
        decode_csf1(data)


def test_read_kitti_frame(tmp_path):
    scene = SceneSpec(lidar=LidarMount(vertical_angles=tuple(RingModel.vlp16().vertical_angles)))
    truth, _ = render_lidar_frame(scene, 0)
    native = np.column_stack([truth.y, -truth.x, truth.z, truth.intensity]).astype(np.float32)
    path = tmp_path / "000007.bin"
    path.write_bytes(write_kitti_bin(native))
    frame = read_kitti_frame(path, RingModel.vlp16())
    assert frame.frame_id == 7
    assert len(frame) == len(truth)
    assert np.array_equal(frame.ring, truth.ring)


def test_point_frame_rejects_unordered():
    with pytest.raises(ValueError):
        PointFrame(np.zeros((2, 3)), np.zeros(2), [0, 0], [10.0, 5.0], 16)
    with pytest.raises(ValueError):
        PointFrame(np.zeros((1, 3)), np.zeros(1), [16], [0.0], 16)
    with pytest.raises(ValueError):
        PointFrame(np.zeros((1, 3)), np.zeros(1), [0], [0.0], 12)


def test_ring_assigner_estimator():
    angles = tuple(np.linspace(-15.5, 15.5, 32))
    scene = SceneSpec(lidar=LidarMount(vertical_angles=angles, azimuth_resolution=1.0))
    truth, _ = render_lidar_frame(scene, 0)
    est = RingAssigner(vertical_angles=angles, target_rings=16).fit()
    out = est.transform(truth.xyz)
    assert out.ring_count == 16
    assert np.array_equal(out.xyz, truth.xyz[truth.ring % 2 == 0])
