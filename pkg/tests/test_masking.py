import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curbtrack.exceptions import ConfigError, MalformedFileError
from curbtrack.features import CandidateSet, compute_features, search_candidates
from curbtrack.ingest import PointFrame
from curbtrack.masking import (BoundingBox2D, BoxMasker, CalibrationConfig, Stixel, VScanMasker, backproject,
                               build_vscan, format_detections, load_calibration, mask_by_boxes, mask_by_stixels,
                               parse_detections, project_points, project_to_image, save_calibration)
from curbtrack.synth import BOX, CURB_FACE, CURB_TOP, WALL, BoxObstacle, CurbSpec, SceneSpec, WallObstacle, \
    box_image_bbox, render_lidar_frame

IDENTITY = tuple(tuple(r) for r in np.eye(4))


def candidates(frame):
    return search_candidates(frame, compute_features(frame))


def subset(a, b):
    return set(a.left) <= set(b.left) and set(a.right) <= set(b.right)


def as_sets(c):
    return set(c.left.tolist()), set(c.right.tolist())


# ---- calibration and projection


def test_optical_axis_projects_to_principal_point():
    cal = CalibrationConfig()
    assert project_to_image((0.0, 5.0, 0.0), cal) == pytest.approx((cal.cx, cal.cy))


def test_point_behind_camera():
    assert project_to_image((0.0, -5.0, 0.0), CalibrationConfig()) is None


def test_pinhole_hand_case():
    cal = CalibrationConfig(fx=500, fy=500, cx=320, cy=240, extrinsic=IDENTITY, image_size=(640, 480))
    assert project_to_image((1.0, 0.0, 5.0), cal) == pytest.approx((420.0, 240.0))


def test_out_of_image_is_none():
    cal = CalibrationConfig()
    assert project_to_image((100.0, 1.0, 0.0), cal) is None


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1279), st.floats(0, 719), st.floats(0.5, 80))
def test_backproject_roundtrip(u, v, depth):
    cal = CalibrationConfig()
    p = backproject(u, v, depth, cal)
    uv, _ = project_points(p[None, :], cal)
    assert np.max(np.abs(uv[0] - (u, v))) < 1e-6


def test_calibration_validation():
    with pytest.raises(ConfigError):
        CalibrationConfig(fx=0)
    bad = [list(r) for r in np.eye(4)]
    bad[0][1] = 0.5
    with pytest.raises(ConfigError):
        CalibrationConfig(extrinsic=bad)
    with pytest.raises(ConfigError):
        CalibrationConfig(ultrasonic_mounts=((0, 0, 0, 90),) * 3)


def test_calibration_file_roundtrip(tmp_path):
    cal = CalibrationConfig(fx=650, cy=350)
    path = tmp_path / "cal.yaml"
    save_calibration(path, cal)
    assert load_calibration(path) == cal


def test_calibration_dotted_keys():
    data = {"intrinsics.fx": 600, "intrinsics.fy": 600, "intrinsics.cx": 320, "intrinsics.cy": 240,
            "image.width": 640, "image.height": 480}
    for i in range(4):
        data[f"extrinsic.row{i}"] = " ".join(str(v) for v in np.eye(4)[i])
        data.update({f"ultrasonic.{i}.{k}": v for k, v in zip(("x", "y", "z", "yaw_deg"), (0.9, i, -0.5, 90))})
    cal = CalibrationConfig.from_mapping(data)
    assert cal.fx == 600 and cal.image_size == (640, 480) and cal.ultrasonic_mounts[3].y == 3
    del data["intrinsics.fx"]
    with pytest.raises(ConfigError):
        CalibrationConfig.from_mapping(data)


# ---- detection files


def test_detections_roundtrip():
    boxes = [BoundingBox2D(3, "car", 0.9, 10, 20, 110, 220), BoundingBox2D(4, "person", 0.4, 1, 2, 3, 4)]
    parsed = parse_detections(format_detections(boxes))
    assert parsed == {3: [boxes[0]], 4: [boxes[1]]}
    # header is optional
    assert parse_detections("3,car,0.9,10,20,110,220\n") == {3: [boxes[0]]}


@pytest.mark.parametrize("text", ["1,car,0.9,1,2,3\n", "1,car,1.5,0,0,1,1\n", "1,car,0.5,5,0,1,1\n"])
def test_detections_malformed(text):
    with pytest.raises(MalformedFileError):
        parse_detections(text)


def test_box_clamp():
    b = BoundingBox2D(0, "car", 0.9, -50, 100, 200, 900).clamp((1280, 720))
    assert (b.x1, b.y1, b.x2, b.y2) == (0, 100, 200, 720)
    assert BoundingBox2D(0, "car", 0.9, 1300, 0, 1400, 10).clamp((1280, 720)) is None


# ---- camera box mask


def car_scene():
    car = BoxObstacle(center=(-2.5, 10.0), size=(4.5, 1.8, 1.5))
    return SceneSpec(curbs=[CurbSpec("right", (0, 0, 0, 3.5))], boxes=[car]), car


def test_box_mask_empty_is_identity():
    frame, _ = render_lidar_frame(car_scene()[0])
    c = candidates(frame)
    assert mask_by_boxes(c, frame, [], CalibrationConfig()).equals(c)


def test_box_mask_whole_image():
    frame, _ = render_lidar_frame(car_scene()[0])
    cal = CalibrationConfig()
    c = candidates(frame)
    out = mask_by_boxes(c, frame, [BoundingBox2D(0, "x", 1.0, 0, 0, 1280, 720)], cal)
    _, inside = project_points(frame.xyz[out.all_indices()], cal)
    assert not inside.any()
    _, inside_all = project_points(frame.xyz[c.all_indices()], cal)
    assert len(out) == (~inside_all).sum()


def test_box_mask_removes_exactly_car_points():
    scene, car = car_scene()
    frame, labels = render_lidar_frame(scene)
    cal = CalibrationConfig()
    bbox = box_image_bbox(car, scene.road_z, cal)
    c = candidates(frame)
    on_car = {int(i) for i in c.all_indices() if labels.surface[i] == BOX}
    assert on_car, "scene should yield car-body candidates"
    out = mask_by_boxes(c, frame, [BoundingBox2D(0, "car", 0.9, *bbox)], cal)
    removed = set(c.all_indices().tolist()) - set(out.all_indices().tolist())
    assert removed == on_car


def test_box_mask_score_threshold_and_frame_check():
    scene, car = car_scene()
    frame, _ = render_lidar_frame(scene)
    cal = CalibrationConfig()
    bbox = box_image_bbox(car, scene.road_z, cal)
    c = candidates(frame)
    assert mask_by_boxes(c, frame, [BoundingBox2D(0, "car", 0.3, *bbox)], cal).equals(c)
    with pytest.raises(ValueError):
        mask_by_boxes(c, frame, [BoundingBox2D(7, "car", 0.9, *bbox)], cal)


# ---- virtual scan


def test_flat_ground_has_no_stixels():
    frame, _ = render_lidar_frame(SceneSpec(curbs=[]))
    assert build_vscan(frame)[1] == []


def test_low_curb_does_not_self_mask():
    frame, _ = render_lidar_frame(SceneSpec(curbs=[CurbSpec("right", (0, 0, 0, 3.5), height=0.12)]))
    assert build_vscan(frame, obstacle_height_thres=0.3)[1] == []


def test_pole_stixels():
    # a thin pole as a 0.1 m square box, 1.5 m tall, 6 m straight ahead
    pole = BoxObstacle(center=(0.0, 6.0), size=(0.1, 0.1, 1.5))
    lidar_kw = dict(vertical_angles=tuple(np.linspace(-15, 15, 64)), azimuth_resolution=0.1)
    from curbtrack.synth import LidarMount
    scene = SceneSpec(curbs=[], boxes=[pole], lidar=LidarMount(**lidar_kw))
    frame, labels = render_lidar_frame(scene)
    grid, stixels = build_vscan(frame)
    assert stixels
    ia, ir = grid.cell_of(frame.azimuth[labels.surface == BOX], np.hypot(frame.x, frame.y)[labels.surface == BOX])
    pole_cells = set(zip(ia.tolist(), ir.tolist()))
    assert {(s.az_index, s.range_index) for s in stixels} <= pole_cells
    assert max(s.height for s in stixels) >= 1.4
    for s in stixels:
        (a0, a1), (r0, r1) = grid.cell_bounds(s.az_index, s.range_index)
        assert s.range == r0 and 5.9 <= r1 and r0 <= 6.1
        assert a0 < 1.0 or a1 > 359.0


def test_grid_invariants():
    scene, _ = car_scene()
    frame, _ = render_lidar_frame(scene)
    grid, stixels = build_vscan(frame)
    occupied = grid.count > 0
    assert grid.count.sum() == len(frame)
    assert np.all(grid.max_z[occupied] >= grid.min_z[occupied])
    assert all(s.height >= 0.3 for s in stixels)
    ia, ir = grid.cell_of(frame.azimuth, np.hypot(frame.x, frame.y))
    (a0, a1), (r0, r1) = grid.cell_bounds(ia, ir)
    assert np.all((frame.azimuth >= a0) & (frame.azimuth < a1))


def test_stixel_mask_empty_is_identity():
    frame, _ = render_lidar_frame(car_scene()[0])
    c = candidates(frame)
    assert mask_by_stixels(c, frame, []).equals(c)


def test_candidate_on_stixel_cell_removed():
    pts = np.array([[0.0, 5.0, -0.6], [0.0, 5.1, 0.5], [3.0, 5.0, -0.6]])
    frame = PointFrame(pts, np.zeros(3), np.zeros(3, dtype=int), np.degrees(np.arctan2(pts[:, 0], pts[:, 1])) % 360,
                       16)
    st_ = [Stixel(0, 5.0, 1.1, 20)]
    out = mask_by_stixels(CandidateSet([], [0, 2]), frame, st_)
    assert out.right.tolist() == [2]


def test_wall_scene_stixel_mask():
    scene = SceneSpec(curbs=[CurbSpec("right", (0, 0, 0, 3.5))], walls=[WallObstacle((8.0, -20.0), (8.0, 40.0), 2.0)])
    frame, labels = render_lidar_frame(scene)
    surf = labels.surface
    found = candidates(frame)
    # the search stops at the curb, so wall points are added by hand; past
    # ~28 m a 16-ring scan puts a single return per cell and no height spread
    wall = np.flatnonzero((surf == WALL) & (np.hypot(frame.x, frame.y) < 25.0))
    c = CandidateSet(found.left, np.union1d(found.right, wall))
    out = VScanMasker().fit(frame).transform(c)
    kept = out.all_indices()
    before = c.all_indices()
    assert not (surf[kept] == WALL).any()
    curb = before[np.isin(surf[before], (CURB_FACE, CURB_TOP))]
    assert curb.size and set(curb.tolist()) <= set(kept.tolist())


def test_obstacle_free_frames_have_no_stixels():
    for seed, c0 in enumerate((2.5, 3.5, 5.0)):
        scene = SceneSpec(curbs=[CurbSpec("right", (0, 0, 0.02, c0)), CurbSpec("left", (0, 0, 0, -c0))], seed=seed)
        assert build_vscan(render_lidar_frame(scene)[0])[1] == []


# ---- set properties


def mixed_frame():
    car = BoxObstacle(center=(-2.5, 10.0), size=(4.5, 1.8, 1.5))
    scene = SceneSpec(curbs=[CurbSpec("right", (0, 0, 0, 3.5))], boxes=[car],
                      walls=[WallObstacle((8.0, -20.0), (8.0, 40.0), 2.0)])
    frame, _ = render_lidar_frame(scene)
    return frame, BoundingBox2D(0, "car", 0.9, *box_image_bbox(car, scene.road_z, CalibrationConfig()))


FRAME, CAR_BOX = mixed_frame()
BASE = candidates(FRAME)
STIXELS = build_vscan(FRAME)[1]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, len(FRAME) - 1), max_size=300, unique=True))
def test_masks_are_subsets_and_commute(extra):
    idx = np.array(sorted(extra), dtype=np.int64)
    x = FRAME.x[idx] if idx.size else np.zeros(0)
    c = CandidateSet(np.union1d(BASE.left, idx[x < 0]), np.union1d(BASE.right, idx[x >= 0]))
    cal = CalibrationConfig()
    a = mask_by_boxes(c, FRAME, [CAR_BOX], cal)
    b = mask_by_stixels(c, FRAME, STIXELS)
    assert subset(a, c) and subset(b, c)
    ab = mask_by_stixels(a, FRAME, STIXELS)
    ba = mask_by_boxes(b, FRAME, [CAR_BOX], cal)
    assert as_sets(ab) == as_sets(ba)


def test_box_masker_estimator():
    m = BoxMasker(score_thres=0.5).fit(FRAME, [CAR_BOX])
    assert m.transform(BASE).equals(mask_by_boxes(BASE, FRAME, [CAR_BOX], CalibrationConfig()))
    assert m.get_params()["score_thres"] == 0.5
