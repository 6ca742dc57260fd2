"""Synthetic scenes and sequence builders shared by the pipeline-level tests."""

from curbtrack.evaluation import EvalConfig
from curbtrack.masking import BoundingBox2D, CalibrationConfig
from curbtrack.synth import (BoxObstacle, CurbSpec, NoiseSpec, SceneSpec, WallObstacle, box_image_bbox,
                             ground_truth_of, render_lidar_frame, render_ultrasonic)
from curbtrack.ultrasonic import UltrasonicProcessor

FRAME_US = 100_000
LEAD_US = 300_000
US_PERIOD = 25_000


def straight_scene(seed=1, sigma=0.02):
    return SceneSpec(curbs=[CurbSpec("right", (0.0, 0.0, 0.0, 3.5), 0.12)], noise=NoiseSpec(range_sigma=sigma),
                     seed=seed)


def parked_car_scene(seed=5):
    car = BoxObstacle(center=(-2.5, 10.0), size=(4.5, 1.8, 1.5))
    walls = [WallObstacle((8.0, -20.0), (8.0, 40.0), 2.0), WallObstacle((-6.0, -20.0), (-6.0, 40.0), 2.0)]
    return SceneSpec(curbs=[CurbSpec("right", (0.0, 0.0, 0.0, 3.5), 0.12)], boxes=[car], walls=walls,
                     noise=NoiseSpec(range_sigma=0.02), seed=seed)


def ego_occluded_scene(seed=11):
    return SceneSpec(curbs=[CurbSpec("right", (0.0, 0.0, 0.0, 3.5), 0.12)],
                     ego_box=BoxObstacle(center=(0.0, -1.05), size=(3.9, 1.8, 0.5), label="ego"),
                     noise=NoiseSpec(range_sigma=0.02, ultrasonic_sigma=0.03), seed=seed)


def sequence(scene, frames, calibration=None, with_boxes=False, with_ultrasonic=False):
    """Rendered frames plus the matching ground truth, boxes and ultrasonic processor."""
    cal = calibration or CalibrationConfig()
    out_frames, gt, boxes = [], {}, {}
    for f in range(frames):
        frame, _ = render_lidar_frame(scene, f, LEAD_US + f * FRAME_US)
        out_frames.append(frame)
        gt[f] = {g.side: g for g in ground_truth_of(scene, f)}
        if with_boxes:
            boxes[f] = []
            for b in scene.boxes:
                rect = box_image_bbox(b, scene.road_z, cal)
                if rect is not None:
                    boxes[f].append(BoundingBox2D(f, b.label, 0.9, *rect))
    proc = None
    if with_ultrasonic:
        proc = UltrasonicProcessor()
        for t in range(0, LEAD_US + frames * FRAME_US, US_PERIOD):
            proc.feed(render_ultrasonic(scene, t))
    return out_frames, gt, boxes, proc


def eval_config(y_start=0.0, y_stop=30.0):
    return EvalConfig(y_start=y_start, y_stop=y_stop)
