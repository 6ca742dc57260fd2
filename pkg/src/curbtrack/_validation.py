"""Input validation helpers shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_array

VALID_RING_COUNTS = (16, 32, 64)


def check_points(points, n_columns=None, min_rows=0, name="points"):
    """Return ``points`` as a finite float64 2-D array.

    ``n_columns`` may be an int or a tuple of accepted widths.
    """
    arr = check_array(
        points,
        dtype=np.float64,
        ensure_2d=True,
        ensure_min_samples=0,
        ensure_all_finite=True,
        input_name=name,
    )
    if n_columns is not None:
        widths = (n_columns,) if isinstance(n_columns, int) else tuple(n_columns)
        if arr.shape[1] not in widths:
            raise ValueError(f"{name} must have {widths} columns, got {arr.shape[1]}")
    if arr.shape[0] < min_rows:
        raise ValueError(f"{name} needs at least {min_rows} rows, got {arr.shape[0]}")
    return arr


def check_xy(points, min_rows=0, name="points"):
    """Accept (n, 2) or wider arrays and return the first two columns."""
    arr = check_points(points, min_rows=min_rows, name=name)
    if arr.shape[1] < 2:
        raise ValueError(f"{name} must have at least 2 columns")
    return np.ascontiguousarray(arr[:, :2])


def check_frame(frame):
    from .ingest import PointFrame

    if not isinstance(frame, PointFrame):
        raise TypeError(f"expected PointFrame, got {type(frame).__name__}")
    return frame


def check_ring_count(ring_count):
    if int(ring_count) not in VALID_RING_COUNTS:
        raise ValueError(f"ring_count must be one of {VALID_RING_COUNTS}, got {ring_count}")
    return int(ring_count)


def check_positive(value, name):
    value = float(value)
    if not value > 0:
        raise ValueError(f"{name} must be > 0, got {value}")
    return value
