"""Curb detection and tracking for sparse LiDAR, camera boxes and ultrasonic ranges."""

from .evaluation import GroundTruthCurb, IntervalMetrics, classify_samples, interval_metrics
from .exceptions import (ConfigError, CurbTrackError, DegenerateFitError, InsufficientPointsError,
                         MalformedFileError, NoFitError, UndefinedAngleError)
from .features import CandidateSet, CurbFeatureExtractor, FeatureFlags, FilterConfig
from .fitting import CurbPolynomial, ThetaShiftRegressor, ThetaShiftState, least_squares_poly, theta_shift_select
from .ingest import LidarPoint, PointFrame, RingAssigner, RingModel
from .masking import BoundingBox2D, CalibrationConfig, Stixel, VScanGrid, VScanMasker
from .pipeline import CurbDetector, FrameResult, PipelineConfig, run_frame, run_sequence
from .tracking import CurbTrack, CurbTracker, PolarTrackState, TrackerConfig
from .ultrasonic import SensorChannel, UltrasonicEstimate, UltrasonicReading

__version__ = "0.1.0"
