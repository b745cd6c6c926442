"""Repeatable keypoint detection with learned ranking and metric 2D covariances."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    CheiralityError,
    DegenerateConfigurationError,
    DegenerateGeometryError,
    DegeneratePointError,
    DegenerateTrackError,
    InsufficientDataError,
    KeypointLabError,
    NumericalDomainError,
    ParseError,
    TrainingDivergedError,
    UndefinedMetricError,
)
from .geometry import Homography, apply_homography, estimate_homography_dlt  # noqa: E402
from .keypoints import KeypointSet  # noqa: E402
