"""Corruption synthesis and robustness scoring for camera+LiDAR KITTI data."""

__version__ = "0.1.0"

from .engine import CorruptionSpec, corrupt_dataset, corrupt_frame, derive_rng  # noqa: E402
from .report import build_report, emit_report, mean_robustness, robustness_score  # noqa: E402

__all__ = [
    "CorruptionSpec",
    "build_report",
    "corrupt_dataset",
    "corrupt_frame",
    "derive_rng",
    "emit_report",
    "mean_robustness",
    "robustness_score",
]
