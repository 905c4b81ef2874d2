"""Spatial (extrinsic calibration) and temporal (frame pairing) misalignment."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .dataset_io import CalibrationSet, FrameBundle
from .geometry import rotation_from_euler

# rotation_from_euler keyword giving a single rotation about each axis
_AXIS_ANGLE = {"x": "roll", "y": "pitch", "z": "yaw"}
BRANCHES = ("camera", "lidar")


def axis_rotation(axis: str, degrees: float) -> np.ndarray:
    if axis not in _AXIS_ANGLE:
        raise ValueError(f"axis must be one of x, y, z; got {axis!r}")
    return rotation_from_euler(**{_AXIS_ANGLE[axis]: degrees})


def spatial_misalign(calib: CalibrationSet, axis: str, degrees: float) -> CalibrationSet:
    """Turn the LiDAR mount by ``degrees`` about the camera-frame ``axis``.

    Only the rotation block of ``Tr_velo_to_cam`` changes (``R <- R_axis @ R``);
    translation, ``P2`` and ``R0_rect`` are kept, so the LiDAR pivots about
    its own origin. Point-cloud files stay untouched and the error lives
    purely in the calibration. About ``y`` the projected scene slides
    sideways, about ``x`` up or down, and about ``z`` it turns in the image.
    """
    out = calib.copy()
    out.velo_to_cam[:, :3] = axis_rotation(axis, degrees) @ calib.velo_rotation
    return out


@dataclass(frozen=True)
class TemporalShift:
    branch: str
    delay: float
    frame_rate: float = 10.0

    def __post_init__(self):
        if self.branch not in BRANCHES:
            raise ValueError(f"branch must be 'camera' or 'lidar', got {self.branch!r}")
        if not self.delay >= 0:
            raise ValueError(f"delay must be non-negative, got {self.delay}")
        if not self.frame_rate > 0:
            raise ValueError(f"frame_rate must be positive, got {self.frame_rate}")

    @property
    def lag(self) -> int:
        """Delay in whole frames, rounded half up."""
        return int(math.floor(self.delay * self.frame_rate + 0.5))


@dataclass
class PairedFrame:
    bundle: FrameBundle
    camera_source: int
    lidar_source: int

    def record(self) -> dict:
        return {
            "output_frame": self.bundle.frame_id,
            "camera_source_frame": self.camera_source,
            "lidar_source_frame": self.lidar_source,
        }


def check_sequential(frame_ids: Sequence[int]) -> None:
    for prev, cur in zip(frame_ids, frame_ids[1:]):
        if cur != prev + 1:
            raise ValueError(f"frames must be consecutive; frame {cur} follows {prev}")


def temporal_misalign(sequence: Sequence[FrameBundle], shift: TemporalShift) -> list:
    """Feed the delayed branch of frame ``t`` from frame ``t - lag``.

    Frames whose delayed source would precede the sequence are dropped rather
    than filled, so the result has ``len(sequence) - lag`` frames. Every
    emitted part is the very object from the input.
    """
    check_sequential([f.frame_id for f in sequence])
    lag = shift.lag
    out = []
    for i in range(lag, len(sequence)):
        cur, src = sequence[i], sequence[i - lag]
        if shift.branch == "camera":
            bundle = replace(cur, image=src.image)
            out.append(PairedFrame(bundle, src.frame_id, cur.frame_id))
        else:
            bundle = replace(cur, cloud=src.cloud)
            out.append(PairedFrame(bundle, cur.frame_id, src.frame_id))
    return out
