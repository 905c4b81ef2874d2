"""Readers and writers for KITTI-format artifacts.

Everything here is lossless: a corrupted dataset written by this toolkit must
be a drop-in replacement for the original, so every loader has a writer that
reproduces what it read.

Point clouds are ``(N, 4)`` float arrays of ``x, y, z, intensity``. Images are
``(H, W, 3)`` uint8 RGB arrays. Both are plain numpy arrays; the small
dataclasses below cover artifacts that carry structure.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import cv2
import numpy as np

POINT_STRIDE = 16  # 4 little-endian float32 per point
CALIB_DIGITS = 9
ORTHONORMAL_TOL = 1e-4

# canonical name -> accepted spellings (detection calib, tracking calib)
_CALIB_ALIASES = {
    "P2": ("P2",),
    "R0_rect": ("R0_rect", "R_rect"),
    "Tr_velo_to_cam": ("Tr_velo_to_cam", "Tr_velo_cam"),
}
_CALIB_SHAPES = {"P2": (3, 4), "R0_rect": (3, 3), "Tr_velo_to_cam": (3, 4)}


class KittiFormatError(ValueError):
    """Raised when a file does not follow the expected KITTI format."""

    def __init__(self, message, path=None, line=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.path = path
        self.line = line
        self.offset = offset


class MissingKeyError(KittiFormatError):
    pass


class CalibrationWarning(UserWarning):
    pass


@dataclass
class CalibrationSet:
    """Camera projection, rectification and LiDAR-to-camera extrinsics.

    ``extra`` keeps every other calib entry (P0, P1, P3, Tr_imu_to_velo, ...)
    and ``tokens`` the key spellings in file order, so a rewritten file has
    the same keys as the one that was read.
    """

    P2: np.ndarray
    R0_rect: np.ndarray
    velo_to_cam: np.ndarray
    extra: dict = field(default_factory=dict)
    tokens: tuple = ()

    @property
    def velo_rotation(self) -> np.ndarray:
        return self.velo_to_cam[:, :3]

    @property
    def velo_translation(self) -> np.ndarray:
        return self.velo_to_cam[:, 3]

    def copy(self) -> "CalibrationSet":
        return CalibrationSet(
            self.P2.copy(),
            self.R0_rect.copy(),
            self.velo_to_cam.copy(),
            {k: v.copy() for k, v in self.extra.items()},
            self.tokens,
        )

    @classmethod
    def identity(cls) -> "CalibrationSet":
        eye34 = np.hstack([np.eye(3), np.zeros((3, 1))])
        return cls(eye34.copy(), np.eye(3), eye34.copy())


@dataclass
class ObjectLabel:
    """One row of a KITTI detection or tracking label file.

    Tracking rows set ``frame`` and ``track_id``; prediction rows set ``score``.
    Dimensions are ``(h, w, l)``, location is the bottom-center of the box in
    rectified camera coordinates.
    """

    type: str
    truncation: float
    occlusion: int
    alpha: float
    bbox2d: tuple
    dims: tuple
    location: tuple
    rotation_y: float
    score: Optional[float] = None
    track_id: Optional[int] = None
    frame: Optional[int] = None

    @property
    def height_2d(self) -> float:
        return self.bbox2d[3] - self.bbox2d[1]


@dataclass
class DepthMap:
    """KITTI depth-completion map. ``raw`` holds uint16 values, depth = raw / 256 m, 0 = no data."""

    raw: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return self.raw > 0

    @property
    def depth_m(self) -> np.ndarray:
        d = self.raw.astype(np.float64) / 256.0
        d[~self.valid] = np.nan
        return d

    @property
    def depth_mm(self) -> np.ndarray:
        return self.depth_m * 1000.0

    @classmethod
    def from_meters(cls, depth: np.ndarray) -> "DepthMap":
        d = np.nan_to_num(np.asarray(depth, dtype=np.float64), nan=0.0)
        raw = np.clip(np.rint(d * 256.0), 0, np.iinfo(np.uint16).max).astype(np.uint16)
        return cls(raw)


@dataclass
class FrameBundle:
    """Camera image, point cloud and calibration captured at one timestamp."""

    frame_id: int
    image: np.ndarray
    cloud: np.ndarray
    calib: CalibrationSet
    depth: Optional[DepthMap] = None
    sequence: str = ""


@dataclass(frozen=True)
class KittiLayout:
    """Directory names of one KITTI split.

    Detection splits store one calib file per frame, tracking splits one per
    sequence, with frames in per-sequence subdirectories.
    """

    image_dir: str = "image_2"
    velodyne_dir: str = "velodyne"
    calib_dir: str = "calib"
    label_dir: str = "label_2"
    per_sequence_calib: bool = False

    def relpath(self, frame: FrameBundle) -> str:
        return os.path.join(frame.sequence, f"{frame.frame_id:06d}")

    def image_path(self, root, frame: FrameBundle) -> Path:
        return Path(root, self.image_dir, self.relpath(frame) + ".png")

    def velodyne_path(self, root, frame: FrameBundle) -> Path:
        return Path(root, self.velodyne_dir, self.relpath(frame) + ".bin")

    def calib_path(self, root, frame: FrameBundle) -> Path:
        if self.per_sequence_calib:
            return Path(root, self.calib_dir, f"{frame.sequence}.txt")
        return Path(root, self.calib_dir, self.relpath(frame) + ".txt")


DETECTION_LAYOUT = KittiLayout()
TRACKING_LAYOUT = KittiLayout(image_dir="image_02", label_dir="label_02", per_sequence_calib=True)


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def _decode_text(data: bytes, path=None) -> str:
    try:
        return data.decode("ascii")
    except UnicodeDecodeError as e:
        raise KittiFormatError("non-ASCII content", path=path, offset=e.start) from None


# -- point clouds -------------------------------------------------------------


def parse_point_cloud(data: bytes, path=None) -> np.ndarray:
    """Decode KITTI Velodyne bytes into an ``(N, 4)`` float32 array."""
    usable = len(data) - len(data) % POINT_STRIDE
    if usable != len(data):
        raise KittiFormatError(
            f"truncated point record ({len(data)} bytes is not a multiple of {POINT_STRIDE})",
            path=path,
            offset=usable,
        )
    points = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float32)
    bad = ~np.isfinite(points).all(axis=1)
    if bad.any():
        first = int(np.flatnonzero(bad)[0])
        raise KittiFormatError("non-finite point value", path=path, offset=first * POINT_STRIDE)
    return points


def load_point_cloud(path) -> np.ndarray:
    return parse_point_cloud(_read_bytes(path), path=path)


def encode_point_cloud(points: np.ndarray) -> bytes:
    pts = np.asarray(points)
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise ValueError(f"point cloud must have shape (N, 4), got {pts.shape}")
    return pts.astype("<f4").tobytes()


def write_point_cloud(points: np.ndarray, path) -> None:
    _write_bytes(path, encode_point_cloud(points))


# -- calibration --------------------------------------------------------------


def _canonical_calib_key(token: str) -> Optional[str]:
    name = token.rstrip(":")
    for canon, aliases in _CALIB_ALIASES.items():
        if name in aliases:
            return canon
    return None


def _check_orthonormal(rot: np.ndarray, name: str, path=None) -> None:
    err = np.abs(rot.T @ rot - np.eye(3)).max()
    det = np.linalg.det(rot)
    if not (err <= ORTHONORMAL_TOL and abs(det - 1.0) <= ORTHONORMAL_TOL):
        warnings.warn(
            f"{path or 'calibration'}: {name} rotation is not orthonormal "
            f"(max |R^T R - I| = {err:.3g}, det = {det:.6g})",
            CalibrationWarning,
            stacklevel=3,
        )


def parse_calibration(text: str, path=None) -> CalibrationSet:
    found = {}
    extra = {}
    tokens = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        token, raw_values = parts[0], parts[1:]
        try:
            values = np.array([float(v) for v in raw_values], dtype=np.float64)
        except ValueError:
            raise KittiFormatError(f"non-numeric value for {token!r}", path=path, line=lineno) from None
        canon = _canonical_calib_key(token)
        if canon is not None:
            shape = _CALIB_SHAPES[canon]
            if values.size != shape[0] * shape[1]:
                raise KittiFormatError(
                    f"{token!r} needs {shape[0] * shape[1]} values, got {values.size}", path=path, line=lineno
                )
            if not np.isfinite(values).all():
                raise KittiFormatError(f"non-finite value for {token!r}", path=path, line=lineno)
            found[canon] = values.reshape(shape)
        else:
            extra[token.rstrip(":")] = values
        tokens.append(token)
    for canon in _CALIB_SHAPES:
        if canon not in found:
            raise MissingKeyError(f"missing calibration key {canon!r}", path=path)
    calib = CalibrationSet(found["P2"], found["R0_rect"], found["Tr_velo_to_cam"], extra, tuple(tokens))
    _check_orthonormal(calib.R0_rect, "R0_rect", path)
    _check_orthonormal(calib.velo_rotation, "Tr_velo_to_cam", path)
    return calib


def load_calibration(path) -> CalibrationSet:
    return parse_calibration(_decode_text(_read_bytes(path), path), path=path)


def _fmt_values(values: Iterable[float]) -> str:
    return " ".join(f"{float(v):.{CALIB_DIGITS}g}" for v in values)


def format_calibration(calib: CalibrationSet) -> str:
    tokens = calib.tokens or ("P2:", "R0_rect:", "Tr_velo_to_cam:")
    current = {"P2": calib.P2, "R0_rect": calib.R0_rect, "Tr_velo_to_cam": calib.velo_to_cam}
    lines = []
    for token in tokens:
        canon = _canonical_calib_key(token)
        values = current[canon] if canon is not None else calib.extra[token.rstrip(":")]
        body = _fmt_values(np.ravel(values))
        lines.append(f"{token} {body}" if body else token)
    return "\n".join(lines) + "\n"


def write_calibration(calib: CalibrationSet, path) -> None:
    _write_bytes(path, format_calibration(calib).encode("ascii"))


# -- labels -------------------------------------------------------------------

_FIELD_COUNTS = {"detection": (15, 16), "tracking": (17, 18)}


def _label_from_fields(fields: Sequence[str], task: str) -> ObjectLabel:
    frame = track_id = None
    if task == "tracking":
        frame, track_id = int(fields[0]), int(fields[1])
        fields = fields[2:]
    nums = [float(v) for v in fields[1:]]
    occlusion = nums[1]
    if occlusion != int(occlusion):
        raise ValueError("occlusion must be an integer")
    return ObjectLabel(
        type=fields[0],
        truncation=nums[0],
        occlusion=int(occlusion),
        alpha=nums[2],
        bbox2d=tuple(nums[3:7]),
        dims=tuple(nums[7:10]),
        location=tuple(nums[10:13]),
        rotation_y=nums[13],
        score=nums[14] if len(nums) > 14 else None,
        track_id=track_id,
        frame=frame,
    )


def parse_labels(text: str, task: str = "detection", path=None) -> list:
    if task not in _FIELD_COUNTS:
        raise ValueError(f"unknown label task {task!r}; expected one of {sorted(_FIELD_COUNTS)}")
    allowed = _FIELD_COUNTS[task]
    labels = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) not in allowed:
            raise KittiFormatError(
                f"expected {' or '.join(map(str, allowed))} fields for {task} labels, got {len(fields)}",
                path=path,
                line=lineno,
            )
        try:
            labels.append(_label_from_fields(fields, task))
        except (ValueError, OverflowError) as e:
            raise KittiFormatError(f"bad field value ({e})", path=path, line=lineno) from None
    return labels


def load_labels(path, task: str = "detection") -> list:
    return parse_labels(_decode_text(_read_bytes(path), path), task=task, path=path)


def _num(v) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)


def format_label(label: ObjectLabel) -> str:
    fields = []
    if label.frame is not None or label.track_id is not None:
        fields += [str(label.frame), str(label.track_id)]
    fields.append(label.type)
    fields += [_num(label.truncation), str(label.occlusion), _num(label.alpha)]
    fields += [_num(v) for v in (*label.bbox2d, *label.dims, *label.location, label.rotation_y)]
    if label.score is not None:
        fields.append(_num(label.score))
    return " ".join(fields)


def write_labels(labels: Iterable[ObjectLabel], path) -> None:
    text = "".join(format_label(lb) + "\n" for lb in labels)
    _write_bytes(path, text.encode("ascii"))


# -- depth maps and images ----------------------------------------------------


def parse_depth_map(data: bytes, path=None) -> DepthMap:
    buf = np.frombuffer(data, dtype=np.uint8)
    img = cv2.imdecode(buf, cv2.IMREAD_UNCHANGED) if buf.size else None
    if img is None:
        raise KittiFormatError("not a decodable PNG", path=path)
    if img.dtype != np.uint16 or img.ndim != 2:
        raise KittiFormatError(
            f"depth maps must be single-channel 16-bit PNG, got {img.dtype} with shape {img.shape}", path=path
        )
    return DepthMap(img)


def load_depth_map(path) -> DepthMap:
    return parse_depth_map(_read_bytes(path), path=path)


def encode_depth_map(depth: DepthMap) -> bytes:
    raw = np.ascontiguousarray(depth.raw)
    if raw.dtype != np.uint16 or raw.ndim != 2:
        raise ValueError("depth map raw data must be a 2-D uint16 array")
    ok, buf = cv2.imencode(".png", raw)
    if not ok:
        raise ValueError("PNG encoding failed")
    return buf.tobytes()


def write_depth_map(depth: DepthMap, path) -> None:
    _write_bytes(path, encode_depth_map(depth))


def parse_image(data: bytes, path=None) -> np.ndarray:
    buf = np.frombuffer(data, dtype=np.uint8)
    img = cv2.imdecode(buf, cv2.IMREAD_UNCHANGED) if buf.size else None
    if img is None:
        raise KittiFormatError("not a decodable image", path=path)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] not in (3, 4):
        raise KittiFormatError(f"expected 8-bit RGB image, got {img.dtype} with shape {img.shape}", path=path)
    return np.ascontiguousarray(cv2.cvtColor(img[:, :, :3], cv2.COLOR_BGR2RGB))


def load_image(path) -> np.ndarray:
    return parse_image(_read_bytes(path), path=path)


def encode_image(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3 or min(img.shape[:2]) == 0:
        raise ValueError(f"image must be a non-empty (H, W, 3) uint8 array, got {img.dtype} {img.shape}")
    ok, buf = cv2.imencode(".png", cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
    if not ok:
        raise ValueError("PNG encoding failed")
    return buf.tobytes()


def write_image(image: np.ndarray, path) -> None:
    _write_bytes(path, encode_image(image))


# -- frames -------------------------------------------------------------------


def _write_bytes(path, data: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(data)
    except OSError as e:
        raise OSError(e.errno, f"cannot write {path} in {path.parent}: {e.strerror}") from e


def load_frame(root, frame_id: int, sequence: str = "", layout: KittiLayout = DETECTION_LAYOUT) -> FrameBundle:
    stub = FrameBundle(frame_id, None, None, None, sequence=sequence)
    return FrameBundle(
        frame_id=frame_id,
        image=load_image(layout.image_path(root, stub)),
        cloud=load_point_cloud(layout.velodyne_path(root, stub)),
        calib=load_calibration(layout.calib_path(root, stub)),
        sequence=sequence,
    )


def persist_frame(
    frame: FrameBundle,
    out_dir,
    layout: KittiLayout = DETECTION_LAYOUT,
    parts: Sequence[str] = ("image", "velodyne", "calib"),
) -> dict:
    """Write the requested parts of ``frame`` under ``out_dir`` and return its manifest entry."""
    out_dir = Path(out_dir)
    writers = {
        "image": (layout.image_path, write_image, frame.image),
        "velodyne": (layout.velodyne_path, write_point_cloud, frame.cloud),
        "calib": (layout.calib_path, write_calibration, frame.calib),
    }
    outputs = {}
    for part in parts:
        path_fn, writer, value = writers[part]
        path = path_fn(out_dir, frame)
        writer(value, path)
        outputs[part] = os.path.relpath(path, out_dir)
    return {"id": frame.frame_id, "sequence": frame.sequence, "output_paths": outputs}
