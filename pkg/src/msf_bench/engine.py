"""Deterministic corruption of single frames and whole KITTI directories.

Randomness never flows between frames: each frame gets its own generator,
seeded from a hash of ``(seed, frame, pattern, severity)``. Results therefore
do not depend on processing order or on how many workers run.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .camera import (
    add_gaussian_noise,
    add_impulse_noise,
    apply_kernel,
    dense_depth_from_lidar,
    disk_kernel,
    distort_radial,
    drop_pixels,
    fog_camera,
    fog_params_from_table,
    motion_kernel,
    rain_camera,
    rain_params_from_table,
    scale_exposure,
)
from .dataset_io import (
    DETECTION_LAYOUT,
    TRACKING_LAYOUT,
    FrameBundle,
    KittiLayout,
    load_calibration,
    load_frame,
    persist_frame,
    write_calibration,
)
from .lidar import LidarWeatherParams, add_gaussian_jitter, displace_points, drop_points, weather_lidar
from .misalignment import TemporalShift, spatial_misalign, temporal_misalign
from .severity import MODALITIES, PATTERNS, SeverityTable, default_table

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"

# physical parameter each severity level selects, and the --param name that overrides it
LEVEL_PARAM = {
    "RN": "rate",
    "FG": "visibility",
    "BR": "gain",
    "DK": "gain",
    "DT": "k1",
    "MB": "length",
    "DB": "radius",
    "GN_C": "sigma",
    "GN_L": "sigma",
    "IN_C": "fraction",
    "IN_L": "fraction",
    "SM": "degrees",
    "TM": "delay",
    "LOSS_C": "fraction",
    "LOSS_L": "fraction",
}

APPROXIMATION_NOTES = {
    "RN": "camera rain is a streak-and-veil photometric approximation; LiDAR rain uses attenuate/drop/scatter",
    "FG": "LiDAR fog uses an attenuate/drop/scatter approximation",
}


class CorruptionError(ValueError):
    pass


@dataclass(frozen=True)
class CorruptionSpec:
    pattern: str
    severity: int
    seed: int = 0
    params: dict = field(default_factory=dict)

    def validate(self, table: Optional[SeverityTable] = None) -> None:
        table = table or default_table()
        if self.pattern not in PATTERNS:
            raise CorruptionError(f"unknown pattern {self.pattern!r}; known patterns: {', '.join(PATTERNS)}")
        n = table.n_levels(self.pattern)
        if isinstance(self.severity, bool) or int(self.severity) != self.severity or not 1 <= self.severity <= n:
            raise CorruptionError(f"severity for {self.pattern} must be in 1..{n}, got {self.severity!r}")
        allowed = {LEVEL_PARAM[self.pattern], *table.options.get(self.pattern, {})} - {"unit"}
        unknown = set(self.params) - allowed
        if unknown:
            raise CorruptionError(
                f"unknown parameter(s) {sorted(unknown)} for {self.pattern}; allowed: {sorted(allowed)}"
            )

    def resolve(self, table: Optional[SeverityTable] = None) -> dict:
        """Physical parameters for this job: level value and pattern options, with overrides applied."""
        table = table or default_table()
        self.validate(table)
        values = {k: v for k, v in table.options.get(self.pattern, {}).items() if k != "unit"}
        values[LEVEL_PARAM[self.pattern]] = table.value(self.pattern, int(self.severity))
        values.update(self.params)
        return values

    def to_json(self) -> dict:
        return asdict(self)


def frame_key(frame_id, sequence: str = "") -> str:
    return f"{sequence}/{frame_id}" if sequence else str(frame_id)


def derive_seed(seed: int, frame_id, pattern: str, severity: int) -> int:
    """128-bit seed hashed from the job tuple; ``frame_id`` may be an int or a sequence-qualified key."""
    text = f"msf-bench|{int(seed)}|{frame_id}|{pattern}|{int(severity)}"
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:16], "little")


def derive_rng(seed: int, frame_id, pattern: str, severity: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, frame_id, pattern, severity)))


def _frame_depth(frame: FrameBundle, table: SeverityTable) -> np.ndarray:
    fallback = float(table.option("fog", "fallback_depth"))
    return dense_depth_from_lidar(frame.cloud, frame.calib, frame.image.shape, fallback)


def corrupt_frame(frame: FrameBundle, spec: CorruptionSpec, table: Optional[SeverityTable] = None) -> FrameBundle:
    """Apply one pattern to one frame; parts the pattern does not touch are passed through as-is."""
    table = table or default_table()
    p = spec.resolve(table)
    pattern = spec.pattern
    if pattern == "TM":
        raise CorruptionError("TM pairs frames across time; use corrupt_sequence on an ordered frame list")
    rng = derive_rng(spec.seed, frame_key(frame.frame_id, frame.sequence), pattern, spec.severity)
    cam_rng, lidar_rng = rng.spawn(2)
    img, cloud, calib = frame.image, frame.cloud, frame.calib

    if pattern == "RN":
        params = rain_params_from_table(p["rate"], table)
        img = rain_camera(img, params, cam_rng, depth=_frame_depth(frame, table))
        cloud = weather_lidar(cloud, LidarWeatherParams.for_rain(p["rate"], table), lidar_rng)
    elif pattern == "FG":
        img = fog_camera(img, _frame_depth(frame, table), fog_params_from_table(p["visibility"], table))
        cloud = weather_lidar(cloud, LidarWeatherParams.for_fog(p["visibility"], table), lidar_rng)
    elif pattern in ("BR", "DK"):
        img = scale_exposure(img, p["gain"])
    elif pattern == "DT":
        img = distort_radial(img, p["k1"], p.get("k2"))
    elif pattern == "MB":
        img = apply_kernel(img, motion_kernel(int(p["length"]), float(p["angle"])))
    elif pattern == "DB":
        img = apply_kernel(img, disk_kernel(int(p["radius"])))
    elif pattern == "GN_C":
        img = add_gaussian_noise(img, p["sigma"], cam_rng)
    elif pattern == "IN_C":
        img = add_impulse_noise(img, p["fraction"], cam_rng)
    elif pattern == "LOSS_C":
        img = drop_pixels(img, p["fraction"], cam_rng)
    elif pattern == "GN_L":
        cloud = add_gaussian_jitter(cloud, p["sigma"], lidar_rng)
    elif pattern == "IN_L":
        cloud = displace_points(cloud, p["fraction"], float(p["displacement"]), lidar_rng)
    elif pattern == "LOSS_L":
        cloud = drop_points(cloud, p["fraction"], lidar_rng)
    elif pattern == "SM":
        calib = spatial_misalign(calib, str(p["axis"]), float(p["degrees"]))
    return replace(frame, image=img, cloud=cloud, calib=calib)


def temporal_shift_for(spec: CorruptionSpec, table: Optional[SeverityTable] = None) -> TemporalShift:
    p = spec.resolve(table)
    return TemporalShift(str(p["branch"]), float(p["delay"]), float(p["frame_rate"]))


def corrupt_sequence(frames, spec: CorruptionSpec, table: Optional[SeverityTable] = None) -> list:
    """Temporal misalignment over an ordered list of frames; other patterns map ``corrupt_frame``."""
    if spec.pattern == "TM":
        return temporal_misalign(frames, temporal_shift_for(spec, table))
    return [corrupt_frame(f, spec, table) for f in frames]


# -- datasets -----------------------------------------------------------------


def detect_layout(root) -> KittiLayout:
    root = Path(root)
    if (root / TRACKING_LAYOUT.image_dir).is_dir():
        return TRACKING_LAYOUT
    return DETECTION_LAYOUT


def discover_frames(root, layout: KittiLayout) -> list:
    """``(sequence, frame_id)`` for every Velodyne scan under ``root``, sorted."""
    vel = Path(root, layout.velodyne_dir)
    if not vel.is_dir():
        raise FileNotFoundError(f"no {layout.velodyne_dir}/ directory in {root}")
    frames = []
    for path in vel.rglob("*.bin"):
        rel = path.relative_to(vel)
        seq = str(rel.parent) if rel.parent != Path(".") else ""
        frames.append((seq, path.stem))
    return sorted(frames, key=lambda f: (f[0], int(f[1]) if f[1].isdigit() else -1, f[1]))


def _stub(seq, frame_id):
    return FrameBundle(frame_id, None, None, None, sequence=seq)


def _copy(src: Path, dst: Path) -> None:
    dst.parent.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(src, dst)


def _frame_job(args):
    in_dir, out_dir, layout, seq, stem, spec, table = args
    entry = {"id": stem, "sequence": seq, "status": "ok", "output_paths": {}}
    try:
        frame_id = int(stem)
        entry["id"] = frame_id
        entry["seed"] = format(derive_seed(spec.seed, frame_key(frame_id, seq), spec.pattern, spec.severity), "032x")
        touched = MODALITIES[spec.pattern]
        stub = _stub(seq, frame_id)
        if spec.pattern == "SM":
            # calibration is handled per calib file; sensor data is copied verbatim
            touched = ()
        else:
            frame = load_frame(in_dir, frame_id, seq, layout)
            corrupted = corrupt_frame(frame, spec, table)
            entry["output_paths"].update(persist_frame(corrupted, out_dir, layout, touched)["output_paths"])
        for part, path_fn in (("image", layout.image_path), ("velodyne", layout.velodyne_path)):
            if part not in touched:
                dst = path_fn(out_dir, stub)
                _copy(path_fn(in_dir, stub), dst)
                entry["output_paths"][part] = os.path.relpath(dst, out_dir)
    except Exception as e:  # noqa: BLE001 - a bad frame must not abort the run
        entry["status"] = "failed"
        entry["error"] = f"{type(e).__name__}: {e}"
    return entry


def _map(fn, jobs_args, jobs: int):
    if jobs <= 1 or len(jobs_args) <= 1:
        return [fn(a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, jobs_args, chunksize=max(1, len(jobs_args) // (4 * jobs))))


def _copy_tree_except(src: Path, dst: Path, skip_dirs) -> None:
    for path in sorted(src.rglob("*")):
        rel = path.relative_to(src)
        if rel.parts[0] in skip_dirs or path.is_dir():
            continue
        if dst.resolve() in path.resolve().parents:
            continue
        _copy(path, dst / rel)


def _misalign_calib_files(in_dir: Path, out_dir: Path, layout: KittiLayout, spec, table) -> list:
    p = spec.resolve(table)
    entries = []
    for path in sorted(Path(in_dir, layout.calib_dir).rglob("*.txt")):
        rel = path.relative_to(in_dir)
        try:
            calib = spatial_misalign(load_calibration(path), str(p["axis"]), float(p["degrees"]))
            write_calibration(calib, out_dir / rel)
            entries.append({"path": str(rel), "status": "ok"})
        except Exception as e:  # noqa: BLE001
            entries.append({"path": str(rel), "status": "failed", "error": f"{type(e).__name__}: {e}"})
    return entries


def _temporal_entries(in_dir: Path, out_dir: Path, layout: KittiLayout, frames, spec, table) -> list:
    shift = temporal_shift_for(spec, table)
    entries = []
    by_seq = {}
    for seq, stem in frames:
        by_seq.setdefault(seq, []).append(stem)
    for seq, stems in by_seq.items():
        try:
            ids = [int(s) for s in stems]
            # bundles carry file paths: pairing is decided without decoding any data
            bundles = [
                FrameBundle(i, layout.image_path(in_dir, _stub(seq, i)), layout.velodyne_path(in_dir, _stub(seq, i)),
                            None, sequence=seq)
                for i in ids
            ]  # fmt: skip
            paired = temporal_misalign(bundles, shift)
        except ValueError as e:
            entries += [{"id": s, "sequence": seq, "status": "failed", "error": str(e)} for s in stems]
            continue
        emitted = {pf.bundle.frame_id for pf in paired}
        entries += [{"id": i, "sequence": seq, "status": "dropped"} for i in ids if i not in emitted]
        for pf in paired:
            stub = _stub(seq, pf.bundle.frame_id)
            entry = {"id": pf.bundle.frame_id, "sequence": seq, "status": "ok", **pf.record(), "output_paths": {}}
            try:
                for part, src, path_fn in (
                    ("image", pf.bundle.image, layout.image_path),
                    ("velodyne", pf.bundle.cloud, layout.velodyne_path),
                ):
                    dst = path_fn(out_dir, stub)
                    _copy(src, dst)
                    entry["output_paths"][part] = os.path.relpath(dst, out_dir)
            except OSError as e:
                entry["status"] = "failed"
                entry["error"] = f"{type(e).__name__}: {e}"
            entries.append(entry)
    return sorted(entries, key=lambda e: (e["sequence"], e["id"]))


def corrupt_dataset(
    in_dir,
    spec: CorruptionSpec,
    out_dir,
    jobs: int = 1,
    table: Optional[SeverityTable] = None,
) -> dict:
    """Write a corrupted copy of a KITTI directory and return its manifest.

    ``out_dir`` mirrors ``in_dir``: files the pattern does not touch (labels,
    untouched sensors, calibration) are byte-for-byte copies. The manifest is
    also written to ``out_dir/manifest.json``; frames that could not be
    processed are listed under ``failed``.
    """
    table = table or default_table()
    spec.validate(table)
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    if not in_dir.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {in_dir}")
    layout = detect_layout(in_dir)
    frames = discover_frames(in_dir, layout)
    out_dir.mkdir(parents=True, exist_ok=True)

    skip = {layout.image_dir, layout.velodyne_dir}
    if spec.pattern == "SM":
        skip.add(layout.calib_dir)
    _copy_tree_except(in_dir, out_dir, skip)

    calib_entries = None
    if spec.pattern == "TM":
        entries = _temporal_entries(in_dir, out_dir, layout, frames, spec, table)
    else:
        if spec.pattern == "SM":
            calib_entries = _misalign_calib_files(in_dir, out_dir, layout, spec, table)
        args = [(in_dir, out_dir, layout, seq, stem, spec, table) for seq, stem in frames]
        entries = _map(_frame_job, args, jobs)
    for e in entries:
        if e["status"] == "failed":
            log.warning("frame %s failed: %s", frame_key(e["id"], e["sequence"]), e.get("error"))

    failed = [frame_key(e["id"], e["sequence"]) for e in entries if e["status"] == "failed"]
    if calib_entries:
        failed += [e["path"] for e in calib_entries if e["status"] == "failed"]
    manifest = {
        "spec": spec.to_json(),
        "seed": spec.seed,
        "parameters": spec.resolve(table),
        "toolkit_version": __version__,
        "severity_config": table.digest,
        "layout": asdict(layout),
        "frames": entries,
        "failed": failed,
    }
    if calib_entries is not None:
        manifest["calibration_files"] = calib_entries
    if spec.pattern in APPROXIMATION_NOTES:
        manifest["notes"] = APPROXIMATION_NOTES[spec.pattern]
    with open(out_dir / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest
