import hashlib
import json
import math

import numpy as np
import pytest
from scipy import stats

from msf_bench import engine
from msf_bench.dataset_io import load_calibration
from msf_bench.engine import (
    CorruptionError,
    CorruptionSpec,
    corrupt_dataset,
    corrupt_frame,
    corrupt_sequence,
    derive_rng,
    derive_seed,
)
from msf_bench.misalignment import axis_rotation
from msf_bench.severity import MODALITIES, PATTERNS, default_table
from synthetic import make_frame, tree_bytes, write_detection_dataset, write_tracking_dataset

FRAME_PATTERNS = [p for p in PATTERNS if p != "TM"]


@pytest.fixture(scope="module")
def frame():
    return make_frame(np.random.default_rng(21), frame_id=4)


# -- seeding ------------------------------------------------------------------


def test_same_tuple_same_stream():
    a = derive_rng(7, 3, "GN_C", 2).random(1000)
    b = derive_rng(7, 3, "GN_C", 2).random(1000)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("change", [dict(frame=1), dict(seed=8), dict(pattern="GN_L"), dict(severity=3)])
def test_each_tuple_field_changes_stream(change):
    base = dict(seed=7, frame=0, pattern="GN_C", severity=2)
    other = {**base, **change}
    a = derive_rng(base["seed"], base["frame"], base["pattern"], base["severity"]).random(100)
    b = derive_rng(other["seed"], other["frame"], other["pattern"], other["severity"]).random(100)
    assert not np.array_equal(a, b)


def test_draws_pass_chi_square_uniformity():
    draws = derive_rng(0, 0, "RN", 1).random(100_000)
    counts, _ = np.histogram(draws, bins=100, range=(0, 1))
    assert stats.chisquare(counts).pvalue > 0.01


def test_derive_seed_is_stable_across_runs():
    # guards against accidental changes to the hashing scheme
    digest = hashlib.sha256(b"msf-bench|42|0000/5|FG|3").digest()[:16]
    assert derive_seed(42, "0000/5", "FG", 3) == int.from_bytes(digest, "little")


# -- CorruptionSpec validation ------------------------------------------------


def test_unknown_pattern():
    with pytest.raises(CorruptionError, match="SNOW"):
        CorruptionSpec("SNOW", 1).validate()


@pytest.mark.parametrize("severity", [0, 4, 1.5, True])
def test_bad_severity(severity):
    with pytest.raises(CorruptionError):
        CorruptionSpec("GN_C", severity).validate()


def test_loss_has_five_levels():
    CorruptionSpec("LOSS_C", 5).validate()
    assert default_table().value("LOSS_L", 5) == 1.0


def test_param_override_and_unknown_param():
    assert CorruptionSpec("FG", 3, params={"visibility": 20.0}).resolve()["visibility"] == 20.0
    with pytest.raises(CorruptionError, match="bogus"):
        CorruptionSpec("FG", 3, params={"bogus": 1}).validate()


def test_numpy_integer_severity_accepted():
    assert default_table().value("RN", np.int64(2)) == 25


# -- single frames ------------------------------------------------------------


@pytest.mark.parametrize("pattern", FRAME_PATTERNS)
def test_only_listed_modalities_change(frame, pattern):
    severity = default_table().n_levels(pattern)
    out = corrupt_frame(frame, CorruptionSpec(pattern, severity, seed=1))
    touched = MODALITIES[pattern]
    assert np.array_equal(out.image, frame.image) == ("image" not in touched)
    assert np.array_equal(out.cloud, frame.cloud) == ("velodyne" not in touched)
    assert np.array_equal(out.calib.velo_to_cam, frame.calib.velo_to_cam) == ("calib" not in touched)
    np.testing.assert_array_equal(out.calib.P2, frame.calib.P2)


def test_brightness_touches_camera_only(frame):
    out = corrupt_frame(frame, CorruptionSpec("BR", 1))
    assert out.cloud.tobytes() == frame.cloud.tobytes()
    assert not np.array_equal(out.image, frame.image)


def test_lidar_noise_leaves_image_bitwise(frame):
    out = corrupt_frame(frame, CorruptionSpec("GN_L", 2))
    assert out.image.tobytes() == frame.image.tobytes()


def test_fog_level_three_couples_visibility(frame, monkeypatch):
    seen = {}
    real_cam, real_lidar = engine.fog_camera, engine.weather_lidar

    def spy_camera(img, depth, params):
        seen["camera"] = params.visibility
        return real_cam(img, depth, params)

    def spy_lidar(points, params, rng):
        seen["lidar"] = params.extinction
        return real_lidar(points, params, rng)

    monkeypatch.setattr(engine, "fog_camera", spy_camera)
    monkeypatch.setattr(engine, "weather_lidar", spy_lidar)
    corrupt_frame(frame, CorruptionSpec("FG", 3))
    assert seen["camera"] == 51
    assert seen["lidar"] == pytest.approx(math.log(20) / 51, rel=1e-15)


def test_corrupt_frame_is_deterministic(frame):
    for pattern in ("RN", "GN_C", "IN_L", "LOSS_L"):
        a = corrupt_frame(frame, CorruptionSpec(pattern, 2, seed=5))
        b = corrupt_frame(frame, CorruptionSpec(pattern, 2, seed=5))
        assert a.image.tobytes() == b.image.tobytes()
        assert a.cloud.tobytes() == b.cloud.tobytes()


def test_camera_and_lidar_streams_are_independent(frame):
    # the rain streaks must not depend on how many draws the LiDAR side made
    spec = CorruptionSpec("RN", 2, seed=3)
    a = corrupt_frame(frame, spec)
    smaller = engine.replace(frame, cloud=frame.cloud[:100])
    b = corrupt_frame(smaller, spec)
    # same streak mask: pixel-wise differences come only from the depth-dependent veil
    mask_a = (a.image.astype(int) - frame.image).min(axis=2) > 40
    mask_b = (b.image.astype(int) - frame.image).min(axis=2) > 40
    assert mask_a.any()
    assert (mask_a == mask_b).mean() > 0.99


def test_temporal_pattern_needs_sequence(frame):
    with pytest.raises(CorruptionError, match="sequence"):
        corrupt_frame(frame, CorruptionSpec("TM", 1))


def test_corrupt_sequence_temporal():
    rng = np.random.default_rng(0)
    seq = [make_frame(rng, i, 16, 32, 50) for i in range(5)]
    out = corrupt_sequence(seq, CorruptionSpec("TM", 2))
    assert [p.lidar_source for p in out] == [0, 1, 2]
    assert out[0].bundle.cloud is seq[0].cloud


# -- datasets -----------------------------------------------------------------


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    return write_detection_dataset(tmp_path_factory.mktemp("kitti"), n_frames=2, h=48, w=160, n_points=1500)


def test_dataset_runs_are_bitwise_identical(dataset, tmp_path):
    spec = CorruptionSpec("DK", 1, seed=7)
    corrupt_dataset(dataset, spec, tmp_path / "a")
    corrupt_dataset(dataset, spec, tmp_path / "b")
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_output_layout_mirrors_input(dataset, tmp_path):
    corrupt_dataset(dataset, CorruptionSpec("GN_L", 1), tmp_path / "o")
    out_files = set(tree_bytes(tmp_path / "o")) - {"manifest.json"}
    assert out_files == set(tree_bytes(dataset))


def test_manifest_contents(dataset, tmp_path):
    manifest = corrupt_dataset(dataset, CorruptionSpec("RN", 2, seed=3), tmp_path / "o")
    on_disk = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert on_disk == manifest
    assert len(manifest["frames"]) == 2
    assert manifest["failed"] == []
    assert manifest["spec"] == {"pattern": "RN", "severity": 2, "seed": 3, "params": {}}
    assert manifest["parameters"]["rate"] == 25
    assert manifest["toolkit_version"]
    assert "approximation" in manifest["notes"]
    seeds = {f["seed"] for f in manifest["frames"]}
    assert len(seeds) == 2
    assert manifest["frames"][0]["seed"] == format(derive_seed(3, 0, "RN", 2), "032x")


def test_parallel_matches_serial(dataset, tmp_path):
    spec = CorruptionSpec("IN_C", 3, seed=11)
    corrupt_dataset(dataset, spec, tmp_path / "serial", jobs=1)
    corrupt_dataset(dataset, spec, tmp_path / "parallel", jobs=2)
    assert tree_bytes(tmp_path / "serial") == tree_bytes(tmp_path / "parallel")


def test_untouched_files_copied_verbatim(dataset, tmp_path):
    corrupt_dataset(dataset, CorruptionSpec("MB", 2), tmp_path / "o")
    src, out = tree_bytes(dataset), tree_bytes(tmp_path / "o")
    for rel, data in src.items():
        if not rel.startswith("image_2"):
            assert out[rel] == data, rel
    assert any(out[r] != src[r] for r in src if r.startswith("image_2"))


def test_spatial_misalignment_rewrites_calibration(dataset, tmp_path):
    manifest = corrupt_dataset(dataset, CorruptionSpec("SM", 3), tmp_path / "o")
    src, out = tree_bytes(dataset), tree_bytes(tmp_path / "o")
    for rel in src:
        if rel.startswith(("image_2", "velodyne", "label_2")):
            assert out[rel] == src[rel]
    a = load_calibration(dataset / "calib" / "000000.txt")
    b = load_calibration(tmp_path / "o" / "calib" / "000000.txt")
    # the stored rotation is orthonormal only to ~1e-7, so compare matrices rather than angles
    np.testing.assert_allclose(b.velo_rotation @ a.velo_rotation.T, axis_rotation("y", 2.0), atol=1e-6)
    np.testing.assert_allclose(b.velo_translation, a.velo_translation, rtol=1e-8)
    assert [e["status"] for e in manifest["calibration_files"]] == ["ok", "ok"]


def test_failed_frame_recorded(dataset, tmp_path):
    broken = tmp_path / "broken"
    for rel, data in tree_bytes(dataset).items():
        (broken / rel).parent.mkdir(parents=True, exist_ok=True)
        (broken / rel).write_bytes(data)
    (broken / "velodyne" / "000001.bin").write_bytes(b"\0" * 17)
    manifest = corrupt_dataset(broken, CorruptionSpec("GN_L", 1), tmp_path / "o")
    assert manifest["failed"] == ["1"]
    statuses = {f["id"]: f["status"] for f in manifest["frames"]}
    assert statuses == {0: "ok", 1: "failed"}


def test_missing_input_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        corrupt_dataset(tmp_path / "nope", CorruptionSpec("BR", 1), tmp_path / "o")


def test_tracking_temporal_dataset(tmp_path):
    root = write_tracking_dataset(tmp_path / "trk", n_frames=8)
    manifest = corrupt_dataset(root, CorruptionSpec("TM", 3), tmp_path / "o")
    statuses = [f["status"] for f in manifest["frames"]]
    assert statuses == ["dropped"] * 3 + ["ok"] * 5
    f7 = manifest["frames"][-1]
    assert (f7["camera_source_frame"], f7["lidar_source_frame"]) == (7, 4)
    out, src = tmp_path / "o", root
    assert (out / "velodyne/0000/000007.bin").read_bytes() == (src / "velodyne/0000/000004.bin").read_bytes()
    assert (out / "image_02/0000/000007.png").read_bytes() == (src / "image_02/0000/000007.png").read_bytes()
    assert not (out / "velodyne/0000/000002.bin").exists()
    assert (out / "calib/0000.txt").read_bytes() == (src / "calib/0000.txt").read_bytes()
