import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from data import (
    BONE_TABLE, Dataset, _body_to_camera, denormalize_2d, load_dataset, normalize_2d, project, save_dataset,
    synth_generate,
)
from dcgct import ConfigError, DatasetError


def test_normalization_maps_image_frame():
    pixels = np.array([[500.0, 500.0], [0.0, 0.0], [1000.0, 1000.0]])
    coords = normalize_2d(pixels, 1000, 1000)
    assert_allclose(coords, [[0.0, 0.0], [-1.0, -1.0], [1.0, 1.0]])
    assert_allclose(denormalize_2d(coords, 1000, 1000), pixels, atol=1e-6)


def test_normalization_keeps_aspect_ratio():
    coords = normalize_2d(np.array([[1000.0, 500.0]]), 1000, 500)
    assert_allclose(coords, [[1.0, 0.0]])
    with pytest.raises(ConfigError):
        normalize_2d(coords, 0, 10)


def _record(topo, shift=0.0):
    target = np.zeros((topo.joint_count, 3))
    target[1:] = np.arange(3 * (topo.joint_count - 1)).reshape(-1, 3)
    return {"input2d": np.zeros((topo.joint_count, 2)).tolist(),
            "target3d_mm": (target + shift).tolist(), "action": "walk"}


def test_load_and_recenter(tmp_path, topo):
    path = tmp_path / "set.jsonl"
    path.write_text(json.dumps(_record(topo)) + "\n\n" + json.dumps(_record(topo, shift=10.0)) + "\n")
    dataset = load_dataset(str(path), topo)
    assert len(dataset) == 2
    assert dataset.frames == 1
    assert_array_equal(dataset.targets()[1], dataset.targets()[0])
    assert dataset.actions() == ["walk", "walk"]


def test_schema_errors_name_line(tmp_path, topo):
    path = tmp_path / "bad.jsonl"
    bad = _record(topo)
    bad["target3d_mm"] = bad["target3d_mm"][:-1]
    path.write_text(json.dumps(_record(topo)) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(DatasetError, match="line 2"):
        load_dataset(str(path), topo)

    path.write_text("{broken\n")
    with pytest.raises(DatasetError, match="line 1"):
        load_dataset(str(path), topo)

    with pytest.raises(DatasetError):
        load_dataset(str(tmp_path / "missing.jsonl"), topo)


def test_mixed_arity_rejected(tmp_path, topo):
    seq = _record(topo)
    seq["input2d"] = np.zeros((3, topo.joint_count, 2)).tolist()
    path = tmp_path / "mixed.jsonl"
    path.write_text(json.dumps(_record(topo)) + "\n" + json.dumps(seq) + "\n")
    with pytest.raises(DatasetError, match="arity"):
        load_dataset(str(path), topo)


def test_save_then_load(tmp_path, topo):
    dataset = synth_generate(topo, 5, seed=2)
    path = str(tmp_path / "synth.jsonl")
    save_dataset(dataset, path)
    loaded = load_dataset(path, topo)
    assert_allclose(loaded.inputs(), dataset.inputs())
    assert_allclose(loaded.targets(), dataset.targets())
    assert loaded.samples[0].camera == dataset.samples[0].camera


def test_threaded_loading_keeps_order(tmp_path, topo, monkeypatch):
    path = str(tmp_path / "synth.jsonl")
    save_dataset(synth_generate(topo, 12, seed=4), path)
    serial = load_dataset(path, topo)
    monkeypatch.setenv("DCGCT_THREADS", "4")
    threaded = load_dataset(path, topo)
    assert_array_equal(threaded.targets(), serial.targets())


def test_synthetic_bone_lengths(topo):
    dataset = synth_generate(topo, 4, seed=0)
    for sample in dataset.samples:
        assert_array_equal(sample.target3d_mm[topo.root], 0.0)
        for j, p in enumerate(topo.parent):
            if p is None:
                continue
            length = np.linalg.norm(sample.target3d_mm[j] - sample.target3d_mm[p])
            assert length == pytest.approx(BONE_TABLE[topo.joint_names[j]][0], rel=1e-9)


def test_synthetic_projection_consistency(topo):
    dataset = synth_generate(topo, 3, seed=8)
    for sample in dataset.samples:
        camera = sample.camera
        points = sample.target3d_mm + np.asarray(camera["root_mm"])
        assert_allclose(project(points, camera), sample.input2d, atol=1e-9)


def test_synthetic_sequences(topo):
    dataset = synth_generate(topo, 2, frames=5, seed=1)
    assert dataset.frames == 5
    assert dataset.inputs().shape == (2, 5, 17, 2)
    assert dataset.targets().shape == (2, 17, 3)
    with pytest.raises(ConfigError):
        synth_generate(topo, 2, frames=4)


def test_synthetic_is_seeded(topo):
    a = synth_generate(topo, 3, noise_mm=5.0, seed=9)
    b = synth_generate(topo, 3, noise_mm=5.0, seed=9)
    assert_array_equal(a.inputs(), b.inputs())
    clean = synth_generate(topo, 3, seed=9)
    assert not np.allclose(a.inputs(), clean.inputs())


def test_batches_cover_every_sample(topo):
    dataset = Dataset(synth_generate(topo, 10, seed=0).samples, topo)
    batches = list(dataset.batches(4, np.random.default_rng(0)))
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate(batches)) == list(range(10))


def test_camera_frame_flips_vertical_axis():
    assert_array_equal(_body_to_camera(np.array([[1.0, 2.0, 3.0]])), [[1.0, -2.0, 3.0]])
