import json

import cv2
import numpy as np
import pytest

from trackadapt.colmap_model import read_model, validate_model
from trackadapt.exceptions import DegenerateConfigurationError
from trackadapt.geometry import camera_center, reprojection_errors
from trackadapt.synth import SceneConfig, config_from_dict, config_to_dict, generate_scene, write_scene
from trackadapt.tracks import ReliableTrackExtractor


def test_deterministic_per_seed():
    cfg = SceneConfig(n_frames=6, n_landmarks=120)
    a, b = generate_scene(cfg, 3), generate_scene(cfg, 3)
    assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))
    assert a.model.points.keys() == b.model.points.keys()
    c = generate_scene(cfg, 4)
    assert not np.array_equal(a.frames[0], c.frames[0])


def test_truth_model_valid_and_exact(small_scene):
    assert validate_model(small_scene.model) == []
    errs = np.array(list(reprojection_errors(small_scene.model).values()))
    assert errs.max() < 1e-9
    assert all(p.track_length >= 2 for p in small_scene.model.points.values())


def test_frames_and_specular_blobs(small_scene):
    cfg = small_scene.config
    for frame, mask in zip(small_scene.frames, small_scene.specular_masks):
        assert frame.shape == (cfg.height, cfg.width) and frame.dtype == np.uint8
        assert mask.any() and np.all(frame[mask] >= 230)
        assert frame[~mask].max() < 180


def test_landmarks_on_tube_and_trajectory_inside(small_scene):
    cfg = small_scene.config
    xyz = np.array([p.xyz for p in small_scene.model.points.values()])
    assert np.allclose(np.hypot(xyz[:, 0], xyz[:, 1]), cfg.radius)
    centers = np.array([camera_center(img) for img in small_scene.model.images.values()])
    assert np.all(np.hypot(centers[:, 0], centers[:, 1]) < cfg.radius)
    assert np.all(np.diff(centers[:, 2]) > 0)


def test_dropout_zero_means_all_green():
    scene = generate_scene(SceneConfig(n_frames=8, n_landmarks=150, dropout=0.0), seed=1)
    for img in scene.model.images.values():
        vis = scene.projections[img.id]
        kept = {pid for pid in vis if pid in scene.model.points}
        assert set(img.point3d_ids.tolist()) == kept


def test_correspondences_agree_with_tracks(small_scene):
    tracks = ReliableTrackExtractor().fit(small_scene.model)
    for (a, b), truth in list(small_scene.correspondences.items())[:15]:
        got = tracks.correspondences(a, b)
        # reliable tracks only cover frames between first and last observation; they are a subset of visibility
        truth_map = dict(zip(truth.track_ids.tolist(), truth.xy_a.tolist()))
        for tid, xy in zip(got.track_ids.tolist(), got.xy_a.tolist()):
            assert np.allclose(truth_map[tid], xy, atol=1e-9)


def test_validation_errors():
    with pytest.raises(ValueError):
        SceneConfig(n_landmarks=5)
    with pytest.raises(ValueError):
        SceneConfig(dropout=1.0)
    with pytest.raises(DegenerateConfigurationError):
        generate_scene(SceneConfig(n_landmarks=8, n_frames=2, length=200.0), seed=0)


def test_config_dict_round_trip():
    cfg = SceneConfig(n_frames=9, dropout=0.1)
    assert config_from_dict(json.loads(json.dumps(config_to_dict(cfg)))) == cfg


def test_write_scene(tmp_path, small_scene):
    root = write_scene(small_scene, tmp_path / "s", model_format="text")
    back = read_model(root / "sparse")
    assert back.points.keys() == small_scene.model.points.keys()
    png = cv2.imread(str(root / "images" / small_scene.names[0]), cv2.IMREAD_UNCHANGED)
    assert np.array_equal(png, small_scene.frames[0])
    meta = json.loads((root / "scene.json").read_text())
    assert meta["planned_spread"] == small_scene.planned_spread
