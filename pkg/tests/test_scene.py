import numpy as np
import pytest

from maft3d import scene as sc


def small_params(**overrides):
    base = dict(
        extent=(5.0, 5.0, 2.5),
        n_inst=(3, 5),
        inst_points=(80, 150),
        clutter_fraction=0.2,
        noise_sigma=0.004,
    )
    base.update(overrides)
    return sc.GenParams(**base)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def test_generate_deterministic():
    a = sc.generate_scene(7, small_params())
    b = sc.generate_scene(7, small_params())
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(a.colors, b.colors)
    np.testing.assert_array_equal(a.sem_label, b.sem_label)
    np.testing.assert_array_equal(a.inst_label, b.inst_label)


def test_generate_forced_instance_count():
    scene = sc.generate_scene(3, small_params(n_inst=(3, 3)))
    assert scene.n_instances == 3


def test_generate_zero_noise_spheres_exact_radius():
    params = small_params(noise_sigma=0.0, shapes=("sphere",), n_inst=(2, 2))
    scene = sc.generate_scene(5, params)
    for i in range(scene.n_instances):
        pts = scene.points[scene.inst_label == i]
        center = pts.mean(axis=0)
        radii = np.linalg.norm(pts - center, axis=1)
        # all sampled points sit on one sphere around the true center; the
        # centroid estimate is good to ~r/sqrt(n)
        assert radii.std() < 0.02


def test_generate_min_points_per_instance():
    scene = sc.generate_scene(1, small_params())
    for i in range(scene.n_instances):
        assert (scene.inst_label == i).sum() >= 50


def test_generate_rejection_error():
    params = small_params(extent=(0.5, 0.5, 0.5), n_inst=(40, 40), min_separation=0.4)
    with pytest.raises(sc.GenerationError):
        sc.generate_scene(0, params)


def test_generate_validates_invariants():
    scene = sc.generate_scene(11, small_params())
    scene.validate(18)  # raises on violation
    for i in range(scene.n_instances):
        sems = np.unique(scene.sem_label[scene.inst_label == i])
        assert sems.size == 1


# ---------------------------------------------------------------------------
# file round-trip
# ---------------------------------------------------------------------------


def test_save_load_roundtrip_exact(tmp_path):
    scene = sc.generate_scene(2, small_params())
    path = tmp_path / "scene.txt"
    sc.save_scene(scene, path)
    loaded = sc.load_scene(path)
    np.testing.assert_array_equal(scene.points, loaded.points)
    np.testing.assert_array_equal(scene.colors, loaded.colors)
    np.testing.assert_array_equal(scene.sem_label, loaded.sem_label)
    np.testing.assert_array_equal(scene.inst_label, loaded.inst_label)


def test_load_header_count_mismatch(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("MAFT-SCENE v1 3 2\n0 0 0 0.5 0.5 0.5 0 0\n")
    with pytest.raises(sc.ParseError, match="3 points"):
        sc.load_scene(path)


def test_load_empty_file(tmp_path):
    path = tmp_path / "empty.txt"
    path.write_text("")
    with pytest.raises(sc.ParseError, match="line 1"):
        sc.load_scene(path)


def test_load_malformed_value_names_line(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("MAFT-SCENE v1 2 1\n0 0 0 0.5 0.5 0.5 0 0\n0 0 nope 0.5 0.5 0.5 0 0\n")
    with pytest.raises(sc.ParseError, match="line 3"):
        sc.load_scene(path)


def test_load_bad_header(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("SCENE 1 2\n")
    with pytest.raises(sc.ParseError, match="header"):
        sc.load_scene(path)


def test_load_rejects_label_violations(tmp_path):
    # instance 1 never appears: ids must be contiguous from 0
    path = tmp_path / "bad.txt"
    path.write_text(
        "MAFT-SCENE v1 2 2\n0 0 0 0.5 0.5 0.5 0 0\n1 0 0 0.5 0.5 0.5 1 2\n"
    )
    with pytest.raises(sc.SceneError):
        sc.load_scene(path)


# ---------------------------------------------------------------------------
# bounds
# ---------------------------------------------------------------------------


def test_bounds_basic():
    scene = sc.Scene(
        points=np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]),
        colors=np.zeros((2, 3)),
        sem_label=np.array([0, 0]),
        inst_label=np.array([0, 0]),
    )
    b = sc.scene_bounds(scene)
    np.testing.assert_array_equal(b.p_min, [0, 0, 0])
    np.testing.assert_array_equal(b.p_max, [1, 2, 3])


def test_bounds_single_point_degenerate():
    scene = sc.Scene(
        points=np.array([[1.0, 1.0, 1.0]]),
        colors=np.zeros((1, 3)),
        sem_label=np.array([0]),
        inst_label=np.array([0]),
    )
    with pytest.raises(sc.SceneError, match="degenerate"):
        sc.scene_bounds(scene)


def test_bounds_translation_equivariance():
    scene = sc.generate_scene(4, small_params())
    b = sc.scene_bounds(scene)
    v = np.array([1.5, -2.0, 0.75])
    shifted = sc.Scene(scene.points + v, scene.colors, scene.sem_label, scene.inst_label)
    b2 = sc.scene_bounds(shifted)
    np.testing.assert_allclose(b2.p_min, b.p_min + v, atol=1e-12)
    np.testing.assert_allclose(b2.p_max, b.p_max + v, atol=1e-12)


def test_bounds_empty_scene():
    scene = sc.Scene(
        points=np.zeros((0, 3)),
        colors=np.zeros((0, 3)),
        sem_label=np.zeros(0, dtype=np.int64),
        inst_label=np.zeros(0, dtype=np.int64),
    )
    with pytest.raises(sc.SceneError):
        sc.scene_bounds(scene)


# ---------------------------------------------------------------------------
# voxelization
# ---------------------------------------------------------------------------


def test_voxelize_merges_nearby_points():
    scene = sc.Scene(
        points=np.array([[0.0, 0.0, 0.0], [0.005, 0.0, 0.0], [1.0, 1.0, 1.0]]),
        colors=np.array([[0.2, 0.2, 0.2], [0.4, 0.4, 0.4], [1.0, 1.0, 1.0]]),
        sem_label=np.array([0, 0, 1]),
        inst_label=np.array([0, 0, 1]),
    )
    tokens, gt = sc.voxelize(scene, 0.02)
    assert tokens.n_tokens == 2
    merged = tokens.positions[tokens.positions[:, 0] < 0.5][0]
    np.testing.assert_allclose(merged, [0.0025, 0.0, 0.0], atol=1e-12)


def test_voxelize_no_merging_when_voxel_small():
    scene = sc.generate_scene(6, small_params(inst_points=(60, 80), clutter_fraction=0.0))
    tokens, _ = sc.voxelize(scene, 1e-6)
    assert tokens.n_tokens == scene.n_points


def test_voxelize_conserves_mass():
    scene = sc.generate_scene(8, small_params())
    tokens, _ = sc.voxelize(scene, 0.05)
    assert sum(len(t) for t in tokens.token_to_points) == scene.n_points
    all_idx = np.sort(np.concatenate(tokens.token_to_points))
    np.testing.assert_array_equal(all_idx, np.arange(scene.n_points))


def test_voxelize_centroids_and_gt_centers():
    scene = sc.generate_scene(9, small_params())
    tokens, gt = sc.voxelize(scene, 0.05)
    for t, members in enumerate(tokens.token_to_points[:20]):
        np.testing.assert_allclose(
            tokens.positions[t], scene.points[members].mean(axis=0), atol=1e-12
        )
    for i in range(gt.n_instances):
        np.testing.assert_allclose(
            gt.centers[i], tokens.positions[gt.masks[i]].mean(axis=0), atol=1e-12
        )
        assert gt.masks[i].any()


def test_voxelize_majority_vote_tie_break():
    # two points of inst 0 + two of inst 1 in one voxel: tie goes to lowest id
    scene = sc.Scene(
        points=np.array([[0.0, 0, 0], [0.001, 0, 0], [0.002, 0, 0], [0.003, 0, 0], [1.0, 1, 1]]),
        colors=np.full((5, 3), 0.5),
        sem_label=np.array([1, 1, 0, 0, 2]),
        inst_label=np.array([1, 1, 0, 0, 2]),
    )
    tokens, gt = sc.voxelize(scene, 0.05)
    assert tokens.n_tokens == 2
    # instance 0 wins the shared voxel; instance 1 loses every voxel
    assert gt.n_instances == 2
    assert set(gt.classes.tolist()) == {0, 2}


def test_voxelize_translation_equivariance():
    scene = sc.generate_scene(10, small_params())
    tokens, gt = sc.voxelize(scene, 0.05)
    v = np.array([2.0, 3.0, 1.0])
    shifted = sc.Scene(scene.points + v, scene.colors, scene.sem_label, scene.inst_label)
    tokens2, gt2 = sc.voxelize(shifted, 0.05)
    assert tokens2.n_tokens == tokens.n_tokens
    np.testing.assert_allclose(tokens2.positions, tokens.positions + v, atol=1e-9)
    np.testing.assert_array_equal(gt2.masks, gt.masks)
    np.testing.assert_array_equal(gt2.classes, gt.classes)
    np.testing.assert_allclose(gt2.centers, gt.centers + v, atol=1e-9)


def test_voxelize_rejects_bad_size():
    scene = sc.generate_scene(1, small_params())
    with pytest.raises(sc.SceneError):
        sc.voxelize(scene, 0.0)


# ---------------------------------------------------------------------------
# cropping
# ---------------------------------------------------------------------------


def test_crop_noop_when_under_limit():
    scene = sc.generate_scene(12, small_params())
    out = sc.crop_to_limit(scene, scene.n_points + 10, np.random.default_rng(0))
    assert out is scene


def test_crop_respects_limit_and_invariants():
    scene = sc.generate_scene(13, small_params())
    out = sc.crop_to_limit(scene, scene.n_points // 3, np.random.default_rng(1))
    assert out.n_points <= scene.n_points // 3
    assert out.n_points >= 1
    out.validate(18)
    for i in range(out.n_instances):
        assert (out.inst_label == i).sum() >= 1


def test_crop_deterministic_for_fixed_rng():
    scene = sc.generate_scene(14, small_params())
    a = sc.crop_to_limit(scene, 200, np.random.default_rng(5))
    b = sc.crop_to_limit(scene, 200, np.random.default_rng(5))
    np.testing.assert_array_equal(a.points, b.points)


def test_crop_single_point_limit():
    scene = sc.generate_scene(15, small_params())
    out = sc.crop_to_limit(scene, 1, np.random.default_rng(2))
    assert out.n_points == 1
