import json
import logging

import numpy as np
import pytest

from semloc.descriptor import extract_instances_2d
from semloc.errors import ConfigError, DataError
from semloc.geom import PoseSE3
from semloc.scene import (SHELL_CLASSES, DatasetSplit, SceneConfig, TrajectoryConfig,
                          count_visible_instances, cube_side, generate_scene, load_dataset,
                          partition_submaps, sample_trajectories, save_dataset, submap_members)


def test_single_object_scene_has_six_shell_instances_plus_one():
    s = generate_scene(SceneConfig(n_objects=1, n_classes=SHELL_CLASSES))
    assert s.n_instances == 6 + 1
    assert np.array_equal(np.unique(s.splats.instance_ids), np.arange(7))


def test_generation_is_deterministic():
    assert generate_scene(seed=3).equals(generate_scene(seed=3))
    assert not generate_scene(seed=3).equals(generate_scene(seed=4))


def test_primitive_invariants(dataset):
    s = dataset.scene
    assert np.all(s.class_ids < s.n_classes)
    np.testing.assert_allclose(np.linalg.norm(s.splats.quats, axis=1), 1.0, atol=1e-6)
    assert np.all((s.splats.opacity > 0) & (s.splats.opacity < 1))
    assert np.all((s.splats.colors >= 0) & (s.splats.colors <= 1))
    assert np.all(np.linalg.eigvalsh(s.splats.covariances()) > 0)
    # every object instance (not shell) lies inside the room
    obj = s.class_ids >= SHELL_CLASSES
    m = s.splats.means[obj]
    assert np.all(m >= s.bounds[0]) and np.all(m <= s.bounds[1])
    counts = np.bincount(s.splats.instance_ids)
    assert np.all(counts >= 1)
    # instance -> class is a function
    ic = s.instance_classes()
    assert np.array_equal(ic[s.splats.instance_ids], s.class_ids)


def test_sixteen_objects_eight_classes():
    s = generate_scene(SceneConfig(n_objects=16, n_classes=8), seed=1)
    assert s.n_instances == 6 + 16 and s.class_ids.max() < 8


@pytest.mark.parametrize("kw", [dict(n_objects=0), dict(n_classes=1), dict(room=(1.5, 6.0, 3.0)),
                                dict(prims_per_object=(5, 2))])
def test_infeasible_configs_rejected(kw):
    with pytest.raises(ConfigError):
        generate_scene(SceneConfig(**kw))


def test_path_outside_room_rejected():
    with pytest.raises(ConfigError, match="room bounds"):
        sample_trajectories(generate_scene(), TrajectoryConfig(ellipse_frac=(0.55, 0.3)),
                            render_frames=False)


def test_interval_equal_to_path_length_gives_one_pose():
    scene = generate_scene()
    split = sample_trajectories(scene, TrajectoryConfig(train_interval=1e3, n_query=0),
                                render_frames=False)
    assert len(split.train_poses) == 1


def test_zero_perturbation_queries_sit_on_training_poses():
    scene = generate_scene()
    cfg = TrajectoryConfig(n_train=12, n_query=5, max_query_rot_deg=0.0, max_query_trans_frac=0.0)
    split = sample_trajectories(scene, cfg, render_frames=False)
    for q, b in zip(split.query_poses, split.query_base):
        np.testing.assert_allclose(q.as_matrix(), split.train_poses[b].as_matrix(), atol=1e-12)


def test_default_split_counts_and_visibility(dataset):
    sp, cfg = dataset.split, dataset.traj_config
    assert len(sp.train_poses) == 60 and len(sp.query_poses) == 20
    assert 15 <= len(dataset.submaps) <= 25
    ic = dataset.scene.instance_classes()
    for f in sp.train_frames + sp.query_frames:
        assert count_visible_instances(f, cfg.min_pixels) >= 3
        assert len(extract_instances_2d(f, ic, cfg.min_pixels)) >= 3
    train_c = np.array([p.center for p in sp.train_poses])
    for q in sp.query_poses:
        assert np.min(np.linalg.norm(train_c - q.center, axis=1)) > 0


def test_submap_membership_is_half_open_and_recomputable(dataset):
    for s in dataset.submaps:
        assert np.array_equal(s.members, submap_members(dataset.scene, s.center, s.side))
        m = dataset.scene.splats.means[s.members]
        assert np.all(m >= s.center - s.side / 2) and np.all(m < s.center + s.side / 2)
        assert s.reference_pose == dataset.split.train_poses[s.train_index]
        np.testing.assert_array_equal(s.center, s.reference_pose.center)


def test_point_on_upper_face_is_excluded():
    scene = generate_scene()
    p = scene.splats.means[0]
    side = 1.0
    assert 0 not in submap_members(scene, p - side / 2, side)
    assert 0 in submap_members(scene, p + side / 2, side)


def test_adjacent_submaps_overlap(dataset):
    a, b = dataset.submaps[0], dataset.submaps[1]
    assert np.linalg.norm(a.center - b.center) < a.side
    assert len(np.intersect1d(a.members, b.members)) > 0


def test_every_query_has_a_positive_within_reach(dataset):
    L = dataset.submaps[0].side
    reach = L / 2 + dataset.split.interval
    centers = np.array([s.center for s in dataset.submaps])
    for q in dataset.split.query_poses:
        assert np.min(np.linalg.norm(centers - q.center, axis=1)) <= reach


def test_large_interval_gives_single_submap(dataset):
    subs = partition_submaps(dataset.scene, dataset.split.train_poses, 1000, dataset.submaps[0].side)
    assert len(subs) == 1 and subs[0].train_index == 0


def test_sparse_submaps_dropped_with_warning(dataset, caplog):
    poses = dataset.split.train_poses[:2] + [PoseSE3.from_camera_center(np.eye(3), [50.0, 50.0, 50.0])]
    with caplog.at_level(logging.WARNING):
        subs = partition_submaps(dataset.scene, poses, 1, dataset.submaps[0].side)
    assert len(subs) == 2 and "dropping submap" in caplog.text


def test_no_surviving_submap_is_an_error(dataset):
    far = [PoseSE3.from_camera_center(np.eye(3), [50.0, 50.0, 50.0])]
    with pytest.raises(DataError, match="too sparse"):
        partition_submaps(dataset.scene, far, 1, 1.0)


def test_bad_submap_interval():
    with pytest.raises(ConfigError):
        partition_submaps(generate_scene(), [PoseSE3.identity()], 0, 1.0)


def test_cube_side_default(dataset):
    assert cube_side(dataset.scene, dataset.traj_config) == pytest.approx(0.4 * dataset.scene.diagonal)


def _assert_same(a, b):
    assert a.scene.equals(b.scene)
    assert a.submaps == b.submaps
    assert a.split.train_poses == b.split.train_poses and a.split.query_poses == b.split.query_poses
    assert a.split.intr == b.split.intr and a.split.interval == b.split.interval
    for fa, fb in zip(a.split.train_frames + a.split.query_frames, b.split.train_frames + b.split.query_frames):
        assert np.array_equal(fa.rgb, fb.rgb) and np.array_equal(fa.id_map, fb.id_map)


def test_dataset_round_trip_is_bit_exact(dataset, tmp_path):
    save_dataset(tmp_path / "a", dataset)
    back = load_dataset(tmp_path / "a")
    _assert_same(dataset, back)
    save_dataset(tmp_path / "b", back)
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes(), f


def test_empty_query_split_round_trips(dataset, tmp_path):
    from semloc.scene import Dataset
    sp = dataset.split
    ds = Dataset(dataset.scene, DatasetSplit(sp.intr, sp.train_poses, [], sp.train_frames, [],
                                             sp.interval, []), dataset.submaps, dataset.traj_config)
    save_dataset(tmp_path, ds)
    back = load_dataset(tmp_path)
    assert back.split.query_poses == [] and back.split.query_frames == []


@pytest.fixture
def saved(dataset, tmp_path):
    save_dataset(tmp_path, dataset)
    return tmp_path


def test_corrupt_manifest_names_field(saved):
    d = json.loads((saved / "scene.json").read_text())
    del d["gaussians"]["opacity"]
    (saved / "scene.json").write_text(json.dumps(d))
    with pytest.raises(DataError, match="opacity"):
        load_dataset(saved)


def test_malformed_field_named(saved):
    d = json.loads((saved / "submaps.json").read_text())
    d["submaps"][2]["center"] = [1.0, 2.0]
    (saved / "submaps.json").write_text(json.dumps(d))
    with pytest.raises(DataError, match=r"submaps.json\[2\].*center"):
        load_dataset(saved)


def test_version_mismatch(saved):
    d = json.loads((saved / "trajectory.json").read_text())
    d["version"] = 99
    (saved / "trajectory.json").write_text(json.dumps(d))
    with pytest.raises(DataError, match="version"):
        load_dataset(saved)


def test_truncated_json(saved):
    text = (saved / "scene.json").read_text()
    (saved / "scene.json").write_text(text[: len(text) // 2])
    with pytest.raises(DataError, match="truncated"):
        load_dataset(saved)


def test_missing_frames_listed(saved):
    (saved / "frames" / "query" / "3.rgb.png").unlink()
    (saved / "frames" / "train" / "7.rgb.png").unlink()
    with pytest.raises(DataError, match=r"train/7.*query/3"):
        load_dataset(saved)


def test_truncated_id_map(saved):
    p = saved / "frames" / "train" / "0.id.u16"
    p.write_bytes(p.read_bytes()[:100])
    with pytest.raises(DataError, match="id map"):
        load_dataset(saved)
