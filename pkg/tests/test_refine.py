import numpy as np
import pytest

from semloc import checks
from semloc.geom import perturb_left, pose_error
from semloc.refine import (MatchSet, RefineConfig, RefinementAborted, RefinementTrace,
                           freeze_matches, match_keypoints, refine_pose, refinement_loss,
                           select_final)
from semloc.renderer import Frame, pixel_loss, render


def as_frame(rgb):
    h, w = rgb.shape[:2]
    return Frame(np.ascontiguousarray(rgb), np.zeros((h, w), dtype=np.int64), np.ones((h, w)), np.ones((h, w)))


def test_self_match(dataset):
    f = dataset.split.query_frames[0]
    m = match_keypoints(f, f)
    assert len(m) >= 10
    assert np.mean(np.linalg.norm(m.xq - m.xr, axis=1)) < 0.5


@pytest.mark.parametrize("dx,dy", [(2, 0), (-3, 1), (1, 3)])
def test_integer_shift_recovered(dataset, dx, dy):
    img = dataset.split.train_frames[5].rgb
    q = as_frame(img[6:54, 6:74])
    r = as_frame(img[6 + dy:54 + dy, 6 + dx:74 + dx])
    m = match_keypoints(q, r)
    assert len(m) >= 4
    np.testing.assert_allclose(m.xq - m.xr, np.tile([dx, dy], (len(m), 1)), atol=0.5)


def test_constant_images_give_no_matches():
    f = as_frame(np.full((40, 50, 3), 0.4, dtype=np.float32))
    m = match_keypoints(f, f)
    assert len(m) == 0 and m.insufficient


def test_size_mismatch_rejected():
    with pytest.raises(ValueError):
        match_keypoints(as_frame(np.zeros((10, 10, 3))), as_frame(np.zeros((10, 12, 3))))


def _setup(dataset, qi, seed=0):
    rng = np.random.default_rng(seed)
    sp, splats = dataset.split, dataset.scene.splats
    pose = perturb_left(np.concatenate([rng.normal(scale=0.03, size=3), rng.normal(scale=0.02, size=3)]),
                        sp.query_poses[qi])
    r, s = render(splats, pose, sp.intr, return_state=True)
    m = freeze_matches(match_keypoints(sp.query_frames[qi], r, s.dominant), splats, pose, sp.intr)
    return pose, r, s, m


def test_lambda_zero_is_pixel_loss(dataset):
    pose, r, s, m = _setup(dataset, 2)
    q = dataset.split.query_frames[2]
    L, Lp, Lm, _ = refinement_loss(q, r, s, m, pose, dataset.scene.splats, 0.0)
    assert L == Lp == pixel_loss(r.rgb, q.rgb)[0]
    assert len(m) >= 4 and Lm > 0


def test_identical_render_is_global_minimum(dataset):
    sp = dataset.split
    pose = sp.query_poses[1]
    r, s = render(dataset.scene.splats, pose, sp.intr, return_state=True)
    m = freeze_matches(match_keypoints(r, r, s.dominant), dataset.scene.splats, pose, sp.intr)
    L, Lp, Lm, g = refinement_loss(r, r, s, m, pose, dataset.scene.splats, 0.5)
    assert L == pytest.approx(0.0, abs=1e-12) and np.linalg.norm(g) < 1e-6


def test_empty_matches_contribute_nothing(dataset):
    pose, r, s, _ = _setup(dataset, 3)
    q = dataset.split.query_frames[3]
    empty = freeze_matches(MatchSet.empty(), dataset.scene.splats, pose, dataset.split.intr)
    L, Lp, Lm, g = refinement_loss(q, r, s, empty, pose, dataset.scene.splats, 0.5)
    assert Lm == 0.0 and L == Lp


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(dataset, seed):
    assert checks.refine_grad_case(dataset, seed, seed) < 1e-2


def test_zero_iterations_keeps_init(dataset):
    sp = dataset.split
    init = perturb_left([0.05, 0, 0, 0, 0.02, 0], sp.query_poses[0])
    tr = refine_pose(dataset.scene.splats, sp.query_frames[0], init, sp.intr, RefineConfig(max_iterations=0))
    assert len(tr) == 1 and tr.entries[0].pose == init and tr.final_pose == init


@pytest.mark.parametrize("qi", [0, 7])
def test_ground_truth_start_is_stationary(dataset, qi):
    sp = dataset.split
    gt = sp.query_poses[qi]
    tr = refine_pose(dataset.scene.splats, sp.query_frames[qi], gt, sp.intr)
    t, r = pose_error(tr.final_pose, gt)
    assert t < 0.001 * dataset.scene.diagonal and r < 0.05
    assert len(tr) <= RefineConfig().max_iterations + 1
    assert np.all(np.diff(tr.best_so_far()) <= 0)


@pytest.mark.slow
@pytest.mark.parametrize("qi", [0, 3, 6])
def test_converges_from_five_degrees_two_percent(dataset, qi):
    sp = dataset.split
    diag = dataset.scene.diagonal
    rng = np.random.default_rng(qi)
    w = rng.normal(size=3)
    t = rng.normal(size=3)
    xi = np.concatenate([t * 0.02 * diag / np.linalg.norm(t), w * np.radians(5) / np.linalg.norm(w)])
    init = perturb_left(xi, sp.query_poses[qi])
    tr = refine_pose(dataset.scene.splats, sp.query_frames[qi], init, sp.intr)
    te, re = pose_error(tr.final_pose, sp.query_poses[qi])
    assert te < 0.002 * diag and re < 0.2


def test_non_finite_loss_aborts_with_trace(dataset):
    sp = dataset.split
    q = sp.query_frames[0]
    bad = Frame(q.rgb.copy(), q.id_map, q.alpha, q.depth)
    bad.rgb[3, 3, 0] = np.nan
    with pytest.raises(RefinementAborted, match="iteration 0") as exc:
        refine_pose(dataset.scene.splats, bad, sp.query_poses[0], sp.intr)
    assert exc.value.trace.final_pose == sp.query_poses[0]


def test_lambda_validated():
    with pytest.raises(ValueError):
        RefineConfig(lam=1.5)


def _trace(psnr):
    return RefinementTrace(final_psnr=psnr)


def test_select_final_rules(dataset):
    assert select_final([_trace(20.0)]) == 0
    assert select_final([_trace(20.0), _trace(31.0), _trace(31.0), _trace(5.0)]) == 1
    rng = np.random.default_rng(0)
    scores = list(rng.uniform(10, 40, 9))
    assert select_final([_trace(s) for s in scores]) == max(range(9), key=lambda i: (scores[i], -i))
    with pytest.raises(ValueError):
        select_final([])


def test_select_final_picks_ground_truth(dataset):
    sp = dataset.split
    gt = sp.query_poses[4]
    q = render(dataset.scene.splats, gt, sp.intr)
    poses = [perturb_left([0.05, 0, 0, 0, 0.03, 0], gt), gt, perturb_left([0, 0.1, 0, 0.02, 0, 0], gt)]
    traces = [refine_pose(dataset.scene.splats, q, p, sp.intr, RefineConfig(max_iterations=0)) for p in poses]
    assert select_final(traces) == 1
