"""Gradient verification against central finite differences."""

from __future__ import annotations

import numpy as np

from . import descriptor as D
from . import nn
from .geom import CameraIntrinsics, PoseSE3, perturb_left, so3_exp
from .refine import freeze_matches, match_keypoints, refinement_loss
from .renderer import Splats, pixel_loss, project_splats, render, render_pose_grad
from .scene import Dataset


def vector_rel_error(analytic, numeric, floor: float = 1e-2) -> float:
    """Worst per-component relative error.

    Each denominator is floored at ``floor`` times the largest reference
    component, so components that are pure rounding noise in a 32-bit
    render do not dominate.
    """
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    scale = max(np.max(np.abs(n)), 1e-12)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(n), floor * scale)))


def random_splats(rng, n: int = 30, depth: float = 4.0) -> Splats:
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return Splats(rng.uniform(-1, 1, (n, 3)) + [0, 0, depth], np.log(rng.uniform(0.05, 0.4, (n, 3))),
                  q, rng.uniform(0.3, 0.9, n), rng.uniform(0, 1, (n, 3)), rng.integers(0, 5, n))


def twist_fd(loss_at, pose: PoseSE3, h: float = 1e-4, order_at=None, h_min: float = 1e-7) -> np.ndarray:
    """Central differences of ``loss_at(pose)`` along the six left-perturbation directions.

    With ``order_at`` given, the step along each direction is halved until the
    depth order it returns agrees at both ends. A swap between two overlapping
    splats is a genuine jump in the loss, which no derivative describes.
    """
    out = np.zeros(6)
    for i in range(6):
        step = h
        while True:
            e = np.zeros(6)
            e[i] = step
            plus, minus = perturb_left(e, pose), perturb_left(-e, pose)
            if order_at is None or step / 2 < h_min or np.array_equal(order_at(plus), order_at(minus)):
                break
            step /= 2
        out[i] = (loss_at(plus) - loss_at(minus)) / (2 * step)
    return out


def _order(splats, intr):
    return lambda p: project_splats(splats, p, intr).index


def render_grad_case(seed: int, dtype=np.float32) -> float:
    """Pose gradient of the pixel loss on a random splat cloud against FD."""
    rng = np.random.default_rng(seed)
    splats = random_splats(rng)
    intr = CameraIntrinsics.from_fov(80, 60, 60)
    pose = PoseSE3(so3_exp(rng.normal(scale=0.05, size=3)), rng.normal(scale=0.1, size=3))
    target = render(splats, perturb_left(rng.normal(scale=0.03, size=6), pose), intr).rgb
    frame, state = render(splats, pose, intr, dtype=dtype, return_state=True)
    _, d_img = pixel_loss(frame.rgb, target)
    g = render_pose_grad(splats, pose, intr, d_img, state=state)
    fd = twist_fd(lambda p: pixel_loss(render(splats, p, intr, dtype=dtype).rgb, target)[0], pose,
                  order_at=_order(splats, intr))
    return vector_rel_error(g, fd)


def refine_grad_case(dataset: Dataset, query: int, seed: int, lam: float = 0.5, dtype=np.float64) -> float:
    """Twist gradient of the combined refinement loss (matches frozen) against FD.

    Renders default to 64-bit here: on a full scene the 32-bit accumulation
    noise is comparable to the smaller gradient components.
    """
    rng = np.random.default_rng(seed)
    splats, intr = dataset.scene.splats, dataset.split.intr
    q = dataset.split.query_frames[query]
    pose = perturb_left(np.concatenate([rng.normal(scale=0.03, size=3), rng.normal(scale=0.02, size=3)]),
                        dataset.split.query_poses[query])
    rendered, state = render(splats, pose, intr, dtype=dtype, return_state=True)
    matches = freeze_matches(match_keypoints(q, rendered, state.dominant), splats, pose, intr)
    _, _, _, g = refinement_loss(q, rendered, state, matches, pose, splats, lam)

    def loss_at(p):
        r, s = render(splats, p, intr, dtype=dtype, return_state=True)
        return refinement_loss(q, r, s, matches, p, splats, lam)[0]

    return vector_rel_error(g, twist_fd(loss_at, pose, order_at=_order(splats, intr)))


def model_grad_check(dataset: Dataset, n_pairs: int = 4, n_coords: int = 256, seed: int = 0) -> float:
    """grad_check of the contrastive loss through both descriptor branches."""
    ic = dataset.scene.instance_classes()
    subs = dataset.submaps[:n_pairs]
    imgs = [D.ImageInputs.from_observations(
        D.extract_instances_2d(dataset.split.train_frames[s.train_index], ic)) for s in subs]
    maps = [D.MapInputs.from_observations(D.extract_instances_3d(s, dataset.scene)) for s in subs]
    store = D.build_model(dataset.scene.n_classes, seed=seed)
    return nn.grad_check(lambda st: D.batch_loss_and_grad(st, imgs, maps, 0.1), store,
                         n_coords=n_coords, seed=seed)


def gradient_suite(dataset: Dataset, render_cases: int = 20, refine_cases: int = 5,
                   n_coords: int = 256) -> dict:
    """Worst-case relative errors for the three analytic gradients."""
    return {
        "model": model_grad_check(dataset, n_coords=n_coords),
        "render": max(render_grad_case(s) for s in range(render_cases)),
        "refine": max(refine_grad_case(dataset, s % len(dataset.split.query_frames), s)
                      for s in range(refine_cases)),
    }
