"""Coarse stage: contrastive training, top-k descriptor search and PSNR gating."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import descriptor as D
from . import nn
from .errors import ConfigError, NumericalError
from .geom import PoseSE3, random_rotation
from .renderer import psnr, render
from .scene import Dataset, Submap, _inside_room, _quantize, cube_side

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 24
    batch: int = 32
    tau: float = 0.1
    k: int = 5
    seed: int = 0
    augment: int = 10              # extra jittered views rendered per training pose
    val_views: int = 40
    epsilon_quantile: float = 0.10

    def validate(self):
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.batch < 2:
            raise ConfigError("batch must be >= 2")


@dataclass
class RetrievalCandidate:
    submap_id: int
    score: float
    pose: PoseSE3
    psnr: float = float("nan")


@dataclass
class TrainingView:
    pose: PoseSE3
    inputs: D.ImageInputs
    positive: int


@dataclass
class TrainResult:
    store: nn.ParamStore
    history: list
    epsilon_db: float
    metadata: dict = field(default_factory=dict)


def nearest_submap(center, submaps) -> int:
    """Index of the submap whose reference camera center is closest (lower id on ties)."""
    centers = np.array([s.reference_pose.center for s in submaps])
    dist = np.linalg.norm(centers - np.asarray(center), axis=1)
    return int(np.flatnonzero(dist == dist.min())[0])


def build_pairs(dataset: Dataset, submaps) -> list[tuple[int, int]]:
    """(training frame index, positive submap index) for every training frame."""
    if not submaps:
        raise ConfigError("no submaps")
    return [(i, nearest_submap(p.center, submaps)) for i, p in enumerate(dataset.split.train_poses)]


def map_inputs(dataset: Dataset, submaps) -> list[D.MapInputs]:
    return [D.MapInputs.from_observations(D.extract_instances_3d(s, dataset.scene)) for s in submaps]


def image_inputs(frame, dataset: Dataset, min_pixels: int | None = None) -> D.ImageInputs:
    mp = dataset.traj_config.min_pixels if min_pixels is None else min_pixels
    obs = D.extract_instances_2d(frame, dataset.scene.instance_classes(), mp)
    return D.ImageInputs.from_observations(obs)


def _jittered_views(dataset: Dataset, submaps, n_per_pose: int, rng, count: int | None = None):
    """Render perturbed copies of training poses, distributed like the queries."""
    cfg = dataset.traj_config
    scene = dataset.scene
    intr = dataset.split.intr
    max_rot = np.radians(cfg.max_query_rot_deg)
    max_t = cfg.max_query_trans_frac * cube_side(scene, cfg)
    train = dataset.split.train_poses
    bases = (np.repeat(np.arange(len(train)), n_per_pose) if count is None
             else rng.integers(len(train), size=count))
    views = []
    for b in bases:
        P = train[int(b)]
        for _ in range(50):
            R = random_rotation(rng, max_rot) @ P.rotation
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            c = P.center + d * rng.uniform(0.0, max_t)
            if _inside_room(scene, c):
                break
        else:
            continue
        pose = PoseSE3.from_camera_center(R, c)
        frame = _quantize(render(scene.splats, pose, intr))
        try:
            x = image_inputs(frame, dataset)
        except D.EmptyViewError:
            continue
        views.append((TrainingView(pose, x, nearest_submap(c, submaps)), frame))
    return views


def training_views(dataset: Dataset, submaps, cfg: TrainConfig, rng) -> list[TrainingView]:
    views = []
    for i, p in build_pairs(dataset, submaps):
        try:
            x = image_inputs(dataset.split.train_frames[i], dataset)
        except D.EmptyViewError:
            continue
        views.append(TrainingView(dataset.split.train_poses[i], x, p))
    if cfg.augment > 0:
        views += [v for v, _ in _jittered_views(dataset, submaps, cfg.augment, rng)]
    return views


def calibrate_epsilon(dataset: Dataset, submaps, cfg: TrainConfig, rng) -> float:
    """Low quantile of PSNR between validation views and their positive submap renders."""
    views = _jittered_views(dataset, submaps, 0, rng, count=cfg.val_views)
    scores = []
    for v, frame in views:
        ref = render(dataset.scene.splats, submaps[v.positive].reference_pose, dataset.split.intr)
        scores.append(psnr(ref.rgb, frame.rgb))
    return float(np.quantile(scores, cfg.epsilon_quantile)) if scores else 0.0


def train_retrieval(dataset: Dataset, submaps, cfg: TrainConfig | None = None,
                    views: list | None = None) -> TrainResult:
    """Contrastive training with in-batch negatives; returns parameters and per-epoch loss."""
    cfg = cfg or TrainConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    if views is None:
        views = training_views(dataset, submaps, cfg, rng)
    if len(views) < 2 * cfg.batch:
        raise ConfigError(f"need at least {2 * cfg.batch} training pairs, have {len(views)}")
    maps = map_inputs(dataset, submaps)
    store = D.build_model(dataset.scene.n_classes, seed=cfg.seed)
    adam = nn.AdamState.for_params(store, lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(views))
        losses = []
        for bi, start in enumerate(range(0, len(order) - 1, cfg.batch)):
            idx = order[start:start + cfg.batch]
            if len(idx) < 2:
                continue
            loss, grads = D.batch_loss_and_grad(store, [views[i].inputs for i in idx],
                                                [maps[views[i].positive] for i in idx], cfg.tau)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {bi} (lr={cfg.lr})")
            nn.adam_step(adam, store, grads)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        log.info("epoch %d loss %.4f", epoch + 1, history[-1])
    epsilon = calibrate_epsilon(dataset, submaps, cfg, rng)
    meta = {"train_config": asdict(cfg), "epsilon_db": epsilon,
            "history": history, "n_views": len(views), "n_classes": dataset.scene.n_classes}
    return TrainResult(store, history, epsilon, meta)


def submap_descriptors(store: nn.ParamStore, dataset: Dataset, submaps) -> np.ndarray:
    return np.array([D.describe_map(store, x) for x in map_inputs(dataset, submaps)])


def retrieve_topk(query_desc, submap_desc, submaps, k: int) -> list[RetrievalCandidate]:
    """Exact cosine top-k over all submaps; ties go to the lower submap index."""
    if len(submaps) == 0:
        raise ValueError("empty submap list")
    if k < 1:
        raise ValueError("k must be >= 1")
    M = np.asarray(submap_desc, dtype=np.float64)
    q = np.asarray(query_desc, dtype=np.float64)
    norms = np.linalg.norm(M, axis=1) * np.linalg.norm(q)
    scores = (M @ q) / np.where(norms > 0, norms, 1.0)
    order = np.argsort(-scores, kind="stable")[:min(k, len(submaps))]
    return [RetrievalCandidate(submaps[i].id, float(scores[i]), submaps[i].reference_pose)
            for i in order]


def psnr_gate(candidates, query_frame, scene, intr, epsilon_db: float) -> list[RetrievalCandidate]:
    """Drop candidates whose render scores below ``epsilon_db``; never returns empty."""
    if not candidates:
        raise ValueError("no candidates to gate")
    scored = []
    for c in candidates:
        r = render(scene.splats, c.pose, intr)
        scored.append(RetrievalCandidate(c.submap_id, c.score, c.pose, psnr(r.rgb, query_frame.rgb)))
    kept = [c for c in scored if c.psnr >= epsilon_db]
    if not kept:
        best = max(range(len(scored)), key=lambda i: (scored[i].psnr, -i))
        kept = [scored[best]]
    return kept
