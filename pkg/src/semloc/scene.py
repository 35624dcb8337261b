"""Synthetic semantic splat rooms, camera trajectories, submaps and dataset I/O.

A scene is a box-shaped room whose floor, ceiling and walls are tiled with
flat Gaussians, plus a set of object instances. Each object is a cluster of
primitives whose size and color palette depend on its class. Every
primitive carries an instance id and a class id.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .geom import CameraIntrinsics, PoseSE3, random_rotation
from .renderer import SENTINEL, Frame, Splats

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
FLOOR_CLASS = 0
WALL_CLASS = 1
SHELL_CLASSES = 2


@dataclass
class SceneConfig:
    room: tuple = (8.0, 6.0, 3.0)
    n_objects: int = 16
    n_classes: int = 8
    prims_per_object: tuple = (20, 40)
    tile: float = 0.5
    seed: int = 0

    def validate(self):
        if not 1 <= self.n_objects <= 64:
            raise ConfigError(f"n_objects must be in [1, 64], got {self.n_objects}")
        if not SHELL_CLASSES <= self.n_classes <= 16:
            raise ConfigError(f"n_classes must be in [{SHELL_CLASSES}, 16], got {self.n_classes}")
        lo, hi = self.prims_per_object
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad prims_per_object range {self.prims_per_object}")
        if min(self.room) <= 2 * _MAX_OBJECT_EXTENT:
            raise ConfigError(f"room {self.room} too small for objects of extent {_MAX_OBJECT_EXTENT}")


@dataclass
class TrajectoryConfig:
    n_train: int = 60
    train_interval: float = 0.0      # meters along the path; 0 derives it from n_train
    n_query: int = 20
    ellipse_frac: tuple = (0.3, 0.3)
    height: float = 1.5
    target_height: float = 0.6
    max_query_rot_deg: float = 20.0
    max_query_trans_frac: float = 0.2    # of the submap cube side
    cube_frac: float = 0.4               # cube side as a fraction of the room diagonal
    width: int = 80
    height_px: int = 60
    hfov_deg: float = 70.0
    min_instances: int = 3
    min_pixels: int = 20
    seed: int = 0

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.width, self.height_px, self.hfov_deg)


@dataclass
class GaussianPrimitive:
    mean: np.ndarray
    log_scale: np.ndarray
    quat: np.ndarray
    opacity: float
    color: np.ndarray
    instance_id: int
    class_id: int


@dataclass(eq=False)
class Scene:
    splats: Splats
    class_ids: np.ndarray
    n_classes: int
    bounds: np.ndarray               # (2, 3) min / max corners
    seed: int
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.splats)

    @property
    def n_instances(self) -> int:
        return int(self.splats.instance_ids.max()) + 1 if len(self) else 0

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.bounds[1] - self.bounds[0]))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.bounds[0] + self.bounds[1])

    def primitive(self, i: int) -> GaussianPrimitive:
        s = self.splats
        return GaussianPrimitive(s.means[i], s.log_scales[i], s.quats[i], float(s.opacity[i]),
                                 s.colors[i], int(s.instance_ids[i]), int(self.class_ids[i]))

    def instance_classes(self) -> np.ndarray:
        out = np.zeros(self.n_instances, dtype=np.int64)
        out[self.splats.instance_ids] = self.class_ids
        return out

    def equals(self, other: "Scene") -> bool:
        a, b = self.splats, other.splats
        return (all(np.array_equal(getattr(a, k), getattr(b, k))
                    for k in ("means", "log_scales", "quats", "opacity", "colors", "instance_ids"))
                and np.array_equal(self.class_ids, other.class_ids)
                and self.n_classes == other.n_classes
                and np.array_equal(self.bounds, other.bounds) and self.seed == other.seed)


@dataclass(eq=False)
class Submap:
    id: int
    center: np.ndarray
    side: float
    reference_pose: PoseSE3
    members: np.ndarray
    train_index: int = -1

    def __eq__(self, other):
        return (self.id == other.id and np.array_equal(self.center, other.center)
                and self.side == other.side and self.reference_pose == other.reference_pose
                and np.array_equal(self.members, other.members)
                and self.train_index == other.train_index)


@dataclass(eq=False)
class DatasetSplit:
    intr: CameraIntrinsics
    train_poses: list
    query_poses: list
    train_frames: list = field(default_factory=list)
    query_frames: list = field(default_factory=list)
    interval: float = 0.0
    query_base: list = field(default_factory=list)


@dataclass(eq=False)
class Dataset:
    scene: Scene
    split: DatasetSplit
    submaps: list
    traj_config: TrajectoryConfig


_MAX_OBJECT_EXTENT = 0.9


def _class_palette(n_classes: int, rng: np.random.Generator) -> np.ndarray:
    # Evenly spaced hues with random saturation/value keep classes apart in color.
    hues = (np.arange(n_classes) / n_classes + rng.uniform(0, 1)) % 1.0
    rng.shuffle(hues)
    sat = rng.uniform(0.5, 0.9, n_classes)
    val = rng.uniform(0.55, 0.95, n_classes)
    return np.array([_hsv_to_rgb(h, s, v) for h, s, v in zip(hues, sat, val)])


def _hsv_to_rgb(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _plane_quat(normal_axis: int) -> np.ndarray:
    # Flat splats have their thin axis along local z; rotate z onto the plane normal.
    if normal_axis == 2:
        return np.array([1.0, 0.0, 0.0, 0.0])
    if normal_axis == 0:
        return np.array([np.cos(np.pi / 4), 0.0, np.sin(np.pi / 4), 0.0])
    return np.array([np.cos(np.pi / 4), -np.sin(np.pi / 4), 0.0, 0.0])


def generate_scene(config: SceneConfig | None = None, seed: int | None = None) -> Scene:
    """Build a room with shell instances and ``config.n_objects`` object clusters."""
    config = config or SceneConfig()
    if seed is not None:
        config = SceneConfig(**{**asdict(config), "seed": seed})
    config.validate()
    rng = np.random.default_rng(config.seed)
    room = np.asarray(config.room, dtype=np.float64)
    palette = _class_palette(config.n_classes, rng)
    # Per-class size distribution: base extent and aspect.
    class_extent = rng.uniform(0.35, _MAX_OBJECT_EXTENT, config.n_classes)
    class_aspect = rng.uniform(0.5, 1.6, (config.n_classes, 3))

    means, scales, quats, opac, colors, inst, cls = [], [], [], [], [], [], []
    instance = 0

    def add(m, s, q, o, c, k):
        nonlocal instance
        means.append(m)
        scales.append(s)
        quats.append(q)
        opac.append(o)
        colors.append(c)
        inst.append(np.full(len(m), instance))
        cls.append(np.full(len(m), k))
        instance += 1

    # Shell: floor, ceiling, four walls. Each surface is its own instance.
    tile = config.tile
    surfaces = [(2, 0.0, FLOOR_CLASS), (2, room[2], FLOOR_CLASS),
                (0, 0.0, WALL_CLASS), (0, room[0], WALL_CLASS),
                (1, 0.0, WALL_CLASS), (1, room[1], WALL_CLASS)]
    for axis, offset, k in surfaces:
        a, b = [i for i in range(3) if i != axis]
        ga = np.arange(tile / 2, room[a], tile)
        gb = np.arange(tile / 2, room[b], tile)
        A, Bg = np.meshgrid(ga, gb, indexing="ij")
        n = A.size
        m = np.zeros((n, 3))
        m[:, a] = A.ravel()
        m[:, b] = Bg.ravel()
        m[:, axis] = offset
        base = np.clip(palette[k] + rng.normal(0, 0.2, 3), 0.05, 0.95)
        # Checker-like modulation gives the flat surfaces some texture.
        checker = ((np.floor(A / tile) + np.floor(Bg / tile)) % 2).ravel()[:, None]
        c = np.clip(base * (0.8 + 0.3 * checker) + rng.normal(0, 0.04, (n, 3)), 0.0, 1.0)
        s = np.log(np.tile([tile * 0.55, tile * 0.55, 0.01], (n, 1)))
        q = np.tile(_plane_quat(axis), (n, 1))
        add(m, s, q, np.full(n, 0.95), c, k)

    # Objects: rejection-sample footprints that avoid each other loosely and
    # keep clear of the camera ellipse band.
    centers = []
    attempts = 0
    while len(centers) < config.n_objects:
        attempts += 1
        if attempts > 10000:
            raise ConfigError("could not place all objects in the room")
        k = int(rng.integers(SHELL_CLASSES, config.n_classes)) if config.n_classes > SHELL_CLASSES else WALL_CLASS
        ext = class_extent[k] * class_aspect[k] * rng.uniform(0.85, 1.15, 3)
        ext = np.minimum(ext, _MAX_OBJECT_EXTENT)
        half = ext / 2
        c = np.array([rng.uniform(half[0] + 0.1, room[0] - half[0] - 0.1),
                      rng.uniform(half[1] + 0.1, room[1] - half[1] - 0.1),
                      half[2] + rng.uniform(0.0, 0.3)])
        r = np.hypot((c[0] - room[0] / 2) / (0.3 * room[0]), (c[1] - room[1] / 2) / (0.3 * room[1]))
        if abs(r - 1.0) < 0.4:
            continue
        if any(np.linalg.norm(c[:2] - o[:2]) < 0.5 for o in centers):
            continue
        centers.append(c)
        n = int(rng.integers(config.prims_per_object[0], config.prims_per_object[1] + 1))
        m = c + rng.uniform(-1, 1, (n, 3)) * half * 0.8
        s = np.log(np.clip(rng.uniform(0.5, 1.0, (n, 3)) * half.mean() * 0.3, 0.02, None))
        inst_color = np.clip(palette[k] + rng.normal(0, 0.08, 3), 0.0, 1.0)
        col = np.clip(inst_color + rng.normal(0, 0.05, (n, 3)), 0.0, 1.0)
        add(m, s, _random_quats(rng, n), rng.uniform(0.7, 0.95, n), col, k)

    splats = Splats(np.concatenate(means), np.concatenate(scales), np.concatenate(quats),
                    np.concatenate(opac), np.concatenate(colors),
                    np.concatenate(inst).astype(np.int64))
    bounds = np.stack([np.zeros(3), room])
    return Scene(splats, np.concatenate(cls).astype(np.int64), config.n_classes, bounds,
                 config.seed, asdict(config))


# ---------------------------------------------------------------- trajectories

def _ellipse_path(scene: Scene, cfg: TrajectoryConfig, n_dense: int = 20000):
    ctr = scene.center
    a = cfg.ellipse_frac[0] * (scene.bounds[1, 0] - scene.bounds[0, 0])
    b = cfg.ellipse_frac[1] * (scene.bounds[1, 1] - scene.bounds[0, 1])
    th = np.linspace(0.0, 2 * np.pi, n_dense + 1)
    pts = np.stack([ctr[0] + a * np.cos(th), ctr[1] + b * np.sin(th), np.full_like(th, cfg.height)], 1)
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    return th, arc, (ctr, a, b)


def _path_pose(scene, cfg, theta, geom) -> PoseSE3:
    ctr, a, b = geom
    eye = np.array([ctr[0] + a * np.cos(theta), ctr[1] + b * np.sin(theta), cfg.height])
    target = np.array([ctr[0], ctr[1], cfg.target_height])
    return PoseSE3.look_at(eye, target)


def cube_side(scene: Scene, cfg: TrajectoryConfig) -> float:
    return cfg.cube_frac * scene.diagonal


def _inside_room(scene, p, margin=0.15):
    return bool(np.all(p > scene.bounds[0] + margin) and np.all(p < scene.bounds[1] - margin))


def count_visible_instances(frame: Frame, min_pixels: int) -> int:
    ids = frame.id_map[frame.id_map != SENTINEL]
    if ids.size == 0:
        return 0
    return int(np.sum(np.bincount(ids) >= min_pixels))


def sample_trajectories(scene: Scene, cfg: TrajectoryConfig | None = None,
                        seed: int | None = None, render_frames: bool = True) -> DatasetSplit:
    """Training poses along an ellipse looking at the room center, plus perturbed queries."""
    from .renderer import render

    cfg = cfg or TrajectoryConfig()
    if seed is not None:
        cfg = TrajectoryConfig(**{**asdict(cfg), "seed": seed})
    rng = np.random.default_rng(cfg.seed + 7919)
    th, arc, geom = _ellipse_path(scene, cfg)
    length = arc[-1]
    ctr, a, b = geom
    corners = np.array([[ctr[0] - a, ctr[1] - b, cfg.height], [ctr[0] + a, ctr[1] + b, cfg.height]])
    if not (_inside_room(scene, corners[0]) and _inside_room(scene, corners[1])):
        raise ConfigError("camera path leaves the room bounds")
    interval = cfg.train_interval if cfg.train_interval > 0 else length / cfg.n_train
    if interval <= 0:
        raise ConfigError("train_interval must be positive")
    s_train = np.arange(0.0, length - 1e-9, interval)
    intr = cfg.intrinsics()
    train = [_path_pose(scene, cfg, np.interp(s, arc, th), geom) for s in s_train]

    L = cube_side(scene, cfg)
    max_rot = np.radians(cfg.max_query_rot_deg)
    max_t = cfg.max_query_trans_frac * L
    queries, bases, qframes = [], [], []
    attempts = 0
    while len(queries) < cfg.n_query:
        attempts += 1
        if attempts > 200 * max(cfg.n_query, 1):
            raise ConfigError("could not sample query poses that see enough instances")
        base = int(rng.integers(len(train)))
        P = train[base]
        R = random_rotation(rng, max_rot) @ P.rotation
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        c = P.center + d * rng.uniform(0.0, max_t)
        if not _inside_room(scene, c):
            continue
        pose = PoseSE3.from_camera_center(R, c)
        if render_frames or cfg.min_instances > 0:
            f = _quantize(render(scene.splats, pose, intr))
            if count_visible_instances(f, cfg.min_pixels) < cfg.min_instances:
                continue
            qframes.append(f)
        queries.append(pose)
        bases.append(base)

    tframes = [_quantize(render(scene.splats, p, intr)) for p in train] if render_frames else []
    if render_frames:
        for i, f in enumerate(tframes):
            if count_visible_instances(f, cfg.min_pixels) < cfg.min_instances:
                raise ConfigError(f"training pose {i} sees fewer than {cfg.min_instances} instances")
    return DatasetSplit(intr, train, queries, tframes, qframes if render_frames else [],
                        float(interval), bases)


def _quantize(frame: Frame) -> Frame:
    """Snap RGB to 8-bit levels so frames survive PNG storage bit-exactly."""
    rgb = (np.round(np.clip(frame.rgb, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)
    return Frame(rgb, frame.id_map.astype(np.int64), frame.alpha, frame.depth)


# ---------------------------------------------------------------- submaps

def submap_members(scene: Scene, center, side: float) -> np.ndarray:
    lo = np.asarray(center) - side / 2
    hi = np.asarray(center) + side / 2
    m = scene.splats.means
    inside = np.all((m >= lo) & (m < hi), axis=1)
    return np.flatnonzero(inside)


def partition_submaps(scene: Scene, train_poses, interval: int, side: float,
                      min_instances: int = 3) -> list[Submap]:
    """Cubes of side ``side`` centered on every ``interval``-th training camera."""
    if interval < 1:
        raise ConfigError("submap interval must be >= 1")
    submaps = []
    for ti in range(0, len(train_poses), interval):
        pose = train_poses[ti]
        center = pose.center
        members = submap_members(scene, center, side)
        n_inst = len(np.unique(scene.splats.instance_ids[members]))
        if n_inst < min_instances:
            log.warning("dropping submap at training pose %d: only %d instances", ti, n_inst)
            continue
        submaps.append(Submap(len(submaps), center, float(side), pose, members, ti))
    if not submaps:
        raise DataError("scene too sparse: no submap has enough instances")
    return submaps


def build_dataset(scene_cfg: SceneConfig | None = None, traj_cfg: TrajectoryConfig | None = None,
                  submap_interval: int = 3) -> Dataset:
    scene_cfg = scene_cfg or SceneConfig()
    traj_cfg = traj_cfg or TrajectoryConfig()
    scene = generate_scene(scene_cfg)
    split = sample_trajectories(scene, traj_cfg)
    submaps = partition_submaps(scene, split.train_poses, submap_interval, cube_side(scene, traj_cfg),
                                traj_cfg.min_instances)
    return Dataset(scene, split, submaps, traj_cfg)


# ---------------------------------------------------------------- serialization

def _scene_to_json(scene: Scene) -> dict:
    s = scene.splats
    return {"version": FORMAT_VERSION, "seed": scene.seed, "n_classes": scene.n_classes,
            "bounds": scene.bounds.tolist(), "config": scene.config,
            "gaussians": {"means": s.means.tolist(), "log_scales": s.log_scales.tolist(),
                          "quats": s.quats.tolist(), "opacity": s.opacity.tolist(),
                          "colors": s.colors.tolist(), "instance_ids": s.instance_ids.tolist(),
                          "class_ids": scene.class_ids.tolist()}}


def _require(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise DataError(f"{where}: missing field {key!r}")
    return d[key]


def _array(d, key, where, shape_tail=(), dtype=np.float64, shape=None):
    try:
        arr = np.asarray(_require(d, key, where), dtype=dtype)
    except (TypeError, ValueError) as exc:
        raise DataError(f"{where}: field {key!r} is malformed ({exc})") from None
    if arr.ndim == 0 or (arr.shape if shape else arr.shape[1:]) != tuple(shape or shape_tail):
        raise DataError(f"{where}: field {key!r} has shape {arr.shape}")
    return arr


def _check_version(d, where):
    v = _require(d, "version", where)
    if v != FORMAT_VERSION:
        raise DataError(f"{where}: version {v!r} does not match supported version {FORMAT_VERSION}")


def _scene_from_json(d: dict, where="scene.json") -> Scene:
    _check_version(d, where)
    g = _require(d, "gaussians", where)
    splats = Splats(_array(g, "means", where, (3,)), _array(g, "log_scales", where, (3,)),
                    _array(g, "quats", where, (4,)), _array(g, "opacity", where),
                    _array(g, "colors", where, (3,)), _array(g, "instance_ids", where, dtype=np.int64))
    cls = _array(g, "class_ids", where, dtype=np.int64)
    n = len(splats.means)
    for name in ("log_scales", "quats", "opacity", "colors", "instance_ids"):
        if len(getattr(splats, name)) != n:
            raise DataError(f"{where}: field {name!r} has {len(getattr(splats, name))} rows, expected {n}")
    return Scene(splats, cls, int(_require(d, "n_classes", where)),
                 _array(d, "bounds", where, shape=(2, 3)), int(_require(d, "seed", where)),
                 _require(d, "config", where))


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"missing file {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: truncated or corrupt JSON ({exc})") from None


def write_id_map(path: Path, id_map: np.ndarray):
    h, w = id_map.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(id_map, dtype="<u2").tobytes())


def read_id_map(path: Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise DataError(f"{path}: truncated id map header")
    w, h = struct.unpack("<II", blob[:8])
    if len(blob) != 8 + 2 * w * h:
        raise DataError(f"{path}: expected {w}x{h} id map, file has {len(blob) - 8} payload bytes")
    return np.frombuffer(blob[8:], dtype="<u2").reshape(h, w).astype(np.int64)


def _write_frame(root: Path, split: str, i: int, frame: Frame, pose: PoseSE3):
    d = root / "frames" / split
    d.mkdir(parents=True, exist_ok=True)
    rgb8 = np.round(np.clip(frame.rgb, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(rgb8, "RGB").save(d / f"{i}.rgb.png", optimize=False)
    write_id_map(d / f"{i}.id.u16", frame.id_map)
    _write_json(d / f"{i}.pose.json", {"version": FORMAT_VERSION, "pose": pose.to_list()})


def read_frame(root: Path, split: str, i: int) -> tuple[Frame, PoseSE3]:
    d = Path(root) / "frames" / split
    try:
        with Image.open(d / f"{i}.rgb.png") as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / np.float32(255.0)
    except FileNotFoundError:
        raise DataError(f"missing frame {split}/{i}") from None
    ids = read_id_map(d / f"{i}.id.u16")
    pj = _read_json(d / f"{i}.pose.json")
    _check_version(pj, f"{split}/{i}.pose.json")
    pose = PoseSE3.from_list(_require(pj, "pose", f"{split}/{i}.pose.json"))
    rgb = (np.round(rgb * 255.0) / 255.0).astype(np.float32)
    alpha = np.full(ids.shape, np.nan, dtype=np.float32)
    return Frame(rgb, ids, alpha, np.full(ids.shape, np.nan, dtype=np.float32)), pose


def save_dataset(path, ds: Dataset) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    _write_json(root / "scene.json", _scene_to_json(ds.scene))
    _write_json(root / "submaps.json", {
        "version": FORMAT_VERSION,
        "submaps": [{"id": s.id, "center": s.center.tolist(), "side": s.side,
                     "reference_pose": s.reference_pose.to_list(), "train_index": s.train_index,
                     "members": s.members.tolist()} for s in ds.submaps]})
    sp = ds.split
    _write_json(root / "trajectory.json", {
        "version": FORMAT_VERSION, "intrinsics": sp.intr.to_dict(), "interval": sp.interval,
        "config": asdict(ds.traj_config),
        "train": [p.to_list() for p in sp.train_poses],
        "query": [p.to_list() for p in sp.query_poses],
        "query_base": list(sp.query_base)})
    for i, (f, p) in enumerate(zip(sp.train_frames, sp.train_poses)):
        _write_frame(root, "train", i, f, p)
    for i, (f, p) in enumerate(zip(sp.query_frames, sp.query_poses)):
        _write_frame(root, "query", i, f, p)


def load_dataset(path, load_frames: bool = True) -> Dataset:
    root = Path(path)
    scene = _scene_from_json(_read_json(root / "scene.json"))
    sj = _read_json(root / "submaps.json")
    _check_version(sj, "submaps.json")
    submaps = []
    for k, s in enumerate(_require(sj, "submaps", "submaps.json")):
        where = f"submaps.json[{k}]"
        submaps.append(Submap(int(_require(s, "id", where)), _array(s, "center", where, shape=(3,)),
                              float(_require(s, "side", where)),
                              PoseSE3.from_list(_require(s, "reference_pose", where)),
                              _array(s, "members", where, dtype=np.int64),
                              int(s.get("train_index", -1))))
    tj = _read_json(root / "trajectory.json")
    _check_version(tj, "trajectory.json")
    intr_d = _require(tj, "intrinsics", "trajectory.json")
    intr = CameraIntrinsics(**intr_d)
    cfg_d = _require(tj, "config", "trajectory.json")
    cfg = TrajectoryConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg_d.items()})
    train = [PoseSE3.from_list(p) for p in _require(tj, "train", "trajectory.json")]
    query = [PoseSE3.from_list(p) for p in _require(tj, "query", "trajectory.json")]
    split = DatasetSplit(intr, train, query, interval=float(_require(tj, "interval", "trajectory.json")),
                         query_base=list(tj.get("query_base", [])))
    if load_frames:
        missing = []
        for name, poses, frames in (("train", train, split.train_frames),
                                    ("query", query, split.query_frames)):
            for i in range(len(poses)):
                stem = root / "frames" / name / str(i)
                if not all(Path(f"{stem}.{ext}").is_file() for ext in ("rgb.png", "id.u16", "pose.json")):
                    missing.append(f"{name}/{i}")
                elif not missing:
                    frames.append(read_frame(root, name, i)[0])
        if missing:
            raise DataError(f"missing frames: {', '.join(missing)}")
    return Dataset(scene, split, submaps, cfg)
