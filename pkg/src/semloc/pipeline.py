"""End-to-end localization and evaluation.

A query goes through descriptor retrieval, the PSNR gate, per-candidate
refinement and final selection. :func:`evaluate` runs every query of a dataset
and produces an :class:`EvalReport` with per-query rows and median errors.

Configuration lives in a flat ``key = value`` text file whose keys are
``<section>.<field>`` for the sections ``scene``, ``traj``, ``train``,
``refine`` and ``eval`` (see :func:`default_config_text`).
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import descriptor as D
from . import retrieval as RT
from .errors import ConfigError, DataError, NumericalError
from .geom import PoseSE3, pose_error, so3_exp
from .nn import ParamStore
from .refine import RefineConfig, RefinementAborted, refine_pose, select_final
from .renderer import psnr, render
from .scene import Dataset, SceneConfig, TrajectoryConfig, build_dataset

log = logging.getLogger(__name__)


@dataclass
class EvalConfig:
    k: int = 5
    submap_interval: int = 3
    epsilon_db: float | None = None     # None: use the value calibrated at training time
    coarse_only: bool = False
    fail_trans_frac: float = 0.01       # success needs trans error below this fraction of the diagonal
    fail_rot_deg: float = 2.0           # ... and rotation error below this


@dataclass
class Config:
    scene: SceneConfig = field(default_factory=SceneConfig)
    traj: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    train: RT.TrainConfig = field(default_factory=RT.TrainConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTIONS = ("scene", "traj", "train", "refine", "eval")


def _parse_value(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",")]
            if len(parts) != len(default):
                raise ValueError("wrong number of components")
            return tuple(type(d)(p) for d, p in zip(default, parts))
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            if text.lower() in ("none", ""):
                return None
            return float(text)
        return text
    except (ValueError, TypeError):
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_config(text: str, base: Config | None = None) -> Config:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    cfg = base or Config()
    updates: dict[str, dict] = {s: {} for s in _SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in updates:
            raise ConfigError(f"line {lineno}: unknown section in key {key!r}")
        obj = getattr(cfg, section)
        known = {f.name: f for f in fields(obj)}
        if name not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[section][name] = _parse_value(value, getattr(obj, name), key)
    out = Config(**{s: replace(getattr(cfg, s), **updates[s]) for s in _SECTIONS})
    out.scene.validate()
    out.train.validate()
    if out.eval.k < 1:
        raise ConfigError("eval.k must be >= 1")
    if out.eval.submap_interval < 1:
        raise ConfigError("eval.submap_interval must be >= 1")
    return out


def load_config(path) -> Config:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def _format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def config_text(cfg: Config) -> str:
    lines = []
    for s in _SECTIONS:
        obj = getattr(cfg, s)
        lines.append(f"# {s}")
        lines += [f"{s}.{f.name} = {_format_value(getattr(obj, f.name))}" for f in fields(obj)]
        lines.append("")
    return "\n".join(lines)


def default_config_text() -> str:
    return config_text(Config())


# ---------------------------------------------------------------- records

@dataclass
class EvalRecord:
    query: int
    retrieval_rank: int          # 1-based rank of the true-nearest submap in the full ranking
    n_candidates: int            # survivors of the gate (or 1 with an external initializer)
    selected_submap: int         # -1 with an external initializer
    gate_psnr: float
    coarse_trans_cm: float
    coarse_rot_deg: float
    final_trans_cm: float
    final_rot_deg: float
    final_psnr: float
    aborted: int                 # refinements that stopped on a numerical failure
    failed: bool


CSV_FIELDS = [f.name for f in fields(EvalRecord)]


@dataclass
class EvalReport:
    records: list
    mode: str
    diagonal: float

    def _col(self, name):
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    @property
    def aggregates(self) -> dict:
        ranks = self._col("retrieval_rank")
        ct, cr = np.median(self._col("coarse_trans_cm")), np.median(self._col("coarse_rot_deg"))
        ft, fr = np.median(self._col("final_trans_cm")), np.median(self._col("final_rot_deg"))
        return {
            "queries": len(self.records),
            "median_coarse_trans_cm": float(ct),
            "median_coarse_rot_deg": float(cr),
            "median_trans_cm": float(ft),
            "median_rot_deg": float(fr),
            "top1_recall": float(np.mean(ranks <= 1)) if len(ranks) else float("nan"),
            "top5_recall": float(np.mean(ranks <= 5)) if len(ranks) else float("nan"),
            "improvement_trans": _ratio(ct, ft),
            "improvement_rot": _ratio(cr, fr),
            "failure_rate": float(np.mean(self._col("failed"))) if self.records else float("nan"),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.records:
            w.writerow([_format_cell(getattr(r, k)) for k in CSV_FIELDS])
        return buf.getvalue()

    def summary(self) -> str:
        a = self.aggregates
        lines = [f"mode: {self.mode}", f"queries: {a['queries']}"]
        lines += [f"{k}: {_format_cell(v)}" for k, v in a.items() if k != "queries"]
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.to_csv())
        (out / "summary.txt").write_text(self.summary())


def _ratio(coarse, final) -> float:
    if final > 0:
        return float(coarse / final)
    return float("inf") if coarse > 0 else 1.0


def _format_cell(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_report_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


# ---------------------------------------------------------------- localization

@dataclass
class Model:
    """Trained parameters plus the per-dataset quantities localization needs."""
    store: ParamStore
    epsilon_db: float
    submap_desc: np.ndarray

    @classmethod
    def prepare(cls, store: ParamStore, epsilon_db: float, dataset: Dataset) -> "Model":
        return cls(store, float(epsilon_db), RT.submap_descriptors(store, dataset, dataset.submaps))


@dataclass
class Localization:
    pose: PoseSE3
    coarse: RT.RetrievalCandidate       # highest gate-PSNR survivor
    candidates: list
    traces: list
    ranking: list
    selected: int                       # index into candidates
    aborted: int = 0

    @property
    def final_psnr(self) -> float:
        return self.traces[self.selected].final_psnr if self.traces else self.coarse.psnr


def _refine(dataset, frame, init, cfg: Config):
    """Refine from ``init``; an aborted run contributes its best pose so far."""
    try:
        return refine_pose(dataset.scene.splats, frame, init, dataset.split.intr, cfg.refine), False
    except RefinementAborted as exc:
        return exc.trace, True


def localize(model: Model, dataset: Dataset, frame, cfg: Config, query_index: int | None = None,
             init: PoseSE3 | None = None) -> Localization:
    """Coarse retrieval and gating, then refinement of every survivor.

    With ``init`` the retrieval stage is skipped and refinement starts from
    that pose (external-initializer mode).
    """
    where = "" if query_index is None else f"query {query_index}: "
    scene, intr, submaps = dataset.scene, dataset.split.intr, dataset.submaps
    try:
        x = RT.image_inputs(frame, dataset)
    except D.EmptyViewError as exc:
        raise DataError(f"{where}{exc}") from None
    qd = D.describe_image(model.store, x)
    ranking = RT.retrieve_topk(qd, model.submap_desc, submaps, len(submaps))
    if init is not None:
        cands = [RT.RetrievalCandidate(-1, float("nan"), init,
                                       psnr(render(scene.splats, init, intr).rgb, frame.rgb))]
    else:
        eps = model.epsilon_db if cfg.eval.epsilon_db is None else cfg.eval.epsilon_db
        cands = RT.psnr_gate(ranking[:cfg.eval.k], frame, scene, intr, eps)
    ci = select_by_psnr([c.psnr for c in cands])
    coarse = cands[ci]
    if cfg.eval.coarse_only:
        return Localization(coarse.pose, coarse, cands, [], ranking, ci)
    traces, aborted = [], 0
    for c in cands:
        try:
            t, bad = _refine(dataset, frame, c.pose, cfg)
        except NumericalError as exc:
            raise NumericalError(f"{where}{exc}") from None
        traces.append(t)
        aborted += bad
    best = select_final(traces)
    return Localization(traces[best].final_pose, coarse, cands, traces, ranking, best, aborted)


def select_by_psnr(scores) -> int:
    """Argmax with ties to the lower index."""
    return int(np.argmax(scores))


def evaluate(dataset: Dataset, model: Model, cfg: Config, init_poses: list | None = None) -> EvalReport:
    """Localize every query and collect per-query errors (failed queries are kept)."""
    sp = dataset.split
    if not sp.query_poses:
        raise DataError("dataset has no query frames")
    if len(sp.query_frames) != len(sp.query_poses):
        missing = list(range(len(sp.query_frames), len(sp.query_poses)))
        raise DataError(f"missing query frames: {missing}")
    if init_poses is not None and len(init_poses) != len(sp.query_poses):
        raise ConfigError(f"{len(init_poses)} initial poses for {len(sp.query_poses)} queries")
    diag = dataset.scene.diagonal
    records = []
    for i, (frame, gt) in enumerate(zip(sp.query_frames, sp.query_poses)):
        init = None if init_poses is None else init_poses[i]
        loc = localize(model, dataset, frame, cfg, query_index=i, init=init)
        true_id = dataset.submaps[RT.nearest_submap(gt.center, dataset.submaps)].id
        rank = 1 + [c.submap_id for c in loc.ranking].index(true_id)
        ct, cr = pose_error(loc.coarse.pose, gt)
        ft, fr = pose_error(loc.pose, gt)
        failed = bool(ft >= cfg.eval.fail_trans_frac * diag or fr >= cfg.eval.fail_rot_deg)
        records.append(EvalRecord(i, rank, len(loc.candidates), loc.candidates[loc.selected].submap_id,
                                  float(loc.coarse.psnr), 100.0 * ct, cr, 100.0 * ft, fr,
                                  float(loc.final_psnr), loc.aborted, failed))
        log.info("query %d: coarse %.1f cm %.2f deg -> final %.2f cm %.3f deg", i,
                 100 * ct, cr, 100 * ft, fr)
    mode = "init-from" if init_poses is not None else ("coarse-only" if cfg.eval.coarse_only else "full")
    return EvalReport(records, mode, diag)


# ---------------------------------------------------------------- initializer files

def perturb_poses(poses, rot_deg: tuple, trans: tuple, seed: int = 0) -> list[PoseSE3]:
    """Random perturbations with rotation angle in ``rot_deg`` (degrees) and
    camera-center offset magnitude in ``trans`` (meters), both as (lo, hi)."""
    rng = np.random.default_rng(seed)
    out = []
    for p in poses:
        angle = np.radians(rng.uniform(*rot_deg))
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        R = so3_exp(axis * angle) @ p.rotation
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        out.append(PoseSE3.from_camera_center(R, p.center + d * rng.uniform(*trans)))
    return out


def save_poses(path, poses) -> None:
    Path(path).write_text(json.dumps({"version": 1, "poses": [p.to_list() for p in poses]}))


def load_poses(path) -> list[PoseSE3]:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read pose file {path}: {exc}") from None
    if not isinstance(d, dict) or "poses" not in d:
        raise DataError(f"{path}: missing field 'poses'")
    try:
        return [PoseSE3.from_list(p) for p in d["poses"]]
    except (ValueError, TypeError) as exc:
        raise DataError(f"{path}: bad pose entry ({exc})") from None


# ---------------------------------------------------------------- convenience

def build(cfg: Config) -> Dataset:
    return build_dataset(cfg.scene, cfg.traj, cfg.eval.submap_interval)


def train(dataset: Dataset, cfg: Config) -> RT.TrainResult:
    return RT.train_retrieval(dataset, dataset.submaps, cfg.train)
