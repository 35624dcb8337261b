"""Fine stage: render-and-compare pose refinement.

The objective mixes a photometric term and a keypoint reprojection term::

    L = lam * L_match + (1 - lam) * L_pixel

``L_pixel`` is the mean squared RGB difference between the query and the
rendering at the current pose. ``L_match`` is the mean squared pixel distance
between matched query keypoints and the rendered keypoints; inside the
objective it is divided by ``fx * fy`` (image-plane units) so both terms have
comparable magnitude at the default ``lam``. A rendered
keypoint moves with the pose through the reprojection of its anchor splat
(the primitive contributing most at that pixel), offset so that the term is
exact at the moment the matches were computed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import NumericalError
from .geom import CameraIntrinsics, PoseSE3, perturb_left, point_twist_jacobian, projection_jacobian
from .renderer import Frame, RenderState, Splats, pixel_loss, psnr, render, render_pose_grad

log = logging.getLogger(__name__)

PATCH = 11
MAX_CORNERS = 256
NMS_RADIUS = 5
MIN_NCC = 0.6
RATIO = 0.9
MIN_MATCHES = 4
OUTLIER_FLOOR_PX = 3.0


@dataclass
class MatchSet:
    xq: np.ndarray                    # (K, 2) query keypoints, px
    xr: np.ndarray                    # (K, 2) rendered keypoints, px
    anchor: np.ndarray                # (K,) primitive index dominating at xr
    offset: np.ndarray | None = None  # (K, 2) xr minus anchor projection at match time

    def __len__(self):
        return len(self.anchor)

    @property
    def insufficient(self) -> bool:
        return len(self) < MIN_MATCHES

    @classmethod
    def empty(cls) -> "MatchSet":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0, dtype=np.int64))


@dataclass
class RefineConfig:
    lam: float = 0.5
    max_iterations: int = 200
    lr: float = 2e-2
    lr_decay: float = 0.5
    lr_decay_every: int = 50
    tol: float = 1e-10
    rematch_every: int = 10
    match_scale: float | None = None   # None: 1 / (fx * fy)

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must be in [0, 1], got {self.lam}")


@dataclass
class TraceEntry:
    pose: PoseSE3
    loss: float
    loss_pixel: float
    loss_match: float
    n_matches: int


@dataclass
class RefinementTrace:
    entries: list = field(default_factory=list)
    final_pose: PoseSE3 | None = None
    final_psnr: float = float("nan")
    aborted: str | None = None

    def __len__(self):
        return len(self.entries)

    def best_so_far(self) -> np.ndarray:
        return np.minimum.accumulate([e.loss_pixel for e in self.entries])


# ---------------------------------------------------------------- matching

def _gray(rgb):
    return np.asarray(rgb, dtype=np.float64).mean(axis=2)


def detect_corners(rgb, max_corners: int = MAX_CORNERS, radius: int = NMS_RADIUS) -> np.ndarray:
    """Shi-Tomasi corners with non-max suppression; returns (K, 2) integer (u, v)."""
    g = _gray(rgb)
    gx = ndimage.sobel(g, axis=1)
    gy = ndimage.sobel(g, axis=0)
    sxx = ndimage.gaussian_filter(gx * gx, 1.0)
    syy = ndimage.gaussian_filter(gy * gy, 1.0)
    sxy = ndimage.gaussian_filter(gx * gy, 1.0)
    tr = 0.5 * (sxx + syy)
    resp = tr - np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy**2, 0.0))
    half = PATCH // 2
    peak = resp == ndimage.maximum_filter(resp, size=2 * radius + 1, mode="constant", cval=-np.inf)
    peak &= resp > max(1e-6, 1e-3 * resp.max())
    peak[:half, :] = peak[-half:, :] = False
    peak[:, :half] = peak[:, -half:] = False
    rows, cols = np.nonzero(peak)
    order = np.lexsort((cols, rows, -resp[rows, cols]))[:max_corners]
    return np.stack([cols[order], rows[order]], axis=1).astype(np.int64)


def _patches(rgb, pts):
    half = PATCH // 2
    img = np.asarray(rgb, dtype=np.float64)
    out = np.stack([img[v - half:v + half + 1, u - half:u + half + 1].ravel() for u, v in pts]) \
        if len(pts) else np.zeros((0, PATCH * PATCH * 3))
    out = out - out.mean(axis=1, keepdims=True)
    n = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.where(n > 1e-9, n, np.inf)


def _subpixel(query_rgb, q, ref_patch):
    """Refine an integer query location by a parabola fit of NCC over a 3x3 neighborhood."""
    H, W = query_rgb.shape[:2]
    half = PATCH // 2
    u, v = q
    if not (half + 1 <= u < W - half - 1 and half + 1 <= v < H - half - 1):
        return q.astype(np.float64)
    pts = [(u + du, v + dv) for dv in (-1, 0, 1) for du in (-1, 0, 1)]
    s = (_patches(query_rgb, pts) @ ref_patch).reshape(3, 3)
    out = np.array([u, v], dtype=np.float64)
    if s[1, 1] > 1.0 - 1e-9:
        return out  # exact correlation; the parabola would only add bias
    for axis, (lo, mid, hi) in ((0, (s[1, 0], s[1, 1], s[1, 2])), (1, (s[0, 1], s[1, 1], s[2, 1]))):
        den = lo - 2 * mid + hi
        if den < 0:
            out[axis] += np.clip(0.5 * (lo - hi) / den, -0.5, 0.5)
    return out


def match_keypoints(query: Frame, rendered: Frame, dominant=None) -> MatchSet:
    """Mutual-nearest NCC matches between query and rendered corners.

    ``dominant`` maps each rendered pixel to its dominant primitive (or -1);
    matches on background pixels are dropped.
    """
    if query.rgb.shape != rendered.rgb.shape:
        raise ValueError("query and rendered images differ in size")
    cq = detect_corners(query.rgb)
    cr = detect_corners(rendered.rgb)
    if len(cq) == 0 or len(cr) == 0:
        return MatchSet.empty()
    pq = _patches(query.rgb, cq)
    pr = _patches(rendered.rgb, cr)
    S = pq @ pr.T
    best_r = np.argmax(S, axis=1)
    best_q = np.argmax(S, axis=0)
    xq, xr, anchors = [], [], []
    for i, j in enumerate(best_r):
        if best_q[j] != i or S[i, j] < MIN_NCC:
            continue
        if S.shape[1] > 1:
            second = np.partition(S[i], -2)[-2]
            if (1.0 - S[i, j]) >= RATIO * (1.0 - second):
                continue
        u, v = cr[j]
        a = -1 if dominant is None else int(dominant[v, u])
        if dominant is not None and a < 0:
            continue
        xq.append(_subpixel(query.rgb, cq[i], pr[j]))
        xr.append(cr[j].astype(np.float64))
        anchors.append(a)
    if not xq:
        return MatchSet.empty()
    xq, xr = np.array(xq), np.array(xr)
    keep = _consistent(xq - xr)
    return MatchSet(xq[keep], xr[keep], np.array(anchors, dtype=np.int64)[keep])


def _consistent(disp) -> np.ndarray:
    """Reject displacements far from the median (3 robust sigmas, at least OUTLIER_FLOOR_PX)."""
    if len(disp) < MIN_MATCHES:
        return np.ones(len(disp), dtype=bool)
    dev = np.linalg.norm(disp - np.median(disp, axis=0), axis=1)
    thresh = max(OUTLIER_FLOOR_PX, 3.0 * 1.4826 * np.median(dev))
    return dev <= thresh


def freeze_matches(matches: MatchSet, splats: Splats, pose: PoseSE3, intr: CameraIntrinsics) -> MatchSet:
    """Attach reprojection offsets at ``pose``; drops matches whose anchor is behind the camera."""
    if len(matches) == 0:
        return MatchSet(matches.xq, matches.xr, matches.anchor, np.zeros((0, 2)))
    t = pose.apply(splats.means[matches.anchor])
    ok = t[:, 2] > 1e-6
    t = t[ok]
    proj = np.stack([intr.fx * t[:, 0] / t[:, 2] + intr.cx, intr.fy * t[:, 1] / t[:, 2] + intr.cy], 1)
    return MatchSet(matches.xq[ok], matches.xr[ok], matches.anchor[ok], matches.xr[ok] - proj)


# ---------------------------------------------------------------- loss

def match_loss(matches: MatchSet, splats: Splats, pose: PoseSE3, intr: CameraIntrinsics):
    """Mean squared keypoint distance and its twist gradient."""
    if len(matches) == 0:
        return 0.0, np.zeros(6)
    t = pose.apply(splats.means[matches.anchor])
    if np.any(t[:, 2] <= 1e-6):
        raise NumericalError("anchor splat moved behind the camera")
    proj = np.stack([intr.fx * t[:, 0] / t[:, 2] + intr.cx, intr.fy * t[:, 1] / t[:, 2] + intr.cy], 1)
    r = matches.xq - (proj + matches.offset)
    K = len(matches)
    L = float(np.sum(r * r) / K)
    J = projection_jacobian(intr, t) @ point_twist_jacobian(t)          # K, 2, 6
    grad = -2.0 * np.einsum("ki,kij->j", r, J) / K
    return L, grad


def refinement_loss(query: Frame, rendered: Frame, state: RenderState, matches: MatchSet,
                    pose: PoseSE3, splats: Splats, lam: float, match_scale: float | None = None):
    """Returns ``(L, L_pixel, L_match, dL/dxi)``; matches must be frozen at match time.

    ``L_match`` is reported in px^2; the objective weights it by ``match_scale``.
    """
    intr = state.intr
    scale = 1.0 / (intr.fx * intr.fy) if match_scale is None else match_scale
    Lp, dimg = pixel_loss(rendered.rgb, query.rgb)
    gp = render_pose_grad(splats, pose, intr, dimg, state=state)
    if len(matches) < MIN_MATCHES or matches.offset is None:
        lam_eff = 0.0
        Lm, gm = (match_loss(matches, splats, pose, intr) if matches.offset is not None
                  else (0.0, np.zeros(6)))
    else:
        lam_eff = lam
        Lm, gm = match_loss(matches, splats, pose, intr)
    w = lam_eff * scale
    L = w * Lm + (1.0 - lam_eff) * Lp
    return L, Lp, Lm, w * gm + (1.0 - lam_eff) * gp


# ---------------------------------------------------------------- optimization

def refine_pose(splats: Splats, query: Frame, init: PoseSE3, intr: CameraIntrinsics,
                cfg: RefineConfig | None = None, on_iteration=None) -> RefinementTrace:
    """Adam on a left twist, re-centered on the current pose every iteration.

    The returned pose is the one with the lowest photometric loss seen; the
    combined loss is not comparable across re-matching events.
    """
    cfg = cfg or RefineConfig()
    trace = RefinementTrace()
    pose = init
    m = np.zeros(6)
    v = np.zeros(6)
    matches = MatchSet.empty()
    prev = None
    best = (np.inf, init)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for it in range(cfg.max_iterations + 1):
        rendered, state = render(splats, pose, intr, return_state=True)
        rematched = it % cfg.rematch_every == 0
        if rematched:
            matches = freeze_matches(match_keypoints(query, rendered, state.dominant), splats, pose, intr)
        try:
            L, Lp, Lm, grad = refinement_loss(query, rendered, state, matches, pose, splats, cfg.lam,
                                              cfg.match_scale)
        except NumericalError as exc:
            L, grad, reason = np.nan, None, str(exc)
        else:
            reason = "non-finite loss"
        if not (np.isfinite(L) and np.all(np.isfinite(grad))):
            trace.aborted = f"{reason} at iteration {it}"
            log.warning(trace.aborted)
            break
        trace.entries.append(TraceEntry(pose, L, Lp, Lm, len(matches)))
        if on_iteration is not None:
            on_iteration(it, trace.entries[-1])
        if Lp < best[0]:
            best = (Lp, pose)
        if it == cfg.max_iterations:
            break
        if prev is not None and not rematched and abs(prev - L) < cfg.tol:
            break
        prev = L
        lr = cfg.lr * cfg.lr_decay ** (it // cfg.lr_decay_every)
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        step = -lr * (m / (1 - b1 ** (it + 1))) / (np.sqrt(v / (1 - b2 ** (it + 1))) + eps)
        pose = perturb_left(step, pose)
    trace.final_pose = best[1]
    trace.final_psnr = psnr(render(splats, trace.final_pose, intr).rgb, query.rgb)
    if trace.aborted:
        raise RefinementAborted(trace.aborted, trace)
    return trace


class RefinementAborted(NumericalError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def select_final(traces) -> int:
    """Index of the trace whose final render has the highest PSNR (lower index on ties)."""
    if not traces:
        raise ValueError("no refinement traces to select from")
    scores = [t.final_psnr for t in traces]
    return int(np.argmax(scores))
