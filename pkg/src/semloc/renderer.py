"""Forward Gaussian splatting and its gradient with respect to a camera twist.

The splats are projected with the local affine (EWA) approximation, sorted
front to back by camera depth (primitive index breaks ties), and
alpha-composited per pixel. Pixel ``(row, col)`` has its center at image
coordinates ``(u, v) = (col, row)``.

The raster loops run through numba. Per-pixel compositing is sequential in
depth order, so results are deterministic. Buffers are float32 by default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import NumericalError
from .geom import CameraIntrinsics, PoseSE3, point_twist_jacobian, skew

SENTINEL = 65535
LOW_PASS = 0.3          # px^2 added to the projected covariance diagonal
ALPHA_MAX = 0.99
CUTOFF = 25.0           # Mahalanobis^2 beyond which a splat is ignored
NEAR = 0.2
JACOBIAN_CLAMP = 1.3   # x/z, y/z clamped to this multiple of the half-FOV tangent inside J
PSNR_CAP = 99.0


@dataclass
class Frame:
    rgb: np.ndarray
    id_map: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray

    @property
    def shape(self):
        return self.rgb.shape[:2]


@dataclass
class Splats:
    """Structure-of-arrays view of the primitives handed to the rasterizer."""
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray
    instance_ids: np.ndarray

    def __len__(self):
        return len(self.means)

    def subset(self, idx) -> "Splats":
        idx = np.asarray(idx)
        return Splats(self.means[idx], self.log_scales[idx], self.quats[idx],
                      self.opacity[idx], self.colors[idx], self.instance_ids[idx])

    def covariances(self) -> np.ndarray:
        R = quat_to_rotmat(self.quats)
        s2 = np.exp(2.0 * self.log_scales)
        return np.einsum("nij,nj,nkj->nik", R, s2, R)

    def check_finite(self):
        for name in ("means", "log_scales", "quats", "opacity", "colors"):
            arr = getattr(self, name)
            flat = arr.reshape(len(arr), -1) if len(arr) else arr
            bad = np.flatnonzero(~np.all(np.isfinite(flat), axis=-1)) if len(arr) else []
            if len(bad):
                raise NumericalError(f"primitive {int(bad[0])} has non-finite {name}")


def quat_to_rotmat(q) -> np.ndarray:
    """Unit quaternions (w, x, y, z), shape (N, 4), to rotation matrices (N, 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


@dataclass
class Projected:
    """Per-primitive screen-space quantities for the visible subset."""
    index: np.ndarray        # original primitive indices, depth-sorted
    t_cam: np.ndarray        # (n, 3) camera-frame means
    cov_cam: np.ndarray      # (n, 3, 3)
    J: np.ndarray            # (n, 2, 3) with clamped view ratios
    ratio: np.ndarray        # (n, 2) clamped x/z, y/z used in J
    free: np.ndarray         # (n, 2) True where the ratio is not clamped
    cov2d: np.ndarray        # (n, 2, 2) including low-pass
    uv: np.ndarray           # (n, 2)
    conic: np.ndarray        # (n, 3) a, b, c of the inverse 2D covariance
    bbox: np.ndarray         # (n, 4) x0, x1, y0, y1 inclusive, clipped


def project_splats(splats: Splats, pose: PoseSE3, intr: CameraIntrinsics) -> Projected:
    splats.check_finite()
    t = splats.means @ pose.rotation.T + pose.translation
    keep = np.flatnonzero(t[:, 2] > NEAR)
    t = t[keep]
    cov = pose.rotation @ splats.covariances()[keep] @ pose.rotation.T
    J, ratio, free = _clamped_jacobian(intr, t)
    cov2d = J @ cov @ J.transpose(0, 2, 1)
    cov2d[:, 0, 0] += LOW_PASS
    cov2d[:, 1, 1] += LOW_PASS
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    uv = np.stack([intr.fx * t[:, 0] / t[:, 2] + intr.cx, intr.fy * t[:, 1] / t[:, 2] + intr.cy], axis=1)
    rx = np.sqrt(CUTOFF * cov2d[:, 0, 0])
    ry = np.sqrt(CUTOFF * cov2d[:, 1, 1])
    x0 = np.maximum(np.ceil(uv[:, 0] - rx), 0)
    x1 = np.minimum(np.floor(uv[:, 0] + rx), intr.width - 1)
    y0 = np.maximum(np.ceil(uv[:, 1] - ry), 0)
    y1 = np.minimum(np.floor(uv[:, 1] + ry), intr.height - 1)
    on_screen = (x0 <= x1) & (y0 <= y1)
    order = np.lexsort((keep, t[:, 2]))
    order = order[on_screen[order]]
    bbox = np.stack([x0, x1, y0, y1], axis=1)[order].astype(np.int64)
    return Projected(keep[order], t[order], cov[order], J[order], ratio[order], free[order],
                     cov2d[order], uv[order], conic[order], bbox)


def _clamped_jacobian(intr: CameraIntrinsics, t):
    """Projection Jacobian evaluated with view ratios clamped to a guard band.

    Far off-axis splats would otherwise get unbounded footprints from the
    linearization. Clamping keeps the image continuous in the pose, unlike
    culling on the mean.
    """
    lim = JACOBIAN_CLAMP * np.array([max(intr.cx, intr.width - intr.cx) / intr.fx,
                                     max(intr.cy, intr.height - intr.cy) / intr.fy])
    raw = t[:, :2] / t[:, 2:3]
    ratio = np.clip(raw, -lim, lim)
    free = np.abs(raw) < lim
    z = t[:, 2]
    J = np.zeros((len(t), 2, 3))
    J[:, 0, 0] = intr.fx / z
    J[:, 0, 2] = -intr.fx * ratio[:, 0] / z
    J[:, 1, 1] = intr.fy / z
    J[:, 1, 2] = -intr.fy * ratio[:, 1] / z
    return J, ratio, free


@numba.njit(cache=True)
def _forward_kernel(uv, conic, opac, color, inst, bbox, n_inst, H, W,
                    rgb, T, depth_acc, weight_inst, best_w, best_prim, zs):
    for k in range(uv.shape[0]):
        u = uv[k, 0]
        v = uv[k, 1]
        a = conic[k, 0]
        b = conic[k, 1]
        c = conic[k, 2]
        o = opac[k]
        for y in range(bbox[k, 2], bbox[k, 3] + 1):
            dy = y - v
            for x in range(bbox[k, 0], bbox[k, 1] + 1):
                dx = x - u
                q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                if q > 25.0:
                    continue
                alpha = o * np.exp(-0.5 * q)
                if alpha > 0.99:
                    alpha = 0.99
                w = alpha * T[y, x]
                rgb[y, x, 0] += w * color[k, 0]
                rgb[y, x, 1] += w * color[k, 1]
                rgb[y, x, 2] += w * color[k, 2]
                depth_acc[y, x] += w * zs[k]
                weight_inst[y, x, inst[k]] += w
                if w > best_w[y, x]:
                    best_w[y, x] = w
                    best_prim[y, x] = k
                T[y, x] *= 1.0 - alpha


@numba.njit(cache=True)
def _backward_kernel(uv, conic, opac, color, bbox, T_final, dL_dC,
                     d_uv, d_conic):
    H = T_final.shape[0]
    W = T_final.shape[1]
    T = T_final.astype(np.float64)
    S = np.zeros((H, W, 3))
    for k in range(uv.shape[0] - 1, -1, -1):
        u = uv[k, 0]
        v = uv[k, 1]
        a = conic[k, 0]
        b = conic[k, 1]
        c = conic[k, 2]
        o = opac[k]
        gu = 0.0
        gv = 0.0
        ga = 0.0
        gb = 0.0
        gc = 0.0
        for y in range(bbox[k, 2], bbox[k, 3] + 1):
            dy = y - v
            for x in range(bbox[k, 0], bbox[k, 1] + 1):
                dx = x - u
                q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                if q > 25.0:
                    continue
                g = np.exp(-0.5 * q)
                alpha = o * g
                clamped = alpha > 0.99
                if clamped:
                    alpha = 0.99
                Ti = T[y, x] / (1.0 - alpha)
                dalpha = 0.0
                for ch in range(3):
                    dalpha += dL_dC[y, x, ch] * (color[k, ch] * Ti - S[y, x, ch] / (1.0 - alpha))
                    S[y, x, ch] += color[k, ch] * alpha * Ti
                T[y, x] = Ti
                if clamped:
                    continue
                dg = dalpha * o
                gu += dg * g * (a * dx + b * dy)
                gv += dg * g * (b * dx + c * dy)
                ga += -0.5 * dg * g * dx * dx
                gb += -dg * g * dx * dy
                gc += -0.5 * dg * g * dy * dy
        d_uv[k, 0] = gu
        d_uv[k, 1] = gv
        d_conic[k, 0] = ga
        d_conic[k, 1] = gb
        d_conic[k, 2] = gc


@dataclass
class RenderState:
    """Everything the backward pass needs from a forward render."""
    proj: Projected
    opacity: np.ndarray
    colors: np.ndarray
    T_final: np.ndarray
    dominant: np.ndarray     # (H, W) original primitive index or -1
    intr: CameraIntrinsics


def render(splats: Splats, pose: PoseSE3, intr: CameraIntrinsics, dtype=np.float32,
           return_state: bool = False):
    """Render RGB, instance id, alpha and expected depth at ``pose``."""
    H, W = intr.height, intr.width
    proj = project_splats(splats, pose, intr)
    idx = proj.index
    n_inst = int(splats.instance_ids.max()) + 1 if len(splats) else 1
    opac = splats.opacity[idx].astype(dtype)
    color = splats.colors[idx].astype(dtype)
    inst = splats.instance_ids[idx].astype(np.int64)
    rgb = np.zeros((H, W, 3), dtype=dtype)
    T = np.ones((H, W), dtype=dtype)
    depth_acc = np.zeros((H, W), dtype=dtype)
    weight_inst = np.zeros((H, W, n_inst), dtype=dtype)
    best_w = np.zeros((H, W), dtype=dtype)
    best_prim = np.full((H, W), -1, dtype=np.int64)
    if len(idx):
        _forward_kernel(proj.uv.astype(dtype), proj.conic.astype(dtype), opac, color, inst,
                        proj.bbox, n_inst, H, W, rgb, T, depth_acc, weight_inst, best_w,
                        best_prim, proj.t_cam[:, 2].astype(dtype))
    alpha = 1.0 - T
    # Background competes as one more "instance" carrying the residual transmittance.
    winner = np.argmax(weight_inst, axis=2)
    win_w = np.take_along_axis(weight_inst, winner[..., None], axis=2)[..., 0]
    id_map = np.where(win_w > T, winner, SENTINEL).astype(np.int64)
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = np.where(alpha > 1e-6, depth_acc / alpha, np.inf).astype(dtype)
    frame = Frame(rgb, id_map, alpha.astype(dtype), depth)
    if not return_state:
        return frame
    dominant = np.where(best_prim >= 0, idx[np.maximum(best_prim, 0)] if len(idx) else -1, -1)
    state = RenderState(proj, opac, color, T, dominant, intr)
    return frame, state


def _cov_rotation_grad_batched(M, cov) -> np.ndarray:
    out = np.zeros(3)
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        G = skew(e)
        dcov = np.einsum("ij,njk->nik", G, cov) - np.einsum("nij,jk->nik", cov, G)
        out[k] = np.einsum("nij,nij->", M, dcov)
    return out


def render_pose_grad(splats: Splats, pose: PoseSE3, intr: CameraIntrinsics, dL_dimage,
                     state: RenderState | None = None) -> np.ndarray:
    """Gradient of a scalar image loss with respect to the left twist on ``pose``.

    ``dL_dimage`` is the loss gradient with respect to the rendered RGB buffer.
    The chain runs through both the projected means and the projected 2D
    covariances.
    """
    dL_dimage = np.asarray(dL_dimage)
    if not np.all(np.isfinite(dL_dimage)):
        raise NumericalError("non-finite image gradient")
    if state is None:
        _, state = render(splats, pose, intr, return_state=True)
    proj = state.proj
    n = len(proj.index)
    if n == 0:
        return np.zeros(6)
    d_uv = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    dt = state.colors.dtype
    _backward_kernel(proj.uv.astype(dt), proj.conic.astype(dt), state.opacity, state.colors,
                     proj.bbox, state.T_final, dL_dimage.astype(dt), d_uv, d_conic)
    return _chain_to_twist(proj, intr, d_uv, d_conic)


def _chain_to_twist(proj: Projected, intr: CameraIntrinsics, d_uv, d_conic) -> np.ndarray:
    t = proj.t_cam
    A = np.stack([np.stack([proj.conic[:, 0], proj.conic[:, 1]], -1),
                  np.stack([proj.conic[:, 1], proj.conic[:, 2]], -1)], 1)
    G = np.stack([np.stack([d_conic[:, 0], 0.5 * d_conic[:, 1]], -1),
                  np.stack([0.5 * d_conic[:, 1], d_conic[:, 2]], -1)], 1)
    dS2 = -A @ G @ A
    J = proj.J
    dcov = J.transpose(0, 2, 1) @ dS2 @ J
    dJ = 2.0 * dS2 @ J @ proj.cov_cam
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = intr.fx, intr.fy
    rx, ry = proj.ratio[:, 0], proj.ratio[:, 1]
    fr_x, fr_y = proj.free[:, 0], proj.free[:, 1]
    # the mean projection itself is never clamped
    d_t = np.einsum("ni,nij->nj", d_uv, _mean_jacobian(intr, t))
    # J02 = -fx * rx / z with rx = x / z inside the guard band, constant outside
    d_t[:, 0] += np.where(fr_x, dJ[:, 0, 2] * (-fx / z**2), 0.0)
    d_t[:, 1] += np.where(fr_y, dJ[:, 1, 2] * (-fy / z**2), 0.0)
    d_t[:, 2] += (dJ[:, 0, 0] * (-fx / z**2) + dJ[:, 1, 1] * (-fy / z**2)
                  + dJ[:, 0, 2] * (fx * rx / z**2 + np.where(fr_x, fx * x / z**3, 0.0))
                  + dJ[:, 1, 2] * (fy * ry / z**2 + np.where(fr_y, fy * y / z**3, 0.0)))
    grad = np.einsum("ni,nij->j", d_t, point_twist_jacobian(t))
    grad[3:] += _cov_rotation_grad_batched(dcov, proj.cov_cam)
    return grad


def _mean_jacobian(intr: CameraIntrinsics, t):
    z = t[:, 2]
    J = np.zeros((len(t), 2, 3))
    J[:, 0, 0] = intr.fx / z
    J[:, 0, 2] = -intr.fx * t[:, 0] / z**2
    J[:, 1, 1] = intr.fy / z
    J[:, 1, 2] = -intr.fy * t[:, 1] / z**2
    return J


def pixel_loss(rendered_rgb, query_rgb):
    """Mean squared RGB difference and its gradient with respect to ``rendered_rgb``."""
    diff = np.asarray(rendered_rgb, dtype=np.float64) - np.asarray(query_rgb, dtype=np.float64)
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def psnr(a, b, max_value: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-12:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(max_value**2 / mse))
