"""Rigid poses, twist coordinates, pinhole projection and pose-error metrics.

Poses map world points into the camera frame: ``x_cam = R @ x_world + T``.
Twists are ordered ``(rho, phi)``: translational part first, rotation
(axis-angle, radians) second.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError

_SMALL_ANGLE = 1e-8
_LOG_ANGLE_LIMIT = np.pi - 1e-3


def skew(v):
    """Cross-product matrix ``[v]x`` such that ``skew(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True, eq=False)
class PoseSE3:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        T = np.array(self.translation, dtype=np.float64).reshape(3)
        R.setflags(write=False)
        T.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", T)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_camera_center(cls, rotation, center) -> "PoseSE3":
        R = np.asarray(rotation, dtype=np.float64)
        return cls(R, -R @ np.asarray(center, dtype=np.float64))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "PoseSE3":
        """Camera at ``eye`` looking at ``target``; image y points down, x right."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        n = np.linalg.norm(right)
        if n < 1e-9:
            raise GeometryError("look_at: up vector parallel to viewing direction")
        right /= n
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return cls.from_camera_center(R, eye)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, ``-R^T T``."""
        return -self.rotation.T @ self.translation

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """``self * other`` (apply ``other`` first)."""
        return PoseSE3(self.rotation @ other.rotation,
                       self.rotation @ other.translation + self.translation)

    def inverse(self) -> "PoseSE3":
        Rt = self.rotation.T
        return PoseSE3(Rt, -Rt @ self.translation)

    def to_list(self) -> list[float]:
        """12 numbers: rotation row-major, then translation."""
        return [float(v) for v in self.rotation.ravel()] + [float(v) for v in self.translation]

    @classmethod
    def from_list(cls, values) -> "PoseSE3":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (12,):
            raise ValueError(f"pose needs 12 numbers, got shape {values.shape}")
        return cls(values[:9].reshape(3, 3), values[9:])

    def __eq__(self, other):
        if not isinstance(other, PoseSE3):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __repr__(self):
        return f"PoseSE3(center={np.round(self.center, 4).tolist()})"


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> "CameraIntrinsics":
        f = 0.5 * width / np.tan(np.radians(hfov_deg) / 2)
        return cls(f, f, width / 2.0, height / 2.0, width, height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + np.sin(theta) / theta * K
            + (1.0 - np.cos(theta)) / theta**2 * K @ K)


def _left_jacobian(phi) -> np.ndarray:
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (np.eye(3) + (1.0 - np.cos(theta)) / theta**2 * K
            + (theta - np.sin(theta)) / theta**3 * K @ K)


def _left_jacobian_inv(phi) -> np.ndarray:
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    coef = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta**2
    return np.eye(3) - 0.5 * K + coef * K @ K


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    if theta >= _LOG_ANGLE_LIMIT:
        raise GeometryError(f"near-singular rotation (angle {theta:.6f} rad)")
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < _SMALL_ANGLE:
        return 0.5 * w
    if theta < 2.5:
        return theta / (2.0 * np.sin(theta)) * w
    # Antisymmetric part is ill-conditioned near pi; read the axis from the
    # symmetric part and take its sign from w.
    B = 0.5 * (R + R.T) - cos_t * np.eye(3)
    col = int(np.argmax(np.diag(B)))
    axis = B[:, col] / np.sqrt(B[col, col] * (1.0 - cos_t))
    axis /= np.linalg.norm(axis)
    if axis @ w < 0:
        axis = -axis
    return theta * axis


def se3_exp(xi) -> PoseSE3:
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    rho, phi = xi[:3], xi[3:]
    return PoseSE3(so3_exp(phi), _left_jacobian(phi) @ rho)


def se3_log(pose: PoseSE3) -> np.ndarray:
    phi = so3_log(pose.rotation)
    rho = _left_jacobian_inv(phi) @ pose.translation
    return np.concatenate([rho, phi])


def perturb_left(xi, pose: PoseSE3) -> PoseSE3:
    """Left-multiplicative update ``exp(xi) * pose``."""
    return se3_exp(xi).compose(pose)


def project_point(intr: CameraIntrinsics, pose: PoseSE3, x_world):
    """Project one world point; returns ``(uv, depth)``."""
    x_cam = pose.rotation @ np.asarray(x_world, dtype=np.float64) + pose.translation
    z = x_cam[2]
    if z <= 1e-6:
        raise GeometryError(f"point is behind camera (z={z:.3g})")
    uv = np.array([intr.fx * x_cam[0] / z + intr.cx, intr.fy * x_cam[1] / z + intr.cy])
    return uv, float(z)


def projection_jacobian(intr: CameraIntrinsics, x_cam) -> np.ndarray:
    """d(uv)/d(x_cam) for points in camera coordinates, shape (..., 2, 3)."""
    x_cam = np.asarray(x_cam, dtype=np.float64)
    x, y, z = x_cam[..., 0], x_cam[..., 1], x_cam[..., 2]
    J = np.zeros(x_cam.shape[:-1] + (2, 3))
    J[..., 0, 0] = intr.fx / z
    J[..., 0, 2] = -intr.fx * x / z**2
    J[..., 1, 1] = intr.fy / z
    J[..., 1, 2] = -intr.fy * y / z**2
    return J


def point_twist_jacobian(x_cam) -> np.ndarray:
    """d(x_cam)/d(xi) under the left perturbation, shape (..., 3, 6)."""
    x_cam = np.asarray(x_cam, dtype=np.float64)
    J = np.zeros(x_cam.shape[:-1] + (3, 6))
    J[..., 0, 0] = J[..., 1, 1] = J[..., 2, 2] = 1.0
    x, y, z = x_cam[..., 0], x_cam[..., 1], x_cam[..., 2]
    # -[x]_x
    J[..., 0, 4] = z
    J[..., 0, 5] = -y
    J[..., 1, 3] = -z
    J[..., 1, 5] = x
    J[..., 2, 3] = y
    J[..., 2, 4] = -x
    return J


def rotation_error_deg(R_est, R_gt) -> float:
    c = (np.trace(np.asarray(R_est) @ np.asarray(R_gt).T) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def pose_error(est: PoseSE3, gt: PoseSE3) -> tuple[float, float]:
    """Camera-center distance (world units) and rotation angle (degrees)."""
    trans = float(np.linalg.norm(est.center - gt.center))
    return trans, rotation_error_deg(est.rotation, gt.rotation)


def random_rotation(rng: np.random.Generator, max_angle_rad: float) -> np.ndarray:
    """Rotation about a uniformly random axis by an angle uniform in [0, max]."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return so3_exp(axis * rng.uniform(0.0, max_angle_rad))
