"""Rigid transforms, the rectified stereo pinhole model and robust-cost helpers.

Conventions
-----------
* Camera frame: x right, y down, z forward.
* ``Pose`` maps points from its local frame into the parent frame:
  ``p_parent = R @ p_local + t``. A camera pose in the world is therefore
  camera-to-world; its inverse is what projects world points into the image.
* Twists are ordered ``(rho, phi)``: translational part first, then the
  rotation vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: Minimum disparity (pixels) accepted by triangulation.
MIN_DISPARITY = 0.1

_SMALL_ANGLE = 1e-8


class GeometryError(ValueError):
    """Base class for geometric failures callers are expected to handle."""


class NonPositiveDepth(GeometryError):
    pass


class DegenerateDisparity(GeometryError):
    pass


class NearPiRotation(GeometryError):
    pass


@dataclass(frozen=True, eq=False)
class Pose:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def __matmul__(self, other: Pose) -> Pose:
        return compose(self, other)

    def inverse(self) -> Pose:
        return invert(self)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point ``(3,)`` or a batch ``(N, 3)``."""
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.t

    def allclose(self, other: Pose, atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.R, other.R, atol=atol) and np.allclose(self.t, other.t, atol=atol))

    def __repr__(self) -> str:
        rv = rotation_log(self.R) if rotation_angle(self.R) < np.pi - 1e-6 else np.full(3, np.nan)
        return f"Pose(t={np.round(self.t, 6).tolist()}, rotvec={np.round(rv, 6).tolist()})"


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float
    width: int
    height: int

    def __post_init__(self):
        for name in ("fx", "fy", "baseline", "width", "height"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive, got {getattr(self, name)!r}")

    @property
    def bf(self) -> float:
        return self.fx * self.baseline

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "baseline": self.baseline, "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> CameraIntrinsics:
        return cls(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            baseline=float(d["baseline"]), width=int(d["width"]), height=int(d["height"]),
        )


def default_intrinsics() -> CameraIntrinsics:
    """960x540 rectified stereo rig with a 1 m baseline."""
    return CameraIntrinsics(fx=500.0, fy=500.0, cx=480.0, cy=270.0, baseline=1.0, width=960, height=540)


# --------------------------------------------------------------------------
# SO(3) / SE(3)


def hat(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_exp(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def rotation_angle(R: np.ndarray) -> float:
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def rotation_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    theta = rotation_angle(R)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-6:
        # first-order series of theta / (2 sin theta)
        return 0.5 * (1.0 + theta**2 / 6.0) * w
    if np.pi - theta < 1e-6:
        raise NearPiRotation(f"rotation angle {theta:.9f} too close to pi")
    return theta / (2.0 * np.sin(theta)) * w


def _left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    a = (1.0 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * K + b * K @ K


def pose_exp(twist: np.ndarray) -> Pose:
    twist = np.asarray(twist, dtype=float).reshape(6)
    rho, phi = twist[:3], twist[3:]
    return Pose(rotation_exp(phi), _left_jacobian(phi) @ rho)


def pose_log(pose: Pose) -> np.ndarray:
    phi = rotation_log(pose.R)
    rho = np.linalg.solve(_left_jacobian(phi), pose.t)
    return np.concatenate([rho, phi])


def compose(a: Pose, b: Pose) -> Pose:
    """``a`` after ``b``: maps b's local frame through a."""
    R = a.R @ b.R
    # re-orthonormalise so long chains stay inside SO(3)
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return Pose(R, a.R @ b.t + a.t)


def invert(p: Pose) -> Pose:
    Rt = p.R.T
    return Pose(Rt, -Rt @ p.t)


def transform_point(pose: Pose, p: np.ndarray) -> np.ndarray:
    return pose.R @ np.asarray(p, dtype=float) + pose.t


def quaternion_from_rotation(R: np.ndarray) -> np.ndarray:
    """Unit quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s])
    q /= np.linalg.norm(q)
    return -q if q[3] < 0 else q


def rotation_from_quaternion(q: np.ndarray) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


# --------------------------------------------------------------------------
# Stereo pinhole model


def project_mono(K: CameraIntrinsics, p_cam: np.ndarray) -> np.ndarray:
    """Left-image pixel ``(u_l, v_l)`` of a camera-frame point."""
    X, Y, Z = np.asarray(p_cam, dtype=float)
    if not Z > 0:
        raise NonPositiveDepth(f"point has depth {Z}")
    return np.array([K.fx * X / Z + K.cx, K.fy * Y / Z + K.cy])


def project_stereo(K: CameraIntrinsics, p_cam: np.ndarray) -> np.ndarray:
    """Rectified stereo pixel ``(u_l, v_l, u_r)``; disparity is ``fx * b / Z``."""
    X, Y, Z = np.asarray(p_cam, dtype=float)
    if not Z > 0:
        raise NonPositiveDepth(f"point has depth {Z}")
    u_l = K.fx * X / Z + K.cx
    return np.array([u_l, K.fy * Y / Z + K.cy, K.fx * (X - K.baseline) / Z + K.cx])


def triangulate_stereo(K: CameraIntrinsics, obs: np.ndarray, min_disparity: float = MIN_DISPARITY) -> np.ndarray:
    u_l, v_l, u_r = np.asarray(obs, dtype=float)
    disparity = u_l - u_r
    if not disparity > min_disparity:
        raise DegenerateDisparity(f"disparity {disparity} px below {min_disparity}")
    Z = K.bf / disparity
    return np.array([(u_l - K.cx) * Z / K.fx, (v_l - K.cy) * Z / K.fy, Z])


def project_stereo_batch(K: CameraIntrinsics, p_cam: np.ndarray) -> np.ndarray:
    """Vectorised ``project_stereo`` for ``(N, 3)`` points; no depth check."""
    X, Y, Z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    inv_z = 1.0 / Z
    u_l = K.fx * X * inv_z + K.cx
    return np.column_stack([u_l, K.fy * Y * inv_z + K.cy, u_l - K.bf * inv_z])


def triangulate_stereo_batch(K: CameraIntrinsics, obs: np.ndarray, min_disparity: float = MIN_DISPARITY):
    """Vectorised triangulation of ``(N, 3)`` stereo pixels.

    Returns ``(points, valid)``; rows failing the disparity test are NaN.
    """
    obs = np.asarray(obs, dtype=float)
    disparity = obs[:, 0] - obs[:, 2]
    valid = disparity > min_disparity
    Z = np.full(len(obs), np.nan)
    Z[valid] = K.bf / disparity[valid]
    pts = np.column_stack([(obs[:, 0] - K.cx) * Z / K.fx, (obs[:, 1] - K.cy) * Z / K.fy, Z])
    return pts, valid


# --------------------------------------------------------------------------
# Robust cost


def huber_weight(squared_error, delta: float):
    """IRLS weight of the Huber cost at residual norm ``sqrt(squared_error)``."""
    s = np.asarray(squared_error, dtype=float)
    w = np.where(s <= delta * delta, 1.0, delta / np.sqrt(np.maximum(s, delta * delta)))
    return float(w) if w.ndim == 0 else w


def huber_cost(squared_error, delta: float):
    s = np.asarray(squared_error, dtype=float)
    return np.where(s <= delta * delta, s, 2.0 * delta * np.sqrt(s) - delta * delta)
