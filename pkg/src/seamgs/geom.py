"""Spherical coordinates, equirectangular mapping and SO(3) helpers.

Axis convention used everywhere in the package: +x forward (panorama centre),
+y left, +z up.  Azimuth ``theta`` is measured counter-clockwise from +x and
lies in [-pi, pi); elevation ``phi`` is positive upward.

All functions broadcast over leading dimensions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-6


class DomainError(ValueError):
    """Raised when a direction is undefined (zero vector)."""


def _check_nonzero(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1)
    if np.any(n == 0):
        raise DomainError("direction of a zero vector is undefined")
    return n


def wrap_angle(theta):
    """Wrap angles into [-pi, pi)."""
    return (np.asarray(theta) + np.pi) % (2 * np.pi) - np.pi


def dir_to_spherical(v) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(v, dtype=float)
    n = _check_nonzero(v)
    theta = wrap_angle(np.arctan2(v[..., 1], v[..., 0]))
    phi = np.arcsin(np.clip(v[..., 2] / n, -1.0, 1.0))
    return theta, phi


def spherical_to_dir(theta, phi) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    c = np.cos(phi)
    return np.stack([c * np.cos(theta), c * np.sin(theta), np.sin(phi)], axis=-1)


def spherical_grad(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of (theta, phi) with respect to the (unnormalised) vector v."""
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    rho2 = x * x + y * y
    rho = np.sqrt(rho2)
    r2 = rho2 + z * z
    zero = np.zeros_like(x)
    dtheta = np.stack([-y / rho2, x / rho2, zero], axis=-1)
    dphi = np.stack([-x * z / (r2 * rho), -y * z / (r2 * rho), rho / r2], axis=-1)
    return dtheta, dphi


def spherical_hessian(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hessians (..., 3, 3) of theta and phi with respect to v."""
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    rho2 = x * x + y * y
    rho = np.sqrt(rho2)
    r2 = rho2 + z * z
    rho4 = rho2 * rho2
    shape = x.shape + (3, 3)

    ht = np.zeros(shape)
    ht[..., 0, 0] = 2 * x * y / rho4
    ht[..., 0, 1] = ht[..., 1, 0] = (y * y - x * x) / rho4
    ht[..., 1, 1] = -2 * x * y / rho4

    # phi = atan2(z, rho); d(phi) = (-z d(rho) + rho dz) / r2
    hp = np.zeros(shape)
    r4 = r2 * r2
    rho3 = rho2 * rho
    # d/dx of (-x z / (r2 rho))
    hp[..., 0, 0] = -z / (r2 * rho) + x * z * (2 * x / (r4 * rho) + x / (r2 * rho3))
    hp[..., 1, 1] = -z / (r2 * rho) + y * z * (2 * y / (r4 * rho) + y / (r2 * rho3))
    hp[..., 0, 1] = hp[..., 1, 0] = x * z * (2 * y / (r4 * rho) + y / (r2 * rho3))
    # d/dz of (-x z / (r2 rho))
    hp[..., 0, 2] = hp[..., 2, 0] = -x / (r2 * rho) + 2 * x * z * z / (r4 * rho)
    hp[..., 1, 2] = hp[..., 2, 1] = -y / (r2 * rho) + 2 * y * z * z / (r4 * rho)
    hp[..., 2, 2] = -2 * rho * z / r4
    return ht, hp


def erp_scale(width: int, height: int) -> tuple[float, float]:
    """Pixels per radian along u (azimuth) and v (elevation)."""
    return width / (2 * np.pi), height / np.pi


def erp_project(v, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Continuous ERP pixel coordinates; pixel (i, j) covers [i, i+1) x [j, j+1)."""
    theta, phi = dir_to_spherical(v)
    u = (theta / (2 * np.pi) + 0.5) * width
    vv = (0.5 - phi / np.pi) * height
    return u, vv


def erp_unproject(u, v, width: int, height: int) -> np.ndarray:
    theta = (np.asarray(u, dtype=float) / width - 0.5) * 2 * np.pi
    phi = (0.5 - np.asarray(v, dtype=float) / height) * np.pi
    return spherical_to_dir(theta, phi)


def erp_jacobian(v: np.ndarray, width: int, height: int) -> np.ndarray:
    """2x3 Jacobian of ``erp_project`` at v, shape (..., 2, 3)."""
    a, b = erp_scale(width, height)
    dtheta, dphi = spherical_grad(v)
    return np.stack([a * dtheta, -b * dphi], axis=-2)


def pixel_directions(width: int, height: int) -> np.ndarray:
    """Unit direction through every pixel centre, shape (height, width, 3)."""
    u = np.arange(width) + 0.5
    v = np.arange(height) + 0.5
    uu, vv = np.meshgrid(u, v)
    return erp_unproject(uu, vv, width, height)


def column_azimuths(width: int) -> np.ndarray:
    return ((np.arange(width) + 0.5) / width - 0.5) * 2 * np.pi


# --------------------------------------------------------------------------
# SO(3)

def hat(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def _exp_coeffs(theta: np.ndarray):
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = t * t
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(t)) / t2)
    c = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (t - np.sin(t)) / (t2 * t))
    return a, b, c


def so3_exp(omega) -> np.ndarray:
    """Rodrigues exponential of axis-angle vectors, returns (..., 3, 3)."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    a, b, _ = _exp_coeffs(theta)
    K = hat(omega)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def so3_right_jacobian(omega) -> np.ndarray:
    """J_r with exp(w + d) ~= exp(w) exp(J_r(w) d)."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    _, b, c = _exp_coeffs(theta)
    K = hat(omega)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - b[..., None, None] * K + c[..., None, None] * (K @ K)


def so3_log(R) -> np.ndarray:
    """Axis-angle of rotation matrices, norm in [0, pi]."""
    R = np.asarray(R, dtype=float)
    q = matrix_to_quat(R)
    return quat_to_axis_angle(q)


def quat_to_axis_angle(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    q = np.where(q[..., :1] < 0, -q, q)
    w = np.clip(q[..., 0], -1.0, 1.0)
    xyz = q[..., 1:]
    s = np.linalg.norm(xyz, axis=-1)
    angle = 2.0 * np.arctan2(s, w)
    small = s < 0.5 * SMALL_ANGLE
    # angle / sin(angle / 2) -> 2 / w near zero
    scale = np.where(small, 2.0 / np.where(w == 0, 1.0, w), angle / np.where(small, 1.0, s))
    return xyz * scale[..., None]


def axis_angle_to_quat(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(0.5 * t) / t)
    return np.concatenate([np.cos(0.5 * theta)[..., None], omega * k[..., None]], axis=-1)


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of (w, x, y, z) quaternions; normalises the input."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
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


def quat_to_matrix_backward(q: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the raw quaternion given dL/dR (normalisation included)."""
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    G = grad_R
    gw = 2 * z * (G[..., 1, 0] - G[..., 0, 1]) + 2 * y * (G[..., 0, 2] - G[..., 2, 0]) \
        + 2 * x * (G[..., 2, 1] - G[..., 1, 2])
    gx = 2 * y * (G[..., 1, 0] + G[..., 0, 1]) + 2 * z * (G[..., 2, 0] + G[..., 0, 2]) \
        + 2 * w * (G[..., 2, 1] - G[..., 1, 2]) - 4 * x * (G[..., 2, 2] + G[..., 1, 1])
    gy = 2 * x * (G[..., 1, 0] + G[..., 0, 1]) + 2 * w * (G[..., 0, 2] - G[..., 2, 0]) \
        + 2 * z * (G[..., 2, 1] + G[..., 1, 2]) - 4 * y * (G[..., 2, 2] + G[..., 0, 0])
    gz = 2 * w * (G[..., 1, 0] - G[..., 0, 1]) + 2 * x * (G[..., 2, 0] + G[..., 0, 2]) \
        + 2 * y * (G[..., 2, 1] + G[..., 1, 2]) - 4 * z * (G[..., 1, 1] + G[..., 0, 0])
    gn = np.stack([gw, gx, gy, gz], axis=-1)
    # project out the radial component of the normalisation
    return (gn - qn * np.sum(gn * qn, axis=-1, keepdims=True)) / norm


def matrix_to_quat(R) -> np.ndarray:
    """Quaternion (w >= 0) of rotation matrices, stable for all angles."""
    R = np.asarray(R, dtype=float)
    m00, m11, m22 = R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]
    tr = m00 + m11 + m22
    cand = np.stack([
        np.stack([1 + tr, R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0],
                  R[..., 1, 0] - R[..., 0, 1]], axis=-1),
        np.stack([R[..., 2, 1] - R[..., 1, 2], 1 + m00 - m11 - m22,
                  R[..., 0, 1] + R[..., 1, 0], R[..., 0, 2] + R[..., 2, 0]], axis=-1),
        np.stack([R[..., 0, 2] - R[..., 2, 0], R[..., 0, 1] + R[..., 1, 0],
                  1 - m00 + m11 - m22, R[..., 1, 2] + R[..., 2, 1]], axis=-1),
        np.stack([R[..., 1, 0] - R[..., 0, 1], R[..., 0, 2] + R[..., 2, 0],
                  R[..., 1, 2] + R[..., 2, 1], 1 - m00 - m11 + m22], axis=-1),
    ], axis=-2)
    # pick the candidate with the largest diagonal term for conditioning
    diag = np.stack([1 + tr, 1 + m00 - m11 - m22, 1 - m00 + m11 - m22, 1 - m00 - m11 + m22], axis=-1)
    k = np.argmax(diag, axis=-1)
    q = np.take_along_axis(cand, k[..., None, None], axis=-2)[..., 0, :]
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0, -q, q)


def quat_mul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def yaw_matrix(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass
class Pose:
    """Camera-to-world rigid transform; ``rotation`` is a (w, x, y, z) quaternion."""

    rotation: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise ValueError("pose rotation must be a nonzero quaternion")
        self.rotation = q / n
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @classmethod
    def from_matrix(cls, R, t) -> "Pose":
        return cls(matrix_to_quat(R), t)

    def to_dict(self) -> dict:
        return {"rotation": [float(x) for x in self.rotation],
                "translation": [float(x) for x in self.translation]}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.array(d["rotation"], dtype=float), np.array(d["translation"], dtype=float))
