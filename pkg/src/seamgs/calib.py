"""Dual-fisheye calibration model: lens gaps and angular-distortion grids.

Each splat is expressed in the local frame of one fisheye camera, rotated by
a direction-dependent offset sampled from a learnable axis-angle grid and
mapped back to the world:

    O_s = O_ideal + R_s dT_s
    g   = R_s^T (mu - O_s)
    mu' = R_s (Delta(theta_g, phi_g) g) + O_s

With Delta = I the map is the identity for any gap; the gap then acts only
through the camera centre the hemisphere is rasterised from.
"""
from __future__ import annotations

import json
import os
import tempfile
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geom import (
    IDENTITY_QUAT,
    Pose,
    dir_to_spherical,
    matrix_to_quat,
    quat_mul,
    quat_to_matrix,
    so3_exp,
    so3_right_jacobian,
    spherical_grad,
    yaw_matrix,
)
from .scene import GaussianScene, GaussianSplat, covariance

SIDES = ("front", "back")
DEFAULT_GRID = (32, 64)
GAP_WARN = 0.1
CALIB_FORMAT = "seamgs-calib"


@dataclass
class DistortionGrid:
    """M x N axis-angle cells; rows span elevation (north first), columns azimuth."""

    cells: np.ndarray

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=float)
        if self.cells.ndim != 3 or self.cells.shape[2] != 3:
            raise ValueError(f"grid cells must be (M, N, 3), got {self.cells.shape}")
        m, n, _ = self.cells.shape
        if m < 2 or n < 4:
            raise ValueError(f"grid needs M >= 2 and N >= 4, got {m}x{n}")
        if not np.all(np.isfinite(self.cells)):
            raise ValueError("grid cells must be finite")
        if np.any(np.linalg.norm(self.cells, axis=-1) >= np.pi):
            raise ValueError("grid cell rotation angles must be below pi")

    @classmethod
    def zeros(cls, rows: int = DEFAULT_GRID[0], cols: int = DEFAULT_GRID[1]) -> "DistortionGrid":
        return cls(np.zeros((rows, cols, 3)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape[0], self.cells.shape[1]

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(theta, phi) of every cell centre, each (M, N)."""
        m, n = self.shape
        theta = -np.pi + (np.arange(n) + 0.5) * 2 * np.pi / n
        phi = np.pi / 2 - (np.arange(m) + 0.5) * np.pi / m
        return np.meshgrid(theta, phi)

    def rms(self) -> float:
        return float(np.sqrt(np.mean(np.sum(self.cells**2, axis=-1))))


@dataclass
class DualFisheyeCalib:
    dt_front: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dt_back: np.ndarray = field(default_factory=lambda: np.zeros(3))
    grid_front: DistortionGrid = field(default_factory=DistortionGrid.zeros)
    grid_back: DistortionGrid = field(default_factory=DistortionGrid.zeros)

    def __post_init__(self):
        self.dt_front = np.asarray(self.dt_front, dtype=float).reshape(3)
        self.dt_back = np.asarray(self.dt_back, dtype=float).reshape(3)
        if self.grid_front.shape != self.grid_back.shape:
            raise ValueError("front and back grids must share dimensions")
        for name, dt in (("dt_front", self.dt_front), ("dt_back", self.dt_back)):
            if not np.all(np.isfinite(dt)):
                raise ValueError(f"{name} must be finite")
            if np.linalg.norm(dt) > GAP_WARN:
                warnings.warn(f"{name} magnitude {np.linalg.norm(dt):.3f} m looks implausible",
                              stacklevel=2)

    @classmethod
    def zeros(cls, rows: int = DEFAULT_GRID[0], cols: int = DEFAULT_GRID[1]) -> "DualFisheyeCalib":
        return cls(np.zeros(3), np.zeros(3), DistortionGrid.zeros(rows, cols),
                   DistortionGrid.zeros(rows, cols))

    def dt(self, side: str) -> np.ndarray:
        return self.dt_front if side == "front" else self.dt_back

    def grid(self, side: str) -> DistortionGrid:
        return self.grid_front if side == "front" else self.grid_back

    def copy(self) -> "DualFisheyeCalib":
        return DualFisheyeCalib(self.dt_front.copy(), self.dt_back.copy(),
                                DistortionGrid(self.grid_front.cells.copy()),
                                DistortionGrid(self.grid_back.cells.copy()))

    def params(self) -> dict[str, np.ndarray]:
        return {"dt_front": self.dt_front, "dt_back": self.dt_back,
                "grid_front": self.grid_front.cells, "grid_back": self.grid_back.cells}

    def grid_rms(self) -> float:
        cells = np.concatenate([self.grid_front.cells, self.grid_back.cells])
        return float(np.sqrt(np.mean(np.sum(cells**2, axis=-1))))

    def to_dict(self) -> dict:
        m, n = self.grid_front.shape
        return {
            "format": CALIB_FORMAT,
            "version": 1,
            "dt_front": [float(x) for x in self.dt_front],
            "dt_back": [float(x) for x in self.dt_back],
            "grid_rows": m,
            "grid_cols": n,
            "grid_front": [float(x) for x in self.grid_front.cells.ravel()],
            "grid_back": [float(x) for x in self.grid_back.cells.ravel()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DualFisheyeCalib":
        if d.get("format") != CALIB_FORMAT or d.get("version") != 1:
            raise ValueError("not a version-1 seamgs calibration document")
        m, n = int(d["grid_rows"]), int(d["grid_cols"])
        gf = np.array(d["grid_front"], dtype=float)
        gb = np.array(d["grid_back"], dtype=float)
        if gf.size != m * n * 3 or gb.size != m * n * 3:
            raise ValueError(f"grid arrays do not match {m}x{n}x3")
        return cls(np.array(d["dt_front"]), np.array(d["dt_back"]),
                   DistortionGrid(gf.reshape(m, n, 3)), DistortionGrid(gb.reshape(m, n, 3)))


def save_calib(calib: DualFisheyeCalib, path) -> None:
    write_json_atomic(calib.to_dict(), path)


def load_calib(path) -> DualFisheyeCalib:
    with open(path) as fh:
        return DualFisheyeCalib.from_dict(json.load(fh))


def write_json_atomic(obj, path) -> None:
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(obj, fh, indent=1)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


BACK_YAW = matrix_to_quat(yaw_matrix(np.pi))


@dataclass
class CameraRig:
    """Ideal panorama pose plus the two fisheye cameras mounted on it.

    ``r_front``/``r_back`` are rig-relative; the back camera is the front one
    yawed by 180 degrees.
    """

    ideal_pose: Pose = field(default_factory=Pose)
    calib: DualFisheyeCalib = field(default_factory=DualFisheyeCalib.zeros)
    r_front: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    r_back: np.ndarray = field(default_factory=lambda: BACK_YAW.copy())

    def rotation(self, side: str) -> np.ndarray:
        r = self.r_front if side == "front" else self.r_back
        return self.ideal_pose.R @ quat_to_matrix(r)


def _check_side(side: str) -> None:
    if side not in SIDES:
        raise ValueError(f"side must be 'front' or 'back', got {side!r}")


def camera_center(rig: CameraRig, side: str) -> np.ndarray:
    _check_side(side)
    return rig.ideal_pose.translation + rig.rotation(side) @ rig.calib.dt(side)


def to_local(mean, rig: CameraRig, side: str) -> np.ndarray:
    _check_side(side)
    R = rig.rotation(side)
    return (np.asarray(mean, dtype=float) - camera_center(rig, side)) @ R


def from_local(g, rig: CameraRig, side: str) -> np.ndarray:
    _check_side(side)
    return np.asarray(g, dtype=float) @ rig.rotation(side).T + camera_center(rig, side)


# --------------------------------------------------------------------------
# grid sampling

@dataclass
class GridSample:
    """Bilinear footprint of a batch of (theta, phi) queries."""

    i0: np.ndarray
    i1: np.ndarray
    j0: np.ndarray
    j1: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    dx_dtheta: float
    dy_dphi: np.ndarray  # zero where the elevation is clamped at a pole row

    def weights(self) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        fx, fy = self.fx, self.fy
        return [
            (self.i0, self.j0, (1 - fx) * (1 - fy)),
            (self.i0, self.j1, fx * (1 - fy)),
            (self.i1, self.j0, (1 - fx) * fy),
            (self.i1, self.j1, fx * fy),
        ]


def grid_lookup(shape: tuple[int, int], theta, phi) -> GridSample:
    m, n = shape
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    x = (theta + np.pi) / (2 * np.pi) * n - 0.5
    j0f = np.floor(x)
    fx = x - j0f
    j0 = j0f.astype(np.int64) % n
    j1 = (j0 + 1) % n
    y = (np.pi / 2 - phi) / np.pi * m - 0.5
    inside = (y > 0) & (y < m - 1)
    yc = np.clip(y, 0, m - 1)
    i0 = np.minimum(np.floor(yc).astype(np.int64), m - 2)
    fy = yc - i0
    return GridSample(i0, i0 + 1, j0, j1, fx, fy, n / (2 * np.pi), np.where(inside, -m / np.pi, 0.0))


def interpolate(cells: np.ndarray, s: GridSample) -> np.ndarray:
    out = 0.0
    for i, j, w in s.weights():
        out = out + w[:, None] * cells[i, j]
    return out


def interpolate_slopes(cells: np.ndarray, s: GridSample) -> tuple[np.ndarray, np.ndarray]:
    """d(omega)/d(theta) and d(omega)/d(phi) of the bilinear field."""
    c00, c01 = cells[s.i0, s.j0], cells[s.i0, s.j1]
    c10, c11 = cells[s.i1, s.j0], cells[s.i1, s.j1]
    fx, fy = s.fx[:, None], s.fy[:, None]
    dfx = (1 - fy) * (c01 - c00) + fy * (c11 - c10)
    dfy = (1 - fx) * (c10 - c00) + fx * (c11 - c01)
    return dfx * s.dx_dtheta, dfy * s.dy_dphi[:, None]


def scatter_cells(shape: tuple[int, int], s: GridSample, grad_omega: np.ndarray) -> np.ndarray:
    """Adjoint of ``interpolate``: accumulate per-query gradients onto cells."""
    m, n = shape
    out = np.zeros((m * n, 3))
    for i, j, w in s.weights():
        flat = i * n + j
        for c in range(3):
            out[:, c] += np.bincount(flat, weights=w * grad_omega[:, c], minlength=m * n)
    return out.reshape(m, n, 3)


def sample_omega(grid: DistortionGrid, theta, phi) -> np.ndarray:
    return interpolate(grid.cells, grid_lookup(grid.shape, theta, phi))


def sample_rotation(grid: DistortionGrid, theta, phi) -> np.ndarray:
    """Rotation matrix sampled at (theta, phi); scalar queries return (3, 3)."""
    scalar = np.ndim(theta) == 0 and np.ndim(phi) == 0
    R = so3_exp(sample_omega(grid, theta, phi))
    return R[0] if scalar else R


# --------------------------------------------------------------------------
# splat transform

@dataclass
class SideTransform:
    """Forward quantities of one hemisphere's splat transform, kept for backward."""

    side: str
    grid_shape: tuple[int, int]
    cells: np.ndarray
    R_side: np.ndarray
    center: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    local: np.ndarray
    valid: np.ndarray
    sample: GridSample
    omega: np.ndarray
    delta: np.ndarray
    A: np.ndarray
    new_means: np.ndarray
    new_covs: np.ndarray


def transform_arrays(means: np.ndarray, covs: np.ndarray, rig: CameraRig, side: str) -> SideTransform:
    _check_side(side)
    grid = rig.calib.grid(side)
    R = rig.rotation(side)
    O = camera_center(rig, side)
    g = (means - O) @ R
    norm = np.linalg.norm(g, axis=-1)
    valid = norm > 1e-12
    g_safe = np.where(valid[:, None], g, np.array([1.0, 0.0, 0.0]))
    theta, phi = dir_to_spherical(g_safe)
    s = grid_lookup(grid.shape, theta, phi)
    omega = interpolate(grid.cells, s)
    delta = so3_exp(omega)
    A = R @ delta @ R.T
    new_means = np.einsum("nij,nj->ni", A, means - O) + O
    new_covs = A @ covs @ np.swapaxes(A, -1, -2)
    return SideTransform(side, grid.shape, grid.cells, R, O, means, covs, g, valid, s, omega,
                         delta, A, new_means, new_covs)


def transform_scene(scene: GaussianScene, rig: CameraRig, side: str) -> GaussianScene:
    """Apply the gap/distortion map of ``side`` to every splat, order preserved."""
    if len(scene) == 0:
        return scene.copy()
    covs = covariance(scene.log_scales, scene.quats)
    t = transform_arrays(scene.means, covs, rig, side)
    out = scene.copy()
    out.means = t.new_means
    qa = matrix_to_quat(t.A)
    qn = quat_mul(qa, scene.quats / np.linalg.norm(scene.quats, axis=-1, keepdims=True))
    out.quats = qn
    return out


def transform_splat(s: GaussianSplat, rig: CameraRig, side: str) -> GaussianSplat:
    return transform_scene(GaussianScene.from_splats([s]), rig, side).splat(0)


@dataclass
class CalibGrad:
    dt: np.ndarray
    grid: np.ndarray


def calib_gradients(t: SideTransform, grad_new_means: np.ndarray, grad_new_covs: np.ndarray,
                    grad_center: np.ndarray, detach_sampling: bool = False):
    """Backpropagate through one hemisphere's transform.

    ``grad_center`` is the gradient w.r.t. the camera centre the hemisphere was
    rendered from (it equals O_s); ``grad_new_covs`` must be symmetric.  Returns (grad_means, grad_covs, CalibGrad).
    With ``detach_sampling`` the sampling location (theta, phi) is treated as a
    constant.
    """
    A, R = t.A, t.R_side
    d = t.means - t.center
    gnm = grad_new_means
    gA = gnm[:, :, None] * d[:, None, :] + 2.0 * grad_new_covs @ A @ t.covs
    g_means = np.einsum("nji,nj->ni", A, gnm)
    g_center = np.asarray(grad_center, dtype=float) + gnm.sum(0) - g_means.sum(0)
    g_covs = np.swapaxes(A, -1, -2) @ grad_new_covs @ A

    g_delta = R.T @ gA @ R
    M = np.swapaxes(t.delta, -1, -2) @ g_delta
    e = np.stack([M[:, 2, 1] - M[:, 1, 2], M[:, 0, 2] - M[:, 2, 0], M[:, 1, 0] - M[:, 0, 1]], axis=-1)
    Jr = so3_right_jacobian(t.omega)
    g_omega = np.einsum("nji,nj->ni", Jr, e)
    g_omega[~t.valid] = 0.0
    g_grid = scatter_cells(t.grid_shape, t.sample, g_omega)

    if not detach_sampling:
        dw_dtheta, dw_dphi = interpolate_slopes(t.cells, t.sample)
        g_theta = np.sum(g_omega * dw_dtheta, axis=-1)
        g_phi = np.sum(g_omega * dw_dphi, axis=-1)
        local = t.local
        rho2 = local[:, 0] ** 2 + local[:, 1] ** 2
        ok = t.valid & (rho2 > 1e-24)
        safe = np.where(ok[:, None], local, np.array([1.0, 0.0, 0.0]))
        dtheta, dphi = spherical_grad(safe)
        g_local = g_theta[:, None] * dtheta + g_phi[:, None] * dphi
        g_local[~ok] = 0.0
        g_world = g_local @ R.T
        g_means = g_means + g_world
        g_center = g_center - g_world.sum(0)

    return g_means, g_covs, CalibGrad(R.T @ g_center, g_grid)


# --------------------------------------------------------------------------
# regulariser

def _tv_pairs(cells: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d_theta = np.roll(cells, -1, axis=1) - cells
    d_phi = cells[1:] - cells[:-1]
    return d_theta, d_phi


def tv_loss(grid: DistortionGrid | np.ndarray) -> float:
    """Mean squared difference over azimuth-neighbour (wrapping) and elevation-neighbour pairs."""
    cells = grid.cells if isinstance(grid, DistortionGrid) else np.asarray(grid)
    d_theta, d_phi = _tv_pairs(cells)
    count = d_theta.shape[0] * d_theta.shape[1] + d_phi.shape[0] * d_phi.shape[1]
    return float((np.sum(d_theta**2) + np.sum(d_phi**2)) / count)


def tv_loss_grad(grid: DistortionGrid | np.ndarray) -> np.ndarray:
    cells = grid.cells if isinstance(grid, DistortionGrid) else np.asarray(grid)
    d_theta, d_phi = _tv_pairs(cells)
    count = d_theta.shape[0] * d_theta.shape[1] + d_phi.shape[0] * d_phi.shape[1]
    g = -2.0 * d_theta + 2.0 * np.roll(d_theta, 1, axis=1)
    g[1:] += 2.0 * d_phi
    g[:-1] -= 2.0 * d_phi
    return g / count
