"""Differentiable equirectangular splatting.

Each splat is projected with the local linearisation of the ERP map,
``cov2d = J Sigma_cam J^T + 0.3 I``, and composited front to back.  Backward
passes are analytic and return gradients for every scene parameter and, for
stitched renders, for the calibration.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .calib import SIDES, CameraRig, SideTransform, calib_gradients, transform_arrays
from .geom import (
    Pose,
    column_azimuths,
    dir_to_spherical,
    erp_jacobian,
    erp_scale,
    quat_to_matrix,
    quat_to_matrix_backward,
    spherical_hessian,
)
from .scene import GaussianScene, covariance

NEAR = 0.05
COV2D_REG = 0.3
MIN_ALPHA = 1.0 / 255.0
SIGMA_CUTOFF = 3.0

FRONT_WINDOW = (-np.pi / 2, np.pi / 2)
BACK_WINDOW = (np.pi / 2, 3 * np.pi / 2)


def window_mask(width: int, window=None) -> np.ndarray:
    """Columns whose centre azimuth lies in the half-open, wrapping window."""
    if window is None:
        return np.ones(width, dtype=np.bool_)
    lo, hi = window
    span = hi - lo
    if span >= 2 * np.pi:
        return np.ones(width, dtype=np.bool_)
    theta = column_azimuths(width)
    return ((theta - lo) % (2 * np.pi)) < span


def side_window(side: str):
    return FRONT_WINDOW if side == "front" else BACK_WINDOW


@dataclass
class Projection:
    p_cam: np.ndarray
    cov_cam: np.ndarray
    J: np.ndarray
    conic: np.ndarray
    centers: np.ndarray
    depth: np.ndarray
    boxes: np.ndarray
    valid: np.ndarray
    order: np.ndarray

    @property
    def cov2d(self) -> np.ndarray:
        a, b, c = self.conic[:, 0], self.conic[:, 1], self.conic[:, 2]
        det = a * c - b * b
        return np.stack([np.stack([c, -b], -1), np.stack([-b, a], -1)], -2) / det[:, None, None]


def _conic(cov2d: np.ndarray) -> np.ndarray:
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    return np.stack([c / det, -b / det, a / det], axis=-1)


def project_erp(p_cam: np.ndarray, cov_cam: np.ndarray, opacities: np.ndarray,
                width: int, height: int) -> Projection:
    """Project camera-frame splats to ERP pixel space and depth-sort them."""
    depth = np.linalg.norm(p_cam, axis=-1)
    rho = np.hypot(p_cam[:, 0], p_cam[:, 1])
    valid = (depth > NEAR) & (opacities >= MIN_ALPHA) & (rho > 1e-9 * np.maximum(depth, 1.0))
    safe = np.where(valid[:, None], p_cam, np.array([1.0, 0.0, 0.0]))

    J = erp_jacobian(safe, width, height)
    cov2d = J @ cov_cam @ np.swapaxes(J, -1, -2) + COV2D_REG * np.eye(2)
    conic = _conic(cov2d)

    theta, phi = dir_to_spherical(safe)
    a, b = erp_scale(width, height)
    cu = (theta + np.pi) * a
    cv = (np.pi / 2 - phi) * b
    centers = np.stack([cu, cv], axis=-1)

    ru = SIGMA_CUTOFF * np.sqrt(cov2d[:, 0, 0])
    rv = SIGMA_CUTOFF * np.sqrt(cov2d[:, 1, 1])
    u_lo = np.ceil(cu - ru - 0.5)
    u_hi = np.floor(cu + ru - 0.5)
    u_hi = np.minimum(u_hi, u_lo + width - 1)
    v_lo = np.ceil(cv - rv - 0.5)
    v_hi = np.floor(cv + rv - 0.5)
    boxes = np.stack([u_lo, u_hi, v_lo, v_hi], axis=-1)
    boxes = np.clip(np.nan_to_num(boxes), -4 * width, 4 * width).astype(np.int64)
    boxes[~valid] = (0, -1, 0, -1)

    idx = np.flatnonzero(valid)
    order = idx[np.lexsort((idx, depth[idx]))].astype(np.int64)
    return Projection(p_cam, cov_cam, J, conic, centers, depth, boxes, valid, order)


def project_erp_backward(proj: Projection, g_centers: np.ndarray, g_conics: np.ndarray,
                         width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Map centre/conic gradients back to camera-frame mean and covariance."""
    valid = proj.valid
    Q = np.stack([np.stack([proj.conic[:, 0], proj.conic[:, 1]], -1),
                  np.stack([proj.conic[:, 1], proj.conic[:, 2]], -1)], -2)
    GQ = np.stack([np.stack([g_conics[:, 0], 0.5 * g_conics[:, 1]], -1),
                   np.stack([0.5 * g_conics[:, 1], g_conics[:, 2]], -1)], -2)
    GS = -Q @ GQ @ Q
    J = proj.J
    g_cov = np.swapaxes(J, -1, -2) @ GS @ J
    GJ = 2.0 * GS @ J @ proj.cov_cam

    safe = np.where(valid[:, None], proj.p_cam, np.array([1.0, 0.0, 0.0]))
    ht, hp = spherical_hessian(safe)
    a, b = erp_scale(width, height)
    g_p = np.einsum("nij,ni->nj", J, g_centers)
    g_p += a * np.einsum("nj,njk->nk", GJ[:, 0], ht) - b * np.einsum("nj,njk->nk", GJ[:, 1], hp)
    g_p[~valid] = 0.0
    g_cov[~valid] = 0.0
    return g_p, g_cov


@dataclass
class RenderRecord:
    """Everything one rasterisation needs for its backward pass."""

    width: int
    height: int
    center: np.ndarray
    R_cam: np.ndarray
    col_mask: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    proj: Projection
    trans: np.ndarray
    n_contrib: np.ndarray


def render_arrays(means, covs, opacities, colors, center, R_cam, width, height, window=None):
    """Rasterise world-frame splat arrays; returns (image, RenderRecord)."""
    if width != 2 * height:
        raise ValueError(f"ERP images need width == 2 * height, got {width}x{height}")
    center = np.asarray(center, dtype=float)
    p_cam = (means - center) @ R_cam
    cov_cam = np.swapaxes(R_cam, -1, -2) @ covs @ R_cam
    proj = project_erp(p_cam, cov_cam, opacities, width, height)
    mask = window_mask(width, window)
    image, trans, n_contrib = _kernels.run_forward(
        proj.order, proj.centers, proj.conic, opacities, colors, proj.boxes, mask,
        width, height, True)
    return image, RenderRecord(width, height, center, R_cam, mask, opacities, colors, proj,
                               trans, n_contrib)


def render_arrays_backward(rec: RenderRecord, grad_image):
    """Returns gradients w.r.t. (means, covs, opacities, colours, camera centre)."""
    proj = rec.proj
    g_centers, g_conics, g_opac, g_colors = _kernels.run_backward(
        proj.order, proj.centers, proj.conic, rec.opacities, rec.colors, proj.boxes,
        rec.col_mask, rec.width, rec.height, True, rec.trans, rec.n_contrib, grad_image)
    g_p, g_cov_cam = project_erp_backward(proj, g_centers, g_conics, rec.width, rec.height)
    R = rec.R_cam
    g_means = g_p @ R.T
    g_covs = R @ g_cov_cam @ R.T
    return g_means, g_covs, g_opac, g_colors, -g_means.sum(0)


@dataclass
class SceneGrad:
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    color_logits: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(means=self.means, log_scales=self.log_scales, quats=self.quats,
                    opacity_logits=self.opacity_logits, color_logits=self.color_logits)


def covariance_backward(log_scales, quats, g_covs):
    """Gradient of Sigma = R diag(exp(2 s)) R^T w.r.t. log-scales and quaternions."""
    R = quat_to_matrix(quats)
    s2 = np.exp(2.0 * log_scales)
    g_covs = 0.5 * (g_covs + np.swapaxes(g_covs, -1, -2))
    GD = np.einsum("nji,njk,nki->ni", R, g_covs, R)
    g_log = 2.0 * s2 * GD
    GR = 2.0 * g_covs @ R * s2[:, None, :]
    return g_log, quat_to_matrix_backward(quats, GR)


def _scene_grad(scene, g_means, g_covs, g_opac, g_colors) -> SceneGrad:
    o = scene.opacities
    c = scene.colors
    g_log, g_quat = covariance_backward(scene.log_scales, scene.quats, g_covs)
    return SceneGrad(g_means, g_log, g_quat, g_opac * o * (1 - o), g_colors * c * (1 - c))


@dataclass
class IdealRecord:
    scene: GaussianScene
    raster: RenderRecord


def rasterize(scene: GaussianScene, cam_center, cam_rot, width: int, height: int,
              azimuth_window=None, return_record: bool = False):
    """Render ``scene`` from a camera at ``cam_center`` with world-from-camera
    rotation ``cam_rot`` (matrix or quaternion).  Pixels outside the azimuth
    window are left black."""
    R = np.asarray(cam_rot, dtype=float)
    if R.shape == (4,):
        R = quat_to_matrix(R)
    if len(scene) == 0:
        image = np.zeros((height, width, 3))
        return (image, None) if return_record else image
    covs = covariance(scene.log_scales, scene.quats)
    image, rec = render_arrays(scene.means, covs, scene.opacities, scene.colors, cam_center, R,
                               width, height, azimuth_window)
    if return_record:
        return image, IdealRecord(scene, rec)
    return image


def render_ideal(scene: GaussianScene, pose: Pose, width: int, height: int,
                 return_record: bool = False):
    """Distortion-free panorama from the ideal centre (inference path)."""
    return rasterize(scene, pose.translation, pose.R, width, height, None, return_record)


def rasterize_backward(record: IdealRecord, grad_image) -> SceneGrad:
    g_means, g_covs, g_opac, g_colors, _ = render_arrays_backward(record.raster, grad_image)
    return _scene_grad(record.scene, g_means, g_covs, g_opac, g_colors)


@dataclass
class StitchedRecord:
    scene: GaussianScene
    rig: CameraRig
    transforms: dict[str, SideTransform]
    rasters: dict[str, RenderRecord]


def render_stitched(scene: GaussianScene, rig: CameraRig, width: int, height: int,
                    return_record: bool = False, sides=SIDES):
    """Simulated dual-fisheye panorama: each hemisphere is rendered from its own
    displaced centre after the distortion transform and the two halves are
    joined at azimuth +-90 degrees of the ideal frame."""
    image = np.zeros((height, width, 3))
    covs = covariance(scene.log_scales, scene.quats)
    opac, colors = scene.opacities, scene.colors
    R_ideal = rig.ideal_pose.R
    transforms, rasters = {}, {}
    for side in sides:
        t = transform_arrays(scene.means, covs, rig, side)
        img, rec = render_arrays(t.new_means, t.new_covs, opac, colors, t.center, R_ideal,
                                 width, height, side_window(side))
        image += img
        transforms[side] = t
        rasters[side] = rec
    if return_record:
        return image, StitchedRecord(scene, rig, transforms, rasters)
    return image


def stitched_backward(record: StitchedRecord, grad_image, detach_sampling: bool = False):
    """Returns (SceneGrad, calib gradient dict keyed like ``DualFisheyeCalib.params``)."""
    scene = record.scene
    n = len(scene)
    g_means = np.zeros((n, 3))
    g_covs = np.zeros((n, 3, 3))
    g_opac = np.zeros(n)
    g_colors = np.zeros((n, 3))
    calib_grads = {}
    m, k = record.rig.calib.grid_front.shape
    for side in SIDES:
        calib_grads[f"dt_{side}"] = np.zeros(3)
        calib_grads[f"grid_{side}"] = np.zeros((m, k, 3))
    for side, rec in record.rasters.items():
        gnm, gnc, go, gc, gcen = render_arrays_backward(rec, grad_image)
        gm, gcov, cg = calib_gradients(record.transforms[side], gnm, gnc, gcen, detach_sampling)
        g_means += gm
        g_covs += gcov
        g_opac += go
        g_colors += gc
        calib_grads[f"dt_{side}"] = cg.dt
        calib_grads[f"grid_{side}"] = cg.grid
    return _scene_grad(scene, g_means, g_covs, g_opac, g_colors), calib_grads
