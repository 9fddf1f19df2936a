"""Synthetic dual-fisheye captures with known calibration.

Two equidistant fisheye cameras are rendered from displaced centres, then
stitched into an ERP panorama under the assumption that both share the ideal
centre.  That modelling mismatch is the stitching artifact the calibration
has to explain.
"""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from . import _kernels
from .calib import (
    DEFAULT_GRID,
    BACK_YAW,
    CameraRig,
    DistortionGrid,
    DualFisheyeCalib,
    camera_center,
    write_json_atomic,
)
from .geom import (
    IDENTITY_QUAT,
    Pose,
    matrix_to_quat,
    pixel_directions,
    quat_to_matrix,
    so3_exp,
    spherical_to_dir,
    column_azimuths,
)
from ._parallel import thread_map
from .imageio import read_pfm, write_pfm, write_png
from .raster import COV2D_REG, MIN_ALPHA, NEAR, SIGMA_CUTOFF
from .scene import GaussianScene, covariance, load_scene, logit, save_scene

DEFAULT_FOV = 185.0
MAX_GAP = 0.02
DEFAULT_LENS_DEG = 0.5
MIN_CLEARANCE = 0.3


# --------------------------------------------------------------------------
# toy scenes

def _frame_from_normal(normal: np.ndarray, spin: np.ndarray) -> np.ndarray:
    """Rotations whose local z axis is ``normal``, spun about it by ``spin``."""
    n = normal / np.linalg.norm(normal, axis=-1, keepdims=True)
    helper = np.where(np.abs(n[:, :1]) < 0.9, np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
    t1 = np.cross(helper, n)
    t1 /= np.linalg.norm(t1, axis=-1, keepdims=True)
    t2 = np.cross(n, t1)
    c, s = np.cos(spin)[:, None], np.sin(spin)[:, None]
    a = c * t1 + s * t2
    b = -s * t1 + c * t2
    return np.stack([a, b, n], axis=-1)


def _room(n: int, rng, half=(2.0, 2.0, 1.5)):
    hx, hy, hz = half
    faces = [
        # (axis, sign, extent along the two in-plane axes)
        (0, 1, (2 * hy, 2 * hz)), (0, -1, (2 * hy, 2 * hz)),
        (1, 1, (2 * hx, 2 * hz)), (1, -1, (2 * hx, 2 * hz)),
    ]
    areas = np.array([a * b for _, _, (a, b) in faces])
    counts = np.floor(n * areas / areas.sum()).astype(int)
    counts[np.argsort(-(n * areas / areas.sum() - counts))[: n - counts.sum()]] += 1
    pts, normals = [], []
    for (axis, sign, (ea, eb)), k in zip(faces, counts):
        if k == 0:
            continue
        # jittered grid over the face, cells visited in a seeded random order
        na = max(1, int(round(np.sqrt(k * ea / eb))))
        nb = int(np.ceil(k / na))
        cells = rng.permutation(na * nb)[:k]
        ca, cb = cells % na, cells // na
        a = (ca + rng.uniform(0.15, 0.85, k)) / na * ea - ea / 2
        b = (cb + rng.uniform(0.15, 0.85, k)) / nb * eb - eb / 2
        others = [i for i in range(3) if i != axis]
        p = np.zeros((k, 3))
        p[:, axis] = sign * half[axis]
        p[:, others[0]] = a
        p[:, others[1]] = b
        nrm = np.zeros((k, 3))
        nrm[:, axis] = -sign
        pts.append(p)
        normals.append(nrm)
    pts, normals = np.concatenate(pts), np.concatenate(normals)
    spacing = np.sqrt(areas.sum() / n)
    return pts, normals, spacing


def make_toy_scene(kind: str = "room", n_splats: int = 500, seed: int = 0,
                   size_scale: float = 1.0) -> GaussianScene:
    """Seeded synthetic scene.

    ``room``: splats tiling the four side walls of a 4 x 4 x 3 m box centred
    on the origin (no floor or ceiling, which would sit at the ERP poles).
    ``ring``: a textured band at 1.5 m radius.  ``random``: a shell between
    1 and 3 m.  ``far``: a shell at 150-200 m (parallax-free).
    All kinds use flat splats with random per-splat colour for texture.
    ``size_scale`` multiplies the default splat extent.  Room splats cover
    about 0.3 of the tiling spacing by default; larger splats make the
    fisheye and ERP footprint linearisations disagree more (a small,
    systematic bias in recovered gaps).
    """
    if n_splats < 1:
        raise ValueError("n_splats must be at least 1")
    if not size_scale > 0:
        raise ValueError("size_scale must be positive")
    rng = np.random.default_rng(seed)
    if kind == "room":
        pts, normals, spacing = _room(n_splats, rng)
        size = 0.3 * spacing
    elif kind == "ring":
        ang = rng.uniform(-np.pi, np.pi, n_splats)
        h = rng.uniform(-0.6, 0.6, n_splats)
        pts = np.stack([1.5 * np.cos(ang), 1.5 * np.sin(ang), h], axis=-1)
        normals = -pts * np.array([1, 1, 0])
        size = 0.6 * np.sqrt(2 * np.pi * 1.5 * 1.2 / n_splats)
    elif kind in ("random", "far"):
        r_lo, r_hi = (1.0, 3.0) if kind == "random" else (150.0, 200.0)
        d = rng.normal(size=(n_splats, 3))
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        r = rng.uniform(r_lo, r_hi, n_splats)
        pts = d * r[:, None]
        normals = -d
        size = 0.6 * r * np.sqrt(4 * np.pi / n_splats)
    else:
        raise ValueError(f"unknown scene kind {kind!r}")
    n = len(pts)
    size = np.broadcast_to(size_scale * np.asarray(size, dtype=float), (n,))
    R = _frame_from_normal(normals, rng.uniform(0, 2 * np.pi, n))
    aspect = rng.uniform(0.7, 1.3, n)
    log_scales = np.log(np.stack([size * aspect, size / aspect, 0.05 * size], axis=-1))
    colors = rng.uniform(0.1, 0.9, (n, 3))
    return GaussianScene(
        means=pts,
        log_scales=log_scales,
        quats=matrix_to_quat(R),
        opacity_logits=np.full(n, float(logit(0.9))),
        color_logits=logit(colors),
        meta={"kind": kind, "seed": seed, "size_scale": size_scale, "units": "meters"},
    )


def sample_gap(seed, max_gap: float = MAX_GAP) -> tuple[np.ndarray, np.ndarray]:
    """Per-component uniform gap in [-max_gap, max_gap] metres for both cameras."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-max_gap, max_gap, 3), rng.uniform(-max_gap, max_gap, 3)


# --------------------------------------------------------------------------
# angular distortion ground truth

def _sh_basis(d: np.ndarray) -> np.ndarray:
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    return np.stack([np.ones_like(x), x, y, z, x * y, y * z, x * z, x * x - y * y,
                     3 * z * z - 1], axis=-1)


@dataclass
class DistortionField:
    """Smooth axis-angle field: per axis a sum of three low-order harmonics."""

    coeffs: np.ndarray  # (3, 9)

    @classmethod
    def random(cls, seed, amplitude_rad: float) -> "DistortionField":
        rng = np.random.default_rng(seed)
        coeffs = np.zeros((3, 9))
        for axis in range(3):
            picks = rng.choice(9, size=3, replace=False)
            coeffs[axis, picks] = rng.uniform(-1, 1, 3)
        field_ = cls(coeffs)
        theta, phi = np.meshgrid(np.linspace(-np.pi, np.pi, 181), np.linspace(-np.pi / 2, np.pi / 2, 91))
        peak = np.max(np.linalg.norm(field_(spherical_to_dir(theta, phi)), axis=-1))
        field_.coeffs = coeffs * (amplitude_rad / peak if peak > 0 else 0.0)
        return field_

    def __call__(self, dirs) -> np.ndarray:
        d = np.asarray(dirs, dtype=float)
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        return _sh_basis(d) @ self.coeffs.T

    def to_grid(self, rows: int, cols: int) -> DistortionGrid:
        g = DistortionGrid.zeros(rows, cols)
        theta, phi = g.cell_centers()
        return DistortionGrid(self(spherical_to_dir(theta, phi)))


# --------------------------------------------------------------------------
# equidistant fisheye camera

@dataclass
class FisheyeSpec:
    side: int = 256
    fov: float = DEFAULT_FOV

    def __post_init__(self):
        if not 180.0 < self.fov <= 200.0:
            raise ValueError("fisheye fov must lie in (180, 200] degrees")

    @property
    def focal(self) -> float:
        return self.side / np.deg2rad(self.fov)

    @property
    def half_fov(self) -> float:
        return 0.5 * np.deg2rad(self.fov)


def fisheye_project(v: np.ndarray, spec: FisheyeSpec):
    """Local direction -> (col, row, psi).  Optical axis +x, image right -y, image down -z."""
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    rho = np.hypot(y, z)
    psi = np.arctan2(rho, x)
    k = np.where(rho > 0, psi / np.where(rho > 0, rho, 1.0), 1.0 / np.where(x > 0, x, 1.0))
    f = spec.focal
    c = spec.side / 2
    return c - f * k * y, c - f * k * z, psi


def fisheye_unproject(col, row, spec: FisheyeSpec) -> np.ndarray:
    c = spec.side / 2
    dx = np.asarray(col, dtype=float) - c
    dy = np.asarray(row, dtype=float) - c
    r = np.hypot(dx, dy)
    psi = r / spec.focal
    s = np.where(r > 0, np.sin(psi) / np.where(r > 0, r, 1.0), 0.0)
    return np.stack([np.cos(psi), -dx * s, -dy * s], axis=-1)


def fisheye_jacobian(v: np.ndarray, spec: FisheyeSpec) -> np.ndarray:
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    rho2 = y * y + z * z
    rho = np.sqrt(rho2)
    r2 = x * x + rho2
    psi = np.arctan2(rho, x)
    t = rho / np.where(x > 0, x, 1.0)
    series = (x > 0) & (t < 1e-3)
    safe_rho = np.where(series | (rho == 0), 1.0, rho)
    xs = np.where(x > 0, x, 1.0)
    k = np.where(series, (1 - t * t / 3) / xs, psi / safe_rho)
    q = np.where(series, (-2.0 / 3.0 + 0.8 * t * t) / xs**3,
                 (x * rho / r2 - psi) / safe_rho**3)
    f = spec.focal
    J = np.empty(x.shape + (2, 3))
    J[..., 0, 0] = f * y / r2
    J[..., 0, 1] = -f * (k + y * y * q)
    J[..., 0, 2] = -f * y * z * q
    J[..., 1, 0] = f * z / r2
    J[..., 1, 1] = -f * y * z * q
    J[..., 1, 2] = -f * (k + z * z * q)
    return J


def render_fisheye(scene: GaussianScene, pose: Pose, spec: FisheyeSpec,
                   dilation: float = COV2D_REG) -> np.ndarray:
    """Equidistant fisheye render from ``pose`` (camera-to-world).

    ``dilation`` is the screen-space variance (px^2) added to every footprint.
    """
    side = spec.side
    if len(scene) == 0:
        return np.zeros((side, side, 3))
    R = pose.R
    p = (scene.means - pose.translation) @ R
    cov = np.swapaxes(R, -1, -2) @ covariance(scene.log_scales, scene.quats) @ R
    depth = np.linalg.norm(p, axis=-1)
    col, row, psi = fisheye_project(p, spec)
    opac = scene.opacities
    valid = (depth > NEAR) & (opac >= MIN_ALPHA) & (psi < min(np.pi - 0.2, spec.half_fov + 0.5))
    safe = np.where(valid[:, None], p, np.array([1.0, 0.0, 0.0]))
    J = fisheye_jacobian(safe, spec)
    cov2d = J @ cov @ np.swapaxes(J, -1, -2) + dilation * np.eye(2)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=-1)
    ru = SIGMA_CUTOFF * np.sqrt(a)
    rv = SIGMA_CUTOFF * np.sqrt(c)
    boxes = np.stack([np.ceil(col - ru - 0.5), np.floor(col + ru - 0.5),
                      np.ceil(row - rv - 0.5), np.floor(row + rv - 0.5)], axis=-1)
    boxes = np.clip(np.nan_to_num(boxes), -side, 2 * side).astype(np.int64)
    boxes[~valid] = (0, -1, 0, -1)
    idx = np.flatnonzero(valid)
    order = idx[np.lexsort((idx, depth[idx]))].astype(np.int64)
    centers = np.stack([col, row], axis=-1)
    image, _, _ = _kernels.run_forward(order, np.nan_to_num(centers), np.nan_to_num(conic), opac,
                                       scene.colors, boxes, np.ones(side, dtype=np.bool_),
                                       side, side, False)
    u = np.arange(side) + 0.5
    uu, vv = np.meshgrid(u, u)
    outside = np.hypot(uu - side / 2, vv - side / 2) > side / 2
    image[outside] = 0.0
    return image


# --------------------------------------------------------------------------
# stitching

RIG_ROTATIONS = {"front": quat_to_matrix(IDENTITY_QUAT), "back": quat_to_matrix(BACK_YAW)}


def stitch_pair(front: np.ndarray, back: np.ndarray, spec: FisheyeSpec, width: int, height: int,
                rig_rotations=None, fields=None) -> tuple[np.ndarray, int]:
    """Resample two fisheye images into an ERP panorama with a hard seam at +-90 deg.

    Every ERP ray is mapped through its camera's assumed-ideal pose.  Optional
    ``fields`` (per side) apply the lens's angular distortion to the ray.
    Returns the panorama and the number of rays that fell outside the lens FOV.
    """
    rots = rig_rotations or RIG_ROTATIONS
    fields = fields or {}
    dirs = pixel_directions(width, height)
    theta = column_azimuths(width)
    is_front = np.broadcast_to((theta >= -np.pi / 2) & (theta < np.pi / 2), (height, width))
    out = np.zeros((height, width, 3))
    misses = 0
    for side, img in (("front", front), ("back", back)):
        sel = is_front if side == "front" else ~is_front
        d = dirs[sel] @ rots[side]
        fld = fields.get(side)
        if fld is not None:
            d = np.einsum("nji,nj->ni", so3_exp(fld(d)), d)
        col, row, psi = fisheye_project(d, spec)
        outside = psi > spec.half_fov
        misses += int(np.count_nonzero(outside))
        vals = np.stack([map_coordinates(img[..., ch], [row - 0.5, col - 0.5], order=1,
                                         mode="constant", cval=0.0) for ch in range(3)], axis=-1)
        vals[outside] = 0.0
        out[sel] = vals
    if misses:
        warnings.warn(f"{misses} panorama rays fell outside the fisheye field of view", stacklevel=2)
    return out, misses


def capture(scene: GaussianScene, rig: CameraRig, spec: FisheyeSpec, width: int, height: int,
            fields=None) -> tuple[np.ndarray, int]:
    """Render both fisheye views at their true (displaced) centres and stitch them.

    The fisheye footprint dilation is matched in angle to the panorama's, so
    that a zero-calibration capture differs from the ideal render only by
    resampling.
    """
    imgs = {}
    dilation = COV2D_REG * (spec.focal * 2 * np.pi / width) ** 2
    for side in ("front", "back"):
        pose = Pose.from_matrix(rig.rotation(side), camera_center(rig, side))
        imgs[side] = render_fisheye(scene, pose, spec, dilation)
    rots = {"front": quat_to_matrix(rig.r_front), "back": quat_to_matrix(rig.r_back)}
    return stitch_pair(imgs["front"], imgs["back"], spec, width, height, rots, fields)


# --------------------------------------------------------------------------
# datasets

@dataclass
class Dataset:
    poses: list[Pose]
    images: list[np.ndarray]
    gt_calib: DualFisheyeCalib | None
    split: dict[str, list[int]]
    seed: int
    meta: dict = field(default_factory=dict)
    clean: list[np.ndarray] | None = None
    scene: GaussianScene | None = None

    def __post_init__(self):
        n = len(self.poses)
        if len(self.images) != n:
            raise ValueError("poses and images differ in length")
        parts = sorted(self.split.get("train", []) + self.split.get("test", []))
        if parts != list(range(n)):
            raise ValueError("train/test split must partition the views")
        shapes = {im.shape for im in self.images}
        if len(shapes) > 1:
            raise ValueError("dataset images must share dimensions")

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def size(self) -> tuple[int, int]:
        h, w = self.images[0].shape[:2]
        return w, h


def _sample_poses(scene: GaussianScene, n: int, rng, tilt: float, yaw_spread: float = np.pi) -> list[Pose]:
    lo = scene.means.min(0)
    hi = scene.means.max(0)
    centre = 0.5 * (lo + hi)
    half = np.minimum(0.5 * (hi - lo) - 0.7, 1.2)
    half = np.maximum(half, 0.05)
    pos = centre.copy()
    poses = []

    def clear(p):
        return np.min(np.linalg.norm(scene.means - p, axis=-1)) >= MIN_CLEARANCE

    for _ in range(n):
        for _attempt in range(1000):
            cand = np.clip(pos + rng.normal(scale=0.4, size=3), centre - half, centre + half)
            if clear(cand):
                pos = cand
                break
        else:
            raise RuntimeError("could not find a collision-free camera position")
        yaw = rng.uniform(-yaw_spread, yaw_spread)
        pitch, roll = rng.uniform(-tilt, tilt, 2)
        R = so3_exp(np.array([0, 0, yaw])) @ so3_exp(np.array([0, pitch, 0])) @ so3_exp(np.array([roll, 0, 0]))
        poses.append(Pose.from_matrix(R, pos))
    return poses


def generate_dataset(scene: GaussianScene, n_views: int = 50, seed: int = 0, width: int = 256,
                     height: int = 128, gap=None, max_gap: float = MAX_GAP,
                     lens_deg: float = DEFAULT_LENS_DEG, fov: float = DEFAULT_FOV,
                     fisheye_side: int | None = None, grid_shape=DEFAULT_GRID,
                     tilt: float = 0.3, yaw_spread: float = np.pi,
                     with_clean: bool = True, workers: int = 1) -> Dataset:
    """Simulated imperfect panoramas with one rig-fixed ground-truth calibration.

    ``gap`` is ``(dt_front, dt_back)`` in metres; when omitted it is drawn
    uniformly from [-max_gap, max_gap] per component.  ``lens_deg`` sets the
    peak angular distortion (0 disables it).  Camera yaw is uniform in
    [-yaw_spread, yaw_spread]; pitch and roll in [-tilt, tilt].  Views alternate between the
    train and test split.  ``workers`` renders views on that many threads;
    the output does not depend on it.
    """
    if n_views < 2:
        raise ValueError("need at least two views to split")
    root = np.random.SeedSequence(seed)
    s_gap, s_lens, s_pose = root.spawn(3)
    if gap is None:
        dt_f, dt_b = sample_gap(s_gap, max_gap)
    else:
        dt_f, dt_b = (np.asarray(g, dtype=float) for g in gap)
    fields = None
    calib = DualFisheyeCalib.zeros(*grid_shape)
    calib.dt_front, calib.dt_back = np.array(dt_f), np.array(dt_b)
    if lens_deg > 0:
        sf, sb = s_lens.spawn(2)
        fields = {"front": DistortionField.random(sf, np.deg2rad(lens_deg)),
                  "back": DistortionField.random(sb, np.deg2rad(lens_deg))}
        calib.grid_front = fields["front"].to_grid(*grid_shape)
        calib.grid_back = fields["back"].to_grid(*grid_shape)

    spec = FisheyeSpec(fisheye_side or width, fov)
    poses = _sample_poses(scene, n_views, np.random.default_rng(s_pose), tilt, yaw_spread)
    zero = DualFisheyeCalib.zeros(*grid_shape)

    def one(pose):
        img, m = capture(scene, CameraRig(pose, calib), spec, width, height, fields)
        ref = capture(scene, CameraRig(pose, zero), spec, width, height)[0] if with_clean else None
        return img, m, ref

    out = thread_map(one, poses, workers)
    images = [img.astype(np.float32) for img, _, _ in out]
    clean = [ref.astype(np.float32) for _, _, ref in out] if with_clean else None
    misses = sum(m for _, m, _ in out)
    split = {"train": list(range(0, n_views, 2)), "test": list(range(1, n_views, 2))}
    meta = {"seed": seed, "width": width, "height": height, "fov": fov,
            "fisheye_side": spec.side, "lens_deg": lens_deg, "n_views": n_views,
            "tilt": tilt, "yaw_spread": yaw_spread, "coverage_misses": misses, "lens_fields": None if fields is None else
            {k: v.coeffs.tolist() for k, v in fields.items()}}
    return Dataset(poses, images, calib, split, seed, meta, clean, scene)


def save_dataset(ds: Dataset, root) -> None:
    root = os.fspath(root)
    os.makedirs(os.path.join(root, "views"), exist_ok=True)
    for i, img in enumerate(ds.images):
        write_pfm(os.path.join(root, "views", f"{i:03d}.pfm"), img)
        write_png(os.path.join(root, "views", f"{i:03d}.png"), img)
    if ds.clean is not None:
        os.makedirs(os.path.join(root, "clean"), exist_ok=True)
        for i, img in enumerate(ds.clean):
            write_pfm(os.path.join(root, "clean", f"{i:03d}.pfm"), img)
    write_json_atomic([p.to_dict() for p in ds.poses], os.path.join(root, "poses.json"))
    if ds.gt_calib is not None:
        write_json_atomic(ds.gt_calib.to_dict(), os.path.join(root, "gt_calib.json"))
    write_json_atomic(ds.split, os.path.join(root, "split.json"))
    write_json_atomic(dict(ds.meta, seed=ds.seed), os.path.join(root, "meta.json"))
    if ds.scene is not None:
        save_scene(ds.scene, os.path.join(root, "scene.sgs"))


def load_dataset(root) -> Dataset:
    root = os.fspath(root)

    def _json(name):
        with open(os.path.join(root, name)) as fh:
            return json.load(fh)

    meta = _json("meta.json")
    poses = [Pose.from_dict(p) for p in _json("poses.json")]
    images = [read_pfm(os.path.join(root, "views", f"{i:03d}.pfm")) for i in range(len(poses))]
    clean = None
    if os.path.isdir(os.path.join(root, "clean")):
        clean = [read_pfm(os.path.join(root, "clean", f"{i:03d}.pfm")) for i in range(len(poses))]
    gt = None
    if os.path.exists(os.path.join(root, "gt_calib.json")):
        gt = DualFisheyeCalib.from_dict(_json("gt_calib.json"))
    scene = None
    if os.path.exists(os.path.join(root, "scene.sgs")):
        scene = load_scene(os.path.join(root, "scene.sgs"))
    return Dataset(poses, images, gt, _json("split.json"), int(meta["seed"]), meta, clean, scene)
