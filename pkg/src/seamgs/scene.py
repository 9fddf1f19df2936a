"""Gaussian scene representation and its binary persistence."""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .geom import IDENTITY_QUAT, quat_to_matrix

MAGIC = b"SGS1"
FLOATS_PER_SPLAT = 14


class SceneFormatError(ValueError):
    pass


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianSplat:
    mean: np.ndarray
    log_scale: np.ndarray
    orient: np.ndarray
    opacity_logit: float
    color_logit: np.ndarray

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def color(self) -> np.ndarray:
        return sigmoid(self.color_logit)


@dataclass
class GaussianScene:
    """Struct-of-arrays container for N splats.

    Opacity and colour are stored as logits and scales as logs so every field
    can be optimised without constraints.
    """

    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    color_logits: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float).reshape(-1, 3)
        n = len(self.means)
        self.log_scales = np.asarray(self.log_scales, dtype=float).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=float).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=float).reshape(n)
        self.color_logits = np.asarray(self.color_logits, dtype=float).reshape(n, 3)

    def __len__(self) -> int:
        return len(self.means)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def colors(self) -> np.ndarray:
        return sigmoid(self.color_logits)

    def splat(self, i: int) -> GaussianSplat:
        return GaussianSplat(self.means[i].copy(), self.log_scales[i].copy(), self.quats[i].copy(),
                             float(self.opacity_logits[i]), self.color_logits[i].copy())

    @classmethod
    def from_splats(cls, splats, meta=None) -> "GaussianScene":
        splats = list(splats)
        if not splats:
            return cls.empty(meta)
        return cls(
            np.stack([s.mean for s in splats]),
            np.stack([s.log_scale for s in splats]),
            np.stack([s.orient for s in splats]),
            np.array([s.opacity_logit for s in splats]),
            np.stack([s.color_logit for s in splats]),
            dict(meta or {}),
        )

    @classmethod
    def empty(cls, meta=None) -> "GaussianScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
                   np.zeros((0, 3)), dict(meta or {}))

    def copy(self) -> "GaussianScene":
        return GaussianScene(self.means.copy(), self.log_scales.copy(), self.quats.copy(),
                             self.opacity_logits.copy(), self.color_logits.copy(), dict(self.meta))

    def params(self) -> dict[str, np.ndarray]:
        """Named views of the optimisable arrays (shared memory, not copies)."""
        return {
            "means": self.means,
            "log_scales": self.log_scales,
            "quats": self.quats,
            "opacity_logits": self.opacity_logits,
            "color_logits": self.color_logits,
        }

    def subset(self, idx) -> "GaussianScene":
        return GaussianScene(self.means[idx], self.log_scales[idx], self.quats[idx],
                             self.opacity_logits[idx], self.color_logits[idx], dict(self.meta))

    def permuted(self, perm) -> "GaussianScene":
        return self.subset(np.asarray(perm))


def covariance(log_scale, quat) -> np.ndarray:
    """Sigma = R diag(s)^2 R^T, broadcasting over leading dimensions."""
    R = quat_to_matrix(quat)
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=float))
    return (R * s2[..., None, :]) @ np.swapaxes(R, -1, -2)


def scene_covariances(scene: GaussianScene) -> np.ndarray:
    return covariance(scene.log_scales, scene.quats)


def init_from_points(points, colors, base_scale: float, opacity: float = 0.8,
                     meta: dict | None = None) -> GaussianScene:
    """One isotropic splat per point, identity orientation."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    colors = np.asarray(colors, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("init_from_points needs at least one point")
    if len(points) != len(colors):
        raise ValueError(f"{len(points)} points but {len(colors)} colours")
    if not base_scale > 0:
        raise ValueError("base_scale must be positive")
    n = len(points)
    # keep logits finite for colours at the ends of [0, 1]
    c = np.clip(colors, 1e-6, 1 - 1e-6)
    return GaussianScene(
        means=points.copy(),
        log_scales=np.full((n, 3), np.log(base_scale)),
        quats=np.tile(IDENTITY_QUAT, (n, 1)),
        opacity_logits=np.full(n, float(logit(opacity))),
        color_logits=logit(c),
        meta=dict(meta or {}),
    )


def _pack(scene: GaussianScene) -> bytes:
    rows = np.concatenate([
        scene.means, scene.log_scales, scene.quats,
        scene.opacity_logits[:, None], scene.color_logits,
    ], axis=1).astype("<f4")
    return MAGIC + struct.pack("<Q", len(scene)) + rows.tobytes()


def save_scene(scene: GaussianScene, path) -> None:
    """Write ``scene`` atomically as little-endian f32 records."""
    data = _pack(scene)
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".sgs")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_scene(path) -> GaussianScene:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != MAGIC:
        raise SceneFormatError(f"{path}: not an SGS1 scene file (bad magic/version)")
    (n,) = struct.unpack("<Q", data[4:12])
    need = 12 + n * FLOATS_PER_SPLAT * 4
    if len(data) != need:
        raise SceneFormatError(f"{path}: truncated or oversized ({len(data)} bytes, expected {need})")
    rows = np.frombuffer(data, dtype="<f4", offset=12).reshape(n, FLOATS_PER_SPLAT).astype(float)
    return GaussianScene(rows[:, 0:3], rows[:, 3:6], rows[:, 6:10], rows[:, 10], rows[:, 11:14])
