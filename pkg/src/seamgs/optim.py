"""Joint optimisation of splats and dual-fisheye calibration."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .calib import CameraRig, DualFisheyeCalib, tv_loss, tv_loss_grad
from .geom import Pose
from .metrics import ssim_with_grad
from .raster import SceneGrad, render_stitched, stitched_backward
from .scene import GaussianScene

CALIB_GAP_KEYS = ("dt_front", "dt_back")
CALIB_GRID_KEYS = ("grid_front", "grid_back")


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss; ``snapshot`` holds the state at failure."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    iterations: int = 3000
    lr_means: float = 1.6e-4
    lr_means_final: float = 1.6e-6
    lr_log_scales: float = 5e-3
    lr_quats: float = 1e-3
    lr_opacity: float = 0.05
    lr_colors: float = 5e-3
    lr_calib_start: float = 1e-3
    lr_calib_end: float = 1e-4
    lambda_dssim: float = 0.2
    lambda_tv: float = 1e-2
    grid_rows: int = 32
    grid_cols: int = 64
    seed: int = 0
    snapshot_every: int = 100
    enable_gap: bool = True
    enable_lens: bool = True
    optimize_scene: bool = True
    detach_sampling: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for f in fields(self):
            if f.name.startswith("lr_") and not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be positive")
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ValueError("lambda_dssim must lie in [0, 1]")
        if self.lambda_tv < 0:
            raise ValueError("lambda_tv must be non-negative")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MomentState:
    """First/second moment accumulators of the moment-based optimiser."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               lrs: dict[str, float]) -> None:
        """One bias-corrected step, in place, over the parameters named in ``lrs``."""
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.step
        c2 = 1 - b2**self.step
        for name, lr in lrs.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        out["step"] = np.array(self.step)
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "MomentState":
        st = cls(step=int(arrays["step"]))
        for key in arrays:
            if key.startswith("m/"):
                st.m[key[2:]] = np.array(arrays[key])
            elif key.startswith("v/"):
                st.v[key[2:]] = np.array(arrays[key])
        return st


def lr_schedule(step: int, total: int, lr_start: float, lr_end: float) -> float:
    """Log-linear decay from ``lr_start`` at step 0 to ``lr_end`` at ``total``."""
    t = min(max(step / total, 0.0), 1.0) if total > 0 else 1.0
    if t == 0.0:
        return lr_start
    if t == 1.0:
        return lr_end
    return math.exp((1 - t) * math.log(lr_start) + t * math.log(lr_end))


def photometric_loss(pred, gt, lambda_dssim: float = 0.2) -> float:
    return photometric_loss_grad(pred, gt, lambda_dssim)[0]


def photometric_loss_grad(pred, gt, lambda_dssim: float = 0.2) -> tuple[float, np.ndarray]:
    """(1 - l) * L1 + l * (1 - SSIM) and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"image shapes differ: {pred.shape} vs {gt.shape}")
    diff = pred - gt
    l1 = float(np.mean(np.abs(diff)))
    grad = (1 - lambda_dssim) * np.sign(diff) / diff.size
    loss = (1 - lambda_dssim) * l1
    if lambda_dssim > 0:
        s, gs = ssim_with_grad(pred, gt)
        loss += lambda_dssim * (1 - s)
        grad = grad - lambda_dssim * gs
    return loss, grad


@dataclass
class LossResult:
    loss: float
    photometric: float
    tv: float
    scene_grad: SceneGrad
    calib_grad: dict[str, np.ndarray]
    image: np.ndarray


def total_loss(scene: GaussianScene, calib: DualFisheyeCalib, pose: Pose, gt,
               config: TrainConfig) -> LossResult:
    """Photometric loss of the stitched render plus TV on both grids, with gradients.

    Disabled toggles zero their gradient group.
    """
    width, height = gt.shape[1], gt.shape[0]
    rig = CameraRig(pose, calib)
    image, rec = render_stitched(scene, rig, width, height, return_record=True)
    photo, g_img = photometric_loss_grad(image, gt, config.lambda_dssim)
    sg, cg = stitched_backward(rec, g_img, config.detach_sampling)
    tv = 0.0
    if config.lambda_tv > 0:
        for key in CALIB_GRID_KEYS:
            cells = calib.params()[key]
            tv += tv_loss(cells)
            cg[key] = cg[key] + config.lambda_tv * tv_loss_grad(cells)
    if not config.enable_gap:
        for key in CALIB_GAP_KEYS:
            cg[key] = np.zeros_like(cg[key])
    if not config.enable_lens:
        for key in CALIB_GRID_KEYS:
            cg[key] = np.zeros_like(cg[key])
    loss = photo + config.lambda_tv * tv
    return LossResult(loss, photo, tv, sg, cg, image)


def camera_extent(poses) -> float:
    """Radius of the camera cloud, as used to scale the mean learning rate."""
    centres = np.array([p.translation for p in poses])
    return float(1.1 * max(np.max(np.linalg.norm(centres - centres.mean(0), axis=-1)), 0.1))


HISTORY_FIELDS = ["iteration", "loss", "dt_front_x", "dt_front_y", "dt_front_z",
                  "dt_back_x", "dt_back_y", "dt_back_z", "grid_rms"]


def history_row(step: int, loss: float, calib: DualFisheyeCalib) -> dict:
    return {"iteration": step, "loss": loss,
            **{f"dt_front_{a}": float(v) for a, v in zip("xyz", calib.dt_front)},
            **{f"dt_back_{a}": float(v) for a, v in zip("xyz", calib.dt_back)},
            "grid_rms": calib.grid_rms()}


def write_history(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "iteration" else float(v)) for k, v in r.items()}
                for r in csv.DictReader(fh)]


@dataclass
class TrainState:
    scene: GaussianScene
    calib: DualFisheyeCalib
    moments: MomentState
    step: int = 0
    history: list[dict] = field(default_factory=list)


def view_for_step(step: int, train_ids, seed: int) -> int:
    """Epoch-shuffled round robin over the training views."""
    n = len(train_ids)
    epoch, pos = divmod(step, n)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return train_ids[perm[pos]]


def train(scene: GaussianScene, dataset, config: TrainConfig, calib: DualFisheyeCalib | None = None,
          state: TrainState | None = None, stop_at: int | None = None, on_snapshot=None) -> TrainState:
    """Jointly fit splats and calibration to the dataset's training views.

    Pass a previous ``state`` to resume; ``stop_at`` ends the run early (for
    checkpointed runs).  ``on_snapshot(state)`` is called at every snapshot.
    """
    train_ids = list(dataset.split["train"])
    if not train_ids:
        raise ValueError("dataset has no training views")
    if state is None:
        calib = calib.copy() if calib is not None else DualFisheyeCalib.zeros(config.grid_rows, config.grid_cols)
        state = TrainState(scene.copy(), calib, MomentState())
    extent = camera_extent([dataset.poses[i] for i in train_ids])
    total = config.iterations
    end = total if stop_at is None else min(stop_at, total)
    while state.step < end:
        step = state.step
        i = view_for_step(step, train_ids, config.seed)
        gt = np.asarray(dataset.images[i], dtype=float)
        res = total_loss(state.scene, state.calib, dataset.poses[i], gt, config)
        if not np.isfinite(res.loss):
            raise NumericalAbort(f"non-finite loss at iteration {step} (view {i})", {
                "iteration": step, "view": i, "scene": state.scene.copy(),
                "calib": state.calib.copy(), "history": list(state.history)})
        lrs: dict[str, float] = {}
        params: dict[str, np.ndarray] = {}
        grads: dict[str, np.ndarray] = {}
        if config.optimize_scene:
            params.update(state.scene.params())
            grads.update(res.scene_grad.as_dict())
            lrs.update({
                "means": extent * lr_schedule(step, total, config.lr_means, config.lr_means_final),
                "log_scales": config.lr_log_scales,
                "quats": config.lr_quats,
                "opacity_logits": config.lr_opacity,
                "color_logits": config.lr_colors,
            })
        lr_c = lr_schedule(step, total, config.lr_calib_start, config.lr_calib_end)
        cparams = state.calib.params()
        if config.enable_gap:
            for k in CALIB_GAP_KEYS:
                params[k], grads[k], lrs[k] = cparams[k], res.calib_grad[k], lr_c
        if config.enable_lens:
            for k in CALIB_GRID_KEYS:
                params[k], grads[k], lrs[k] = cparams[k], res.calib_grad[k], lr_c
        state.moments.update(params, grads, lrs)
        q = state.scene.quats
        q /= np.linalg.norm(q, axis=-1, keepdims=True)
        state.step += 1
        if state.step % config.snapshot_every == 0 or state.step == total:
            state.history.append(history_row(state.step, res.loss, state.calib))
            if on_snapshot is not None:
                on_snapshot(state)
    return state
