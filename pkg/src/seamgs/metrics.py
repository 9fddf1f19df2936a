"""Image quality and calibration accuracy metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5


def _check_dims(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1], capped for identical inputs."""
    a, b = _check_dims(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return float(10 * np.log10(1.0 / mse))


def _kernel() -> np.ndarray:
    x = np.arange(-SSIM_RADIUS, SSIM_RADIUS + 1, dtype=float)
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()


def _blur_valid(x: np.ndarray) -> np.ndarray:
    """Separable Gaussian blur keeping only windows fully inside the image."""
    k = _kernel()
    r = SSIM_RADIUS
    y = correlate1d(x, k, axis=0, mode="constant")[r:-r]
    return correlate1d(y, k, axis=1, mode="constant")[:, r:-r]


def _blur_valid_adjoint(g: np.ndarray) -> np.ndarray:
    r = SSIM_RADIUS
    k = _kernel()
    pad = [(r, r), (r, r)] + [(0, 0)] * (g.ndim - 2)
    y = np.pad(g, pad)
    y = correlate1d(y, k[::-1], axis=1, mode="constant")
    return correlate1d(y, k[::-1], axis=0, mode="constant")


def _ssim_terms(x, y):
    mx, my = _blur_valid(x), _blur_valid(y)
    exx, eyy, exy = _blur_valid(x * x), _blur_valid(y * y), _blur_valid(x * y)
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * (exy - mx * my) + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = (exx - mx * mx) + (eyy - my * my) + SSIM_C2
    return mx, my, a1, a2, b1, b2


def ssim(a, b) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), averaged over
    valid windows and channels."""
    x, y = _check_dims(a, b)
    if x.shape[0] <= 2 * SSIM_RADIUS or x.shape[1] <= 2 * SSIM_RADIUS:
        raise ValueError("image too small for an 11x11 SSIM window")
    _, _, a1, a2, b1, b2 = _ssim_terms(x, y)
    return float(np.mean(a1 * a2 / (b1 * b2)))


def ssim_with_grad(pred, gt) -> tuple[float, np.ndarray]:
    """SSIM and its gradient with respect to ``pred``."""
    x, y = _check_dims(pred, gt)
    mx, my, a1, a2, b1, b2 = _ssim_terms(x, y)
    s = a1 * a2 / (b1 * b2)
    count = s.size
    d_a1 = a2 / (b1 * b2) / count
    d_a2 = a1 / (b1 * b2) / count
    d_b1 = -s / b1 / count
    d_b2 = -s / b2 / count
    g_mx = 2 * my * d_a1 - 2 * my * d_a2 + 2 * mx * d_b1 - 2 * mx * d_b2
    g_exx = d_b2
    g_exy = 2 * d_a2
    grad = _blur_valid_adjoint(g_mx) + 2 * x * _blur_valid_adjoint(g_exx) + y * _blur_valid_adjoint(g_exy)
    return float(np.mean(s)), grad


def gap_mae(pred, gt) -> float:
    """Mean absolute error of the six gap components, in centimetres."""
    diff = np.concatenate([pred.dt_front - gt.dt_front, pred.dt_back - gt.dt_back])
    return float(np.mean(np.abs(diff)) * 100.0)


def gap_errors_cm(pred, gt) -> dict[str, list[float]]:
    return {
        "front": [float(x) for x in (pred.dt_front - gt.dt_front) * 100.0],
        "back": [float(x) for x in (pred.dt_back - gt.dt_back) * 100.0],
    }


def seam_columns(width: int) -> list[tuple[int, int]]:
    """Adjacent column pairs straddling the two hemisphere seams."""
    q = width // 4
    return [(q - 1, q), (3 * q - 1, 3 * q)]


def seam_error(image, reference) -> float:
    """Mean abs error of the cross-seam column difference against a reference."""
    img, ref = _check_dims(image, reference)
    errs = []
    for a, b in seam_columns(img.shape[1]):
        errs.append(np.abs((img[:, a] - img[:, b]) - (ref[:, a] - ref[:, b])))
    return float(np.mean(errs))


def wrap_continuity(image) -> float:
    """Mean |I(col 0) - I(col W-1)|, the ERP wrap boundary."""
    img = np.asarray(image, dtype=float)
    return float(np.mean(np.abs(img[:, 0] - img[:, -1])))


@dataclass
class EvalReport:
    mode: str
    views: list[int]
    psnr: list[float]
    ssim: list[float]
    mean_psnr: float
    mean_ssim: float
    gap_mae_cm: float | None = None
    gap_errors_cm: dict | None = None
    seam_error: list[float] = field(default_factory=list)
    mean_seam_error: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        lines = [f"{'view':>6} {'PSNR':>9} {'SSIM':>8}"]
        for v, p, s in zip(self.views, self.psnr, self.ssim):
            lines.append(f"{v:>6d} {p:>9.3f} {s:>8.4f}")
        lines.append(f"{'mean':>6} {self.mean_psnr:>9.3f} {self.mean_ssim:>8.4f}")
        if self.gap_mae_cm is not None:
            lines.append(f"gap MAE: {self.gap_mae_cm:.4f} cm")
        return "\n".join(lines)


def evaluate(scene, calib, dataset, mode: str = "ideal", reference: str | None = None,
             workers: int = 1) -> EvalReport:
    """Render every test view and score it.

    ``mode="stitched"`` simulates the dual-fisheye capture with ``calib``;
    ``mode="ideal"`` renders the seamless panorama.  ``reference`` picks the
    target images: ``"imperfect"`` (the captured panoramas) or ``"clean"``
    (artifact-free renders, when the dataset has them).  By default stitched
    renders are scored against the captures and ideal renders against the
    clean references.  ``workers`` scores views on that many threads.
    """
    from ._parallel import thread_map
    from .calib import CameraRig
    from .raster import render_ideal, render_stitched

    if mode not in ("ideal", "stitched"):
        raise ValueError(f"mode must be 'ideal' or 'stitched', got {mode!r}")
    views = list(dataset.split["test"])
    if not views:
        raise ValueError("dataset has an empty test split")
    if reference is None:
        reference = "clean" if mode == "ideal" and dataset.clean is not None else "imperfect"
    if reference == "clean" and dataset.clean is None:
        raise ValueError("dataset has no clean reference images")
    refs = dataset.clean if reference == "clean" else dataset.images
    h, w = dataset.images[0].shape[:2]

    def score(i):
        pose = dataset.poses[i]
        if mode == "ideal":
            img = render_ideal(scene, pose, w, h)
        else:
            img = render_stitched(scene, CameraRig(pose, calib), w, h)
        ref = np.asarray(refs[i], dtype=float)
        return psnr(img, ref), ssim(img, ref), seam_error(img, ref)

    ps, ss, seams = (list(col) for col in zip(*thread_map(score, views, workers)))
    report = EvalReport(mode, views, ps, ss, float(np.mean(ps)), float(np.mean(ss)),
                        seam_error=seams, mean_seam_error=float(np.mean(seams)))
    if dataset.gt_calib is not None and calib is not None:
        report.gap_mae_cm = gap_mae(calib, dataset.gt_calib)
        report.gap_errors_cm = gap_errors_cm(calib, dataset.gt_calib)
    return report
