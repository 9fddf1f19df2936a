"""Shared fixtures-as-functions and the finite-difference oracle."""
import numpy as np

from seamgs.calib import CameraRig, DistortionGrid, DualFisheyeCalib
from seamgs.geom import Pose, axis_angle_to_quat
from seamgs.scene import GaussianScene


def small_scene(n=10, seed=3):
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return GaussianScene(dirs * rng.uniform(0.8, 2.0, (n, 1)),
                         np.log(rng.uniform(0.08, 0.25, (n, 3))),
                         axis_angle_to_quat(rng.normal(size=(n, 3))),
                         rng.normal(0.5, 1, n), rng.normal(size=(n, 3)))


def small_rig(seed=3, grid=(4, 8), amp=0.03):
    rng = np.random.default_rng(seed + 100)
    cal = DualFisheyeCalib(rng.uniform(-0.02, 0.02, 3), rng.uniform(-0.02, 0.02, 3),
                           DistortionGrid(rng.normal(scale=amp, size=grid + (3,))),
                           DistortionGrid(rng.normal(scale=amp, size=grid + (3,))))
    pose = Pose(axis_angle_to_quat(rng.normal(scale=0.3, size=3)), rng.normal(scale=0.1, size=3))
    return CameraRig(pose, cal)


def fd_mismatches(loss, arrays, analytic, h=1e-5, rtol=1e-3, atol=1e-7):
    """Compare analytic gradients with central differences of ``loss()``.

    ``arrays`` maps names to parameter arrays that ``loss`` reads (perturbed in
    place); ``analytic`` maps the same names to gradients.  Returns a list of
    (name, flat index, fd, analytic) for every entry outside tolerance, and the
    number of entries checked.
    """
    bad = []
    count = 0
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        g = np.asarray(analytic[name]).reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            lp = loss()
            flat[k] = old - h
            lm = loss()
            flat[k] = old
            fd = (lp - lm) / (2 * h)
            err = abs(fd - g[k])
            count += 1
            if not (err <= rtol * max(abs(fd), abs(g[k])) or err <= atol):
                bad.append((name, k, fd, g[k]))
    return bad, count


# acceptance results, printed by the terminal-summary hook in conftest.py
ACCEPTANCE: list[tuple[str, bool, str]] = []


def record(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.append((name, bool(ok), detail))
    print(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")
