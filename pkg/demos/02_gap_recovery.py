"""Recover the two camera offsets from 24 imperfect panoramas.

A 500-splat room is captured by a simulated dual-fisheye rig whose front and
back cameras sit 1-1.4 cm away from the nominal centre.  Training starts from
a slightly perturbed scene and an all-zero calibration; the gap estimates are
printed at every snapshot and converge to within a fraction of a millimetre.

Runs in well under a minute per 1000 iterations on one core.
"""
import sys

import numpy as np

from seamgs.metrics import evaluate, gap_mae
from seamgs.optim import TrainConfig, train
from seamgs.synth import generate_dataset, make_toy_scene

GAP_FRONT = np.array([1.0, -0.8, 0.5]) / 100
GAP_BACK = np.array([-1.2, 0.3, -0.7]) / 100


def fmt(v):
    return " ".join(f"{x:+.3f}" for x in 100 * np.asarray(v))


def main(iterations=1000):
    scene = make_toy_scene("room", 500, seed=0)
    ds = generate_dataset(scene, n_views=48, seed=7, gap=(GAP_FRONT, GAP_BACK), lens_deg=0.0)
    print(f"{len(ds.split['train'])} training views at {ds.size[0]}x{ds.size[1]}")

    rng = np.random.default_rng(5)
    init = scene.copy()
    init.means += rng.normal(scale=0.005, size=init.means.shape)
    init.color_logits += rng.normal(scale=0.1, size=init.color_logits.shape)

    def show(state):
        c = state.calib
        print(f"it {state.step:>5d}  front [{fmt(c.dt_front)}]  back [{fmt(c.dt_back)}] cm  "
              f"MAE {gap_mae(c, ds.gt_calib):.3f} cm")

    print(f"truth     front [{fmt(GAP_FRONT)}]  back [{fmt(GAP_BACK)}] cm")
    state = train(init, ds, TrainConfig(iterations=iterations, snapshot_every=max(iterations // 10, 1)),
                  on_snapshot=show)
    rep = evaluate(state.scene, state.calib, ds, "ideal")
    print(f"ideal-mode test PSNR {rep.mean_psnr:.2f} dB, SSIM {rep.mean_ssim:.4f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 1000)
