import numpy as np
import pytest

from helpers import fd_mismatches, small_rig, small_scene
from seamgs.calib import CameraRig, DualFisheyeCalib
from seamgs.geom import Pose, erp_jacobian, erp_project
from seamgs.raster import (
    COV2D_REG,
    project_erp,
    rasterize,
    rasterize_backward,
    render_ideal,
    render_stitched,
    stitched_backward,
)
from seamgs.scene import GaussianScene, logit
from seamgs.synth import make_toy_scene

W, H = 64, 32


def one_splat(mean, scale=0.1, opacity=0.99, color=(0.8, 0.4, 0.2)):
    return GaussianScene([mean], np.full((1, 3), np.log(scale)), [[1.0, 0, 0, 0]],
                         [logit(opacity)], logit(np.array([color])))


# projection

def test_projection_centre():
    p = project_erp(np.array([[1.0, 0, 0]]), np.eye(3)[None] * 0.01, np.array([0.5]), 256, 128)
    np.testing.assert_allclose(p.centers[0], [128, 64])


@pytest.mark.parametrize("d", [1.0, 2.0])
def test_projected_covariance_on_axis(d):
    s = 0.05
    p = project_erp(np.array([[d, 0, 0]]), np.eye(3)[None] * s**2, np.array([0.5]), 256, 128)
    expected = (s / d) ** 2 * (256 / (2 * np.pi)) ** 2 + COV2D_REG
    np.testing.assert_allclose(p.cov2d[0], np.eye(2) * expected, rtol=1e-10)


def test_jacobian_finite_differences():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(100, 3))
    J = erp_jacobian(v, 256, 128)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (np.stack(erp_project(v + e, 256, 128), -1) - np.stack(erp_project(v - e, 256, 128), -1)) / (2 * h)
        np.testing.assert_allclose(J[..., k], fd, rtol=1e-5, atol=1e-6)


def test_culling():
    cov = np.eye(3)[None] * 1e-4
    assert not project_erp(np.array([[0.01, 0, 0]]), cov, np.array([0.5]), W, H).valid[0]
    assert not project_erp(np.array([[1.0, 0, 0]]), cov, np.array([1e-3]), W, H).valid[0]
    assert project_erp(np.array([[1.0, 0, 0]]), cov, np.array([0.5]), W, H).valid[0]


# forward

def test_all_culled_is_black():
    sc = one_splat([0.01, 0, 0])
    assert not np.any(render_ideal(sc, Pose(), W, H))
    assert not np.any(render_ideal(GaussianScene.empty(), Pose(), W, H))


def test_single_splat_peak_and_monotone():
    img = render_ideal(one_splat([1.0, 0, 0], 0.05), Pose(), 256, 128)
    lum = img.sum(-1)
    r, c = np.unravel_index(np.argmax(lum), lum.shape)
    # the peak sits on the 2x2 pixels around (W/2, H/2)
    assert r in (63, 64) and c in (127, 128)
    assert lum[64, 128] == pytest.approx(lum[63, 127], rel=1e-9)
    row = lum[64, 128:140]
    assert np.all(np.diff(row) <= 0)


def test_two_splat_compositing():
    red = (1.0, 0.0, 0.0)
    blue = (0.0, 0.0, 1.0)
    sc = GaussianScene([[1.0, 0, 0], [2.0, 0, 0]], np.full((2, 3), np.log(0.5)),
                       [[1.0, 0, 0, 0]] * 2, [logit(0.99)] * 2, logit(np.clip([red, blue], 1e-9, 1 - 1e-9)))
    img, rec = rasterize(sc, np.zeros(3), np.eye(3), W, H, return_record=True)
    # oracle: scalar front-to-back compositing at pixel (32, 16), centre offset (0.5, 0.5)
    proj = rec.raster.proj
    out = np.zeros(3)
    T = 1.0
    for i in (0, 1):
        a, b, c = proj.conic[i]
        d = np.array([32.5, 16.5]) - proj.centers[i]
        alpha = min(0.99, sc.opacities[i] * np.exp(-0.5 * (a * d[0] ** 2 + 2 * b * d[0] * d[1] + c * d[1] ** 2)))
        out += sc.colors[i] * alpha * T
        T *= 1 - alpha
    np.testing.assert_allclose(img[16, 32], out, rtol=1e-12)
    # close to 0.99 red + 0.01 * 0.99 blue (the pixel centre is half a pixel off the peak)
    assert img[16, 32, 0] > 0.97 and 0.005 < img[16, 32, 2] < 0.03


def test_horizontal_wrap():
    sc = one_splat([-1.0, 0.02, 0], 0.05)
    img = render_ideal(sc, Pose(), W, H)
    assert img[H // 2, 0].sum() > 0.05 and img[H // 2, -1].sum() > 0.05


def test_render_bounds_and_permutation():
    sc = make_toy_scene("random", 200, 1)
    img = render_ideal(sc, Pose(), W, H)
    assert img.min() >= 0 and np.all(img <= sc.colors.max(0) + 1e-12)
    perm = np.random.default_rng(0).permutation(200)
    np.testing.assert_array_equal(render_ideal(sc.permuted(perm), Pose(), W, H), img)
    np.testing.assert_array_equal(render_ideal(sc, Pose(), W, H), img)


def test_azimuth_window_blanks_columns():
    sc = make_toy_scene("random", 200, 1)
    img = rasterize(sc, np.zeros(3), np.eye(3), W, H, azimuth_window=(-np.pi / 2, np.pi / 2))
    assert not np.any(img[:, : W // 4]) and not np.any(img[:, 3 * W // 4:])
    np.testing.assert_array_equal(img[:, W // 4: 3 * W // 4],
                                  render_ideal(sc, Pose(), W, H)[:, W // 4: 3 * W // 4])


def test_zero_calibration_stitched_matches_ideal():
    sc = make_toy_scene("room", 300, 2)
    pose = small_rig(5).ideal_pose
    rig = CameraRig(pose, DualFisheyeCalib.zeros())
    a = render_stitched(sc, rig, 128, 64)
    b = render_ideal(sc, pose, 128, 64)
    keep = np.ones(128, bool)
    keep[[31, 32, 95, 96]] = False
    assert np.max(np.abs(a - b)[:, keep]) < 1e-5


def test_gap_parallax_shift():
    # a thin vertical bar at 0.5 m straight to the left (theta = +90 deg, the seam)
    w, h = 1024, 512
    sc = GaussianScene([[0.0, 0.5, 0.0]], np.log([[0.004, 0.004, 0.3]]), [[1.0, 0, 0, 0]],
                       [logit(0.99)], logit(np.array([[0.9, 0.9, 0.9]])))
    c = DualFisheyeCalib.zeros()
    c.dt_front = np.array([0.0, 0.02, 0.0])
    c.dt_back = np.array([0.0, 0.0, 0.0])
    rig = CameraRig(Pose(), c)
    img = render_stitched(sc, rig, w, h, sides=("front",), )
    ref = rasterize(sc, np.array([0, 0.02, 0]), np.eye(3), w, h)
    np.testing.assert_array_equal(img[:, : 3 * w // 4], ref[:, : 3 * w // 4])
    # the splat is seen from 0.48 m instead of 0.5 m; move it off the seam to measure the shift
    sc.means[0] = [0.5, 0.5, 0.0]
    img = render_stitched(sc, rig, w, h, sides=("front",))
    ideal = render_ideal(sc, Pose(), w, h)
    col = lambda im: np.sum(im[h // 2].sum(-1) * (np.arange(w) + 0.5)) / im[h // 2].sum()
    shift = col(img) - col(ideal)
    expected = (np.arctan2(0.48, 0.5) - np.arctan2(0.5, 0.5)) * w / (2 * np.pi)
    assert shift == pytest.approx(expected, rel=0.02)


def test_far_field_gap_is_invisible():
    sc = make_toy_scene("far", 400, 0)
    c = DualFisheyeCalib.zeros()
    c.dt_front = np.array([0.02, -0.02, 0.02])
    c.dt_back = np.array([-0.02, 0.02, -0.02])
    rig = CameraRig(Pose(), c)
    a = render_stitched(sc, rig, 128, 64)
    b = render_ideal(sc, Pose(), 128, 64)
    keep = np.ones(128, bool)
    keep[[31, 32, 95, 96]] = False
    assert np.mean(np.abs(a - b)[:, keep]) < 1e-3


# backward

def test_zero_upstream_gradient():
    sc = small_scene()
    _, rec = render_ideal(sc, Pose(), W, H, return_record=True)
    g = rasterize_backward(rec, np.zeros((H, W, 3)))
    assert all(not np.any(v) for v in g.as_dict().values())


def test_ideal_gradients_finite_differences():
    sc = small_scene(5, 7)
    pose = small_rig(7).ideal_pose
    wimg = np.random.default_rng(7).normal(size=(H, W, 3))
    _, rec = render_ideal(sc, pose, W, H, return_record=True)
    g = rasterize_backward(rec, wimg)
    loss = lambda: float(np.sum(render_ideal(sc, pose, W, H) * wimg))
    bad, n = fd_mismatches(loss, sc.params(), g.as_dict())
    assert n == 5 * 14 and not bad, bad


def test_stitched_gradients_finite_differences():
    sc = small_scene(10, 3)
    rig = small_rig(3)
    wimg = np.random.default_rng(3).normal(size=(H, W, 3))
    _, rec = render_stitched(sc, rig, W, H, return_record=True)
    sg, cg = stitched_backward(rec, wimg)
    loss = lambda: float(np.sum(render_stitched(sc, rig, W, H) * wimg))
    bad, _ = fd_mismatches(loss, {**sc.params(), **rig.calib.params()}, {**sg.as_dict(), **cg})
    assert not bad, bad


def test_gradient_oracle_flags_wrong_gradients():
    sc = small_scene(5, 7)
    pose = Pose()
    wimg = np.random.default_rng(7).normal(size=(H, W, 3))
    _, rec = render_ideal(sc, pose, W, H, return_record=True)
    g = rasterize_backward(rec, wimg)
    loss = lambda: float(np.sum(render_ideal(sc, pose, W, H) * wimg))
    bad, _ = fd_mismatches(loss, {"means": sc.means}, {"means": g.means * 1.01})
    assert bad


def test_colour_gradient_is_mass():
    sc = one_splat([1.0, 0.3, 0.1], 0.08, opacity=0.7)
    img, rec = render_ideal(sc, Pose(), W, H, return_record=True)
    grad = np.zeros((H, W, 3))
    grad[..., 1] = 1.0
    g = rasterize_backward(rec, grad)
    c = sc.colors[0]
    mass = img[..., 1].sum() / c[1]
    assert g.color_logits[0, 1] == pytest.approx(mass * c[1] * (1 - c[1]), rel=1e-10)
    assert g.color_logits[0, 0] == 0.0
