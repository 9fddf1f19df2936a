import numpy as np
import pytest

from seamgs.calib import CameraRig, DualFisheyeCalib
from seamgs.geom import Pose, pixel_directions
from seamgs.raster import render_ideal
from seamgs.scene import GaussianScene, logit
from seamgs.synth import (
    DistortionField,
    FisheyeSpec,
    capture,
    fisheye_jacobian,
    fisheye_project,
    fisheye_unproject,
    generate_dataset,
    load_dataset,
    make_toy_scene,
    render_fisheye,
    sample_gap,
    save_dataset,
    stitch_pair,
)


@pytest.mark.parametrize("kind", ["room", "ring", "random", "far"])
def test_toy_scene_seeded(kind):
    a = make_toy_scene(kind, 300, 4)
    b = make_toy_scene(kind, 300, 4)
    assert len(a) == 300
    for k in a.params():
        np.testing.assert_array_equal(a.params()[k], b.params()[k])
    assert not np.array_equal(a.means, make_toy_scene(kind, 300, 5).means)


def test_room_geometry_and_texture():
    sc = make_toy_scene("room", 500, 0)
    assert np.min(np.linalg.norm(sc.means, axis=1)) > 0.3
    assert np.all(np.abs(sc.means) <= [2.0, 2.0, 1.5])
    img = render_ideal(sc, Pose(), 256, 128)
    assert np.all(img.reshape(-1, 3).var(axis=0) > 0.005)


def test_toy_scene_errors():
    with pytest.raises(ValueError):
        make_toy_scene("room", 0)
    with pytest.raises(ValueError):
        make_toy_scene("cave", 10)


def test_sample_gap_statistics():
    draws = np.array([np.concatenate(sample_gap(s)) for s in range(10_000)])
    assert np.all(np.abs(draws) <= 0.02)
    sigma = 0.04 / np.sqrt(12) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0)) < 3 * sigma)
    np.testing.assert_array_equal(sample_gap(7)[0], sample_gap(7)[0])


# fisheye model

def test_fisheye_circle_and_round_trip():
    spec = FisheyeSpec(256, 185.0)
    psi = np.deg2rad(92.5)
    col, row, p = fisheye_project(np.array([np.cos(psi), np.sin(psi), 0.0]), spec)
    assert np.hypot(col - 128, row - 128) == pytest.approx(128, abs=1e-9)
    assert p == pytest.approx(psi)
    col, row, _ = fisheye_project(np.array([1.0, 0, 0]), spec)
    assert (col, row) == (128, 128)
    rng = np.random.default_rng(0)
    cr = rng.uniform(40, 216, (100, 2))
    d = fisheye_unproject(cr[:, 0], cr[:, 1], spec)
    c2, r2, _ = fisheye_project(d, spec)
    np.testing.assert_allclose(np.stack([c2, r2], -1), cr, atol=1e-9)
    with pytest.raises(ValueError):
        FisheyeSpec(256, 180.0)


def test_fisheye_image_axes():
    spec = FisheyeSpec(256)
    # +y (left) maps left of centre, +z (up) maps above centre
    c, r, _ = fisheye_project(np.array([1.0, 0.3, 0.2]), spec)
    assert c < 128 and r < 128


def test_fisheye_jacobian_finite_differences():
    spec = FisheyeSpec(256)
    rng = np.random.default_rng(1)
    v = rng.normal(size=(100, 3))
    v[:, 0] = np.abs(v[:, 0]) + 0.1
    v = np.concatenate([v, [[1.0, 1e-5, -2e-5]]])
    J = fisheye_jacobian(v, spec)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        cp, rp, _ = fisheye_project(v + e, spec)
        cm, rm, _ = fisheye_project(v - e, spec)
        fd = np.stack([(cp - cm), (rp - rm)], -1) / (2 * h)
        np.testing.assert_allclose(J[..., k], fd, rtol=1e-5, atol=1e-5)


def test_fisheye_render_on_axis_splat():
    sc = GaussianScene([[2.0, 0, 0]], np.full((1, 3), np.log(0.05)), [[1.0, 0, 0, 0]],
                       [logit(0.9)], logit(np.array([[0.5, 0.5, 0.5]])))
    img = render_fisheye(sc, Pose(), FisheyeSpec(64))
    lum = img.sum(-1)
    r, c = np.unravel_index(np.argmax(lum), lum.shape)
    assert r in (31, 32) and c in (31, 32)
    assert img[0, 0].sum() == 0.0


def test_fisheye_warp_matches_erp_on_smooth_scene():
    # the ring keeps content away from the poles, where the ERP footprint linearisation is poor
    sc = make_toy_scene("ring", 300, 3)
    sc.log_scales += np.log(2.0)  # larger splats: smooth content
    pose = Pose(translation=[0.1, -0.1, 0.05])
    img, misses = capture(sc, CameraRig(pose, DualFisheyeCalib.zeros()), FisheyeSpec(256), 256, 128)
    assert misses == 0
    assert np.mean(np.abs(img - render_ideal(sc, pose, 256, 128))) < 0.01


def test_stitch_zero_displacement_matches_ideal():
    sc = make_toy_scene("room", 500, 0)
    pose = Pose(translation=[0.3, 0.2, -0.1])
    img, misses = capture(sc, CameraRig(pose, DualFisheyeCalib.zeros()), FisheyeSpec(256), 256, 128)
    assert misses == 0
    assert np.mean(np.abs(img - render_ideal(sc, pose, 256, 128))) < 0.01


def test_stitch_counts_rays_outside_fov():
    spec = FisheyeSpec(64, 185.0)
    black = np.zeros((64, 64, 3))
    # a large distortion pushes rays near the seam past the 92.5 deg image circle
    fld = DistortionField(np.zeros((3, 9)))
    fld.coeffs[2, 0] = 0.2
    with pytest.warns(UserWarning):
        _, misses = stitch_pair(black, black, spec, 64, 32, fields={"front": fld})
    assert misses > 0


def test_seam_discontinuity_from_lateral_gap():
    # a vertical bar 0.5 m away, just in front of the +90 deg seam
    w, h = 512, 256
    ang = np.deg2rad(85.0)
    sc = GaussianScene([[0.5 * np.cos(ang), 0.5 * np.sin(ang), 0.0]], np.log([[0.004, 0.004, 0.2]]),
                       [[1.0, 0, 0, 0]], [logit(0.99)], logit(np.array([[0.9, 0.9, 0.9]])))
    c = DualFisheyeCalib.zeros()
    c.dt_front = np.array([0.02, 0.0, 0.0])
    spec = FisheyeSpec(1024)
    img, _ = capture(sc, CameraRig(Pose(), c), spec, w, h)
    ref, _ = capture(sc, CameraRig(Pose(), DualFisheyeCalib.zeros()), spec, w, h)
    col = lambda im: np.sum(im[h // 2].sum(-1) * (np.arange(w) + 0.5)) / im[h // 2].sum()
    # the front camera moved 2 cm across the line of sight: parallax angle of the bar, in pixels
    p = 0.5 * np.array([np.cos(ang), np.sin(ang)])
    expected = (np.arctan2(p[1], p[0] - 0.02) - ang) * w / (2 * np.pi)
    assert col(img) - col(ref) == pytest.approx(expected, rel=0.05)


def test_distortion_field_peak_amplitude():
    f = DistortionField.random(3, np.deg2rad(0.5))
    d = pixel_directions(181, 91).reshape(-1, 3)
    peak = np.max(np.linalg.norm(f(d), axis=-1))
    assert peak == pytest.approx(np.deg2rad(0.5), rel=0.02)
    assert np.count_nonzero(f.coeffs, axis=1).max() <= 3


# datasets

@pytest.fixture(scope="module")
def small_dataset():
    sc = make_toy_scene("room", 150, 0)
    return generate_dataset(sc, n_views=6, seed=11, width=64, height=32)


def test_dataset_split_and_labels(small_dataset):
    ds = small_dataset
    assert ds.split == {"train": [0, 2, 4], "test": [1, 3, 5]}
    assert ds.images[0].shape == (32, 64, 3) and ds.images[0].dtype == np.float32
    assert np.all(np.abs(ds.gt_calib.dt_front) <= 0.02)
    assert ds.gt_calib.grid_rms() > 0
    for p in ds.poses:
        assert np.min(np.linalg.norm(ds.scene.means - p.translation, axis=1)) >= 0.3


def test_default_dataset_size():
    sc = make_toy_scene("room", 50, 0)
    ds = generate_dataset(sc, seed=0, width=32, height=16, fisheye_side=32)
    assert len(ds) == 50 and len(ds.split["train"]) == 25 and len(ds.split["test"]) == 25


def test_dataset_is_reproducible(small_dataset):
    again = generate_dataset(make_toy_scene("room", 150, 0), n_views=6, seed=11, width=64, height=32)
    for a, b in zip(small_dataset.images, again.images):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(small_dataset.gt_calib.dt_back, again.gt_calib.dt_back)


def test_zero_calibration_dataset_is_clean():
    sc = make_toy_scene("room", 150, 0)
    ds = generate_dataset(sc, n_views=4, seed=2, width=64, height=32, gap=(np.zeros(3), np.zeros(3)),
                          lens_deg=0.0)
    assert ds.gt_calib.grid_rms() == 0.0
    for a, b in zip(ds.images, ds.clean):
        np.testing.assert_array_equal(a, b)


def test_dataset_round_trip(small_dataset, tmp_path):
    save_dataset(small_dataset, tmp_path / "ds")
    assert (tmp_path / "ds" / "views" / "000.pfm").exists()
    assert (tmp_path / "ds" / "views" / "000.png").exists()
    back = load_dataset(tmp_path / "ds")
    assert back.split == small_dataset.split and back.seed == 11
    for a, b in zip(back.images, small_dataset.images):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(back.poses, small_dataset.poses):
        np.testing.assert_array_equal(a.translation, b.translation)
    np.testing.assert_array_equal(back.gt_calib.grid_front.cells, small_dataset.gt_calib.grid_front.cells)
