import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from fogkit import depth
from fogkit.core import ScalarMap, rgb_to_lab
from fogkit.depth import (CITYSCAPES_CAMERA, CameraModel, PlaneFit, SuperpixelPartition, complete_depth,
                          detect_outliers, disparity_to_distance, fit_planes, slic,
                          transmittance_from_distance)


def uniform_lab(h, w, value=(50.0, 0.0, 0.0)):
    return np.broadcast_to(np.array(value), (h, w, 3)).astype(np.float64)


def one_partition(h, w):
    return SuperpixelPartition(np.zeros((h, w), dtype=np.int64), 1)


# -- camera ---------------------------------------------------------------

def test_camera_validation_and_loading(tmp_path):
    with pytest.raises(ValueError):
        CameraModel(0.0, 0.2, (0, 0))
    (tmp_path / "flat.json").write_text(json.dumps({"focal_length": 100, "baseline": 0.5,
                                                    "principal_point": [1, 2]}))
    assert depth.load_camera(tmp_path / "flat.json") == CameraModel(100.0, 0.5, (1.0, 2.0))
    (tmp_path / "cs.json").write_text(json.dumps({"extrinsic": {"baseline": 0.209313},
                                                  "intrinsic": {"fx": 2262.52, "u0": 1096.98, "v0": 513.137}}))
    assert depth.load_camera(tmp_path / "cs.json") == CITYSCAPES_CAMERA


def test_cityscapes_disparity_to_distance():
    dist = disparity_to_distance(np.array([4.736]), CITYSCAPES_CAMERA)
    assert dist[0] == pytest.approx(100.0, abs=0.05)


# -- SLIC -----------------------------------------------------------------

def assert_valid_partition(part):
    ids = np.unique(part.assignment)
    assert ids.tolist() == list(range(part.k))
    for i in ids:
        _, n = ndimage.label(part.assignment == i)
        assert n == 1, f"superpixel {i} is not 4-connected"


def test_slic_single_superpixel():
    part = slic(uniform_lab(10, 12), 1)
    assert part.k == 1 and np.all(part.assignment == 0)


def test_slic_two_tone_follows_edge():
    lab = uniform_lab(20, 20).copy()
    lab[:, 10:] = (80.0, 20.0, -10.0)
    part = slic(lab, 2, compactness=1e-3)
    assert part.k == 2
    assert np.unique(part.assignment[:, :10]).size == 1
    assert np.unique(part.assignment[:, 10:]).size == 1
    assert part.assignment[0, 0] != part.assignment[0, 19]


def test_slic_uniform_tiling_and_determinism():
    lab = uniform_lab(128, 128)
    part = slic(lab, 16)
    assert part.k <= 16
    areas = np.bincount(part.assignment.ravel())
    n = 128 * 128 / 16
    assert areas.min() >= n / 2 and areas.max() <= 2 * n
    assert np.array_equal(part.assignment, slic(lab, 16).assignment)
    assert_valid_partition(part)


def test_slic_k_too_large():
    with pytest.raises(ValueError):
        slic(uniform_lab(3, 3), 10)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40))
def test_slic_partition_invariants(seed, k):
    img = np.random.default_rng(seed).random((24, 30, 3))
    part = slic(rgb_to_lab(img), k)
    assert part.k <= k
    assert_valid_partition(part)


# -- outliers ---------------------------------------------------------------

def test_outliers_constant_unchanged():
    d = ScalarMap(np.full((5, 5), 7.0))
    assert detect_outliers(d, one_partition(5, 5)).mask.all()


def test_outlier_spike_removed():
    vals = np.arange(25, dtype=np.float64).reshape(5, 5) * 0.1 + 10.0
    vals[2, 2] = 10 * np.median(vals)
    out = detect_outliers(ScalarMap(vals), one_partition(5, 5))
    assert not out.mask[2, 2]
    assert out.mask.sum() == 24


def test_outliers_fully_invalid():
    d = ScalarMap(np.ones((4, 4)), np.zeros((4, 4), bool))
    assert not detect_outliers(d, one_partition(4, 4)).mask.any()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_outliers_never_remove_more_than_half(seed):
    rng = np.random.default_rng(seed)
    vals = rng.standard_cauchy((12, 12))
    mask = rng.random((12, 12)) < 0.8
    part = SuperpixelPartition((np.arange(144).reshape(12, 12) % 3).astype(np.int64), 3)
    out = detect_outliers(ScalarMap(vals, mask), part)
    for sp in range(3):
        sel = part.assignment == sp
        assert (out.mask & sel).sum() >= 0.5 * (mask & sel).sum()


def test_outliers_dimension_mismatch():
    with pytest.raises(ValueError):
        detect_outliers(ScalarMap(np.ones((3, 3))), one_partition(4, 4))


# -- planes -------------------------------------------------------------------

def plane_grid(h, w, a=2.0, b=3.0, c=1.0):
    v, u = np.mgrid[0:h, 0:w]
    return a * u + b * v + c


def test_exact_plane_recovered():
    fit = fit_planes(ScalarMap(plane_grid(8, 9)), one_partition(8, 9))[0]
    assert fit.ok
    assert np.allclose(fit.coefficients, (2.0, 3.0, 1.0), atol=1e-9)


def test_plane_with_gross_outliers():
    rng = np.random.default_rng(3)
    d = plane_grid(20, 20, 0.1, -0.05, 30.0)
    bad = rng.random(d.shape) < 0.3
    d = np.where(bad, rng.uniform(0, 100, d.shape), d)
    fit = fit_planes(ScalarMap(d), one_partition(20, 20))[0]
    clean = ~bad & (np.abs(d - plane_grid(20, 20, 0.1, -0.05, 30.0)) < 1e-9)
    v, u = np.nonzero(clean)
    oracle = np.linalg.lstsq(np.stack([u, v, np.ones_like(u)], 1).astype(float), d[clean], rcond=None)[0]
    assert np.abs(np.array(fit.coefficients) - oracle).max() <= 1e-3


def test_two_valid_pixels_degenerate():
    mask = np.zeros((5, 5), bool)
    mask[0, :2] = True
    fit = fit_planes(ScalarMap(np.ones((5, 5)), mask), one_partition(5, 5))[0]
    assert fit.status == "degenerate"


def test_collinear_points_degenerate():
    mask = np.zeros((6, 20), bool)
    mask[3] = True
    fit = fit_planes(ScalarMap(np.ones((6, 20)), mask), one_partition(6, 20))[0]
    assert not fit.ok


def test_ransac_determinism_and_iteration_monotonicity():
    rng = np.random.default_rng(11)
    d = plane_grid(16, 16, 0.2, 0.1, 5.0) + np.where(rng.random((16, 16)) < 0.45, rng.uniform(-20, 20, (16, 16)), 0)
    part = one_partition(16, 16)
    a = fit_planes(ScalarMap(d), part, iters=50, seed=4)[0]
    b = fit_planes(ScalarMap(d), part, iters=50, seed=4)[0]
    assert a.coefficients == b.coefficients
    counts = [fit_planes(ScalarMap(d), part, iters=n, seed=4)[0].hypothesis_inliers for n in (1, 5, 20, 100, 400)]
    assert counts == sorted(counts)


# -- completion -----------------------------------------------------------------

def test_complete_fully_valid_is_conversion():
    d = ScalarMap(np.full((4, 4), 5.0))
    part = one_partition(4, 4)
    dist = complete_depth(d, fit_planes(d, part), part, CameraModel(100.0, 0.5, (0, 0)))
    assert dist.fully_valid
    assert np.allclose(dist.values, 10.0)


def test_hole_filled_from_plane():
    vals = plane_grid(10, 10, 0.1, 0.2, 5.0)
    mask = np.ones((10, 10), bool)
    mask[4:6, 4:6] = False
    part = one_partition(10, 10)
    d = ScalarMap(vals, mask)
    cam = CameraModel(100.0, 1.0, (0, 0))
    dist = complete_depth(d, fit_planes(d, part), part, cam)
    assert np.allclose(dist.values[4:6, 4:6], 100.0 / vals[4:6, 4:6], rtol=1e-9)


def test_degenerate_borrows_nearest_plane_and_all_degenerate_errors():
    vals = np.full((6, 12), 4.0)
    mask = np.ones((6, 12), bool)
    mask[:, 8:] = False
    assign = np.zeros((6, 12), dtype=np.int64)
    assign[:, 4:8] = 1
    assign[:, 8:] = 2
    part = SuperpixelPartition(assign, 3)
    d = ScalarMap(vals, mask)
    fits = fit_planes(d, part, min_inliers=3)
    assert [f.ok for f in fits] == [True, True, False]
    dist = complete_depth(d, fits, part, CameraModel(10.0, 1.0, (0, 0)))
    assert np.allclose(dist.values, 2.5)
    with pytest.raises(ValueError, match="no depth support"):
        complete_depth(d, [PlaneFit((0, 0, 0), np.empty(0, int), "degenerate")] * 3, part,
                       CameraModel(10.0, 1.0, (0, 0)))


def test_distance_clamp():
    dist = disparity_to_distance(np.array([0.0, 1e-6, 1e6]), CameraModel(1.0, 1.0, (0, 0)))
    assert dist.tolist() == [1000.0, 1000.0, 2.0]


# -- transmittance -----------------------------------------------------------------

def test_transmittance_examples():
    d = ScalarMap(np.array([[100.0, 149.8]]))
    assert np.all(transmittance_from_distance(d, 0.0).values == 1.0)
    assert transmittance_from_distance(d, 0.01).values[0, 0] == pytest.approx(np.exp(-1.0), abs=1e-15)
    assert transmittance_from_distance(d, 0.02).values[0, 1] == pytest.approx(0.0500, abs=5e-5)
    with pytest.raises(ValueError):
        transmittance_from_distance(d, -1.0)


_betas = st.one_of(st.just(0.0), st.floats(1e-9, 0.1))


@given(_betas, _betas, st.floats(2, 1000), st.floats(2, 1000))
def test_transmittance_monotone(b1, b2, l1, l2):
    t = lambda b, l: transmittance_from_distance(ScalarMap(np.array([[l]])), b).values[0, 0]
    if b1 <= b2 and l1 <= l2:
        assert t(b1, l1) >= t(b2, l2)
    assert (t(b1, l1) == 1.0) == (b1 * l1 == 0.0)


def test_complete_distance_on_toy_disparity(toy_scene):
    from fogkit import toy
    rng = np.random.default_rng(0)
    disp = toy.disparity_from_distance(toy_scene.distance, toy.TOY_CAMERA, rng, 0.1, 0.05)
    dist = depth.complete_distance(disp, rgb_to_lab(toy_scene.image), toy.TOY_CAMERA, superpixels=16)
    assert dist.fully_valid
    assert dist.values.min() >= 2.0 and dist.values.max() <= 1000.0
    near = toy_scene.distance < 50
    rel = np.abs(dist.values[near] - toy_scene.distance[near]) / toy_scene.distance[near]
    assert np.median(rel) < 0.05
