import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import lab_reference
from fogkit.core import (FOG_BETA_MIN, FogParams, ScalarMap, SemanticLabeling, as_rgb, beta_to_mor,
                         fog_regime, lab_to_rgb, mor_to_beta, rgb_to_lab)


def px(rgb):
    return np.array(rgb, dtype=np.float64).reshape(1, 1, 3)


def test_black_white_gray():
    assert np.allclose(rgb_to_lab(px((0, 0, 0))), 0.0, atol=1e-12)
    white = rgb_to_lab(px((1, 1, 1)))[0, 0]
    assert white[0] == pytest.approx(100.0, abs=1e-9)
    assert np.allclose(white[1:], 0.0, atol=1e-9)
    gray = rgb_to_lab(px((0.5, 0.5, 0.5)))[0, 0]
    assert gray[0] == pytest.approx(53.39, abs=0.01)
    assert np.allclose(gray[1:], 0.0, atol=1e-9)


@given(st.tuples(*[st.floats(0, 1)] * 3))
def test_lab_matches_reference_formulas(rgb):
    ours = rgb_to_lab(px(rgb))[0, 0]
    ref = lab_reference(rgb)
    assert np.allclose(ours, ref, atol=2e-3)


@settings(max_examples=200)
@given(st.tuples(*[st.floats(0, 1)] * 3))
def test_lab_round_trip_within_one_level(rgb):
    back = lab_to_rgb(rgb_to_lab(px(rgb)))[0, 0]
    assert np.all(np.abs(back - np.array(rgb)) <= 1 / 255)


def test_lab_preserves_shape():
    img = np.random.default_rng(0).random((5, 7, 3))
    assert rgb_to_lab(img).shape == (5, 7, 3)


def test_mor_examples():
    assert mor_to_beta(1000.0) == pytest.approx(2.996e-3, rel=1e-15)
    assert beta_to_mor(0.02) == pytest.approx(149.8, rel=1e-12)


@given(st.floats(1e-3, 1e6))
def test_mor_round_trip(x):
    assert mor_to_beta(beta_to_mor(x)) == pytest.approx(x, rel=1e-12)
    assert beta_to_mor(mor_to_beta(x)) == pytest.approx(x, rel=1e-12)


@given(st.floats(1e-3, 1e5), st.floats(1e-3, 1e5))
def test_mor_strictly_decreasing(a, b):
    if a < b:
        assert mor_to_beta(a) > mor_to_beta(b)


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_mor_domain_errors(bad):
    with pytest.raises(ValueError):
        mor_to_beta(bad)
    with pytest.raises(ValueError):
        beta_to_mor(bad)


def test_fog_regime():
    assert fog_regime(0.0) == "clear"
    assert fog_regime(0.001) == "mist"
    assert fog_regime(FOG_BETA_MIN) == "fog"
    assert FogParams(0.01, (1, 1, 1)).regime == "fog"
    with pytest.raises(ValueError):
        FogParams(-0.1, (1, 1, 1))


def test_as_rgb_validation():
    with pytest.raises(ValueError):
        as_rgb(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        as_rgb(np.full((2, 2, 3), 1.5))


def test_scalar_map_mask_and_immutability():
    m = ScalarMap(np.array([[1.0, np.nan]]))
    assert m.mask.tolist() == [[True, False]]
    assert not m.fully_valid
    with pytest.raises(ValueError):
        m.values[0, 0] = 3.0


def test_semantic_labeling_class_map():
    lab = SemanticLabeling(np.array([[0, 1], [2, 3]]), 19, True, {0: 10, 1: 13, 2: 13})
    assert lab.class_map().tolist() == [[10, 13], [13, 255]]
    with pytest.raises(ValueError):
        SemanticLabeling(np.array([[-1]]), 2)
