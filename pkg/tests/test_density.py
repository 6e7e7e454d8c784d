import numpy as np
import pytest

from fogkit import density, toy
from fogkit.density import (DensityModel, extract_features, feature_ablation, fit_density_model,
                            pairwise_agreement, predict_density, rank_by_density, spearman)
from fogkit.optics import LabeledScene, simulate


def linear_samples(rng, n=60, d=5):
    w = rng.normal(size=d)
    X = rng.normal(size=(n, d))
    betas = np.repeat([0.0, 0.005, 0.01, 0.02], n // 4)
    X[:, 0] = betas * 100.0  # makes beta exactly linear in the features
    return [(x, b) for x, b in zip(X, betas)], w


def test_exact_recovery_on_linear_target():
    samples, _ = linear_samples(np.random.default_rng(0))
    m = fit_density_model(samples, lambda_ridge=0.0)
    assert m.residual_max < 1e-12
    assert np.allclose(m.predict(np.array([f for f, _ in samples])), [b for _, b in samples], atol=1e-12)


def test_ridge_matches_augmented_least_squares():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(40, 4))
    y = rng.choice([0.0, 0.005, 0.01, 0.02], 40)
    lam = 0.3
    m = fit_density_model(list(zip(X, y)), lam)
    Z = (X - X.mean(0)) / X.std(0)
    n = len(y)
    A = np.vstack([Z / np.sqrt(n), np.sqrt(lam) * np.eye(4)])
    rhs = np.concatenate([(y - y.mean()) / np.sqrt(n), np.zeros(4)])
    w, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    assert np.allclose(m.weights, w, atol=1e-12)
    assert m.bias == pytest.approx(y.mean())


def test_fit_errors():
    with pytest.raises(ValueError):
        fit_density_model([(np.ones(3), 0.01), (np.zeros(3), 0.01)])
    X = np.ones((8, 3))
    X[:, 0] = np.arange(8)
    with pytest.raises(ValueError):
        fit_density_model([(x, float(i % 2)) for i, x in enumerate(X)], lambda_ridge=0.0)
    with pytest.raises(ValueError):
        fit_density_model([(np.ones(2), 0.0)], lambda_ridge=-1)


def test_predict_clamps_negative():
    m = DensityModel(np.array([1.0]), -5.0, np.zeros(1), np.ones(1), (0.0, 0.01), 0.1,
                     feature_names=("f0",))
    assert m.predict(np.array([[0.0]]))[0] == 0.0

    class Negative:
        def estimate(self, image):
            return -0.3

    assert predict_density(Negative(), None) == 0.0


def test_persistence_round_trip(tmp_path):
    samples, _ = linear_samples(np.random.default_rng(2))
    m = fit_density_model(samples)
    m.save(tmp_path / "m.json")
    m2 = DensityModel.load(tmp_path / "m.json")
    F = np.array([f for f, _ in samples])
    assert np.array_equal(m.predict(F), m2.predict(F))
    assert m2.betas == (0.0, 0.005, 0.01, 0.02)


def test_rank_examples():
    class Identity:
        def estimate(self, image):
            return float(image)

    assert rank_by_density(Identity(), []) == []
    ranked = rank_by_density(Identity(), [0.3, 0.1, 0.3, 0.2], ["a", "b", "c", "d"])
    assert [r.name for r in ranked] == ["b", "d", "a", "c"]
    assert [r.percentile for r in ranked] == [25.0, 50.0, 100.0, 100.0]
    perm = rank_by_density(Identity(), [0.2, 0.3, 0.1, 0.3], ["d", "a", "b", "c"])
    assert [r.estimate for r in perm] == [r.estimate for r in ranked]


def test_spearman_and_pairwise_oracles():
    e = np.array([0.1, 0.4, 0.2, 0.3, 0.5])
    t = np.array([1, 3, 2, 5, 4.0])
    # no ties: 1 - 6*sum(d^2) / (n(n^2-1)) with rank differences (0, 1, 0, 1, 1)... by hand:
    re, rt = np.argsort(np.argsort(e)), np.argsort(np.argsort(t))
    rho = 1 - 6 * np.sum((re - rt) ** 2) / (5 * 24)
    assert spearman(e, t) == pytest.approx(rho, abs=1e-12)
    # discordant pairs: (index1,index3)? count by brute force loop
    agree = total = 0
    for i in range(5):
        for j in range(i + 1, 5):
            total += 1
            agree += (e[i] - e[j]) * (t[i] - t[j]) > 0
    assert pairwise_agreement(e, t) == agree / total
    with pytest.raises(ValueError):
        pairwise_agreement([1, 2], [0.5, 0.5])


def test_features_order_fog_on_toy_scenes():
    rng = np.random.default_rng(3)
    scenes = [toy.make_scene(rng, 64, "clear") for _ in range(32)]
    samples, test = [], []
    for k, s in enumerate(scenes):
        sc = LabeledScene(s.image, s.instance_labeling(), distance=s.distance_map())
        for b in density.TRAINING_BETAS:
            img = s.image if b == 0 else simulate(sc, b).foggy
            (samples if k < 24 else test).append((extract_features(img), b))
    m = fit_density_model(samples)
    est = m.predict(np.array([f for f, _ in test]))
    truth = [b for _, b in test]
    assert spearman(est, truth) >= 0.8
    assert extract_features(scenes[0].image).shape == (len(density.FEATURE_NAMES),)
    # training images predict within the residual bound
    tr = m.raw_predict(np.array([f for f, _ in samples]))
    assert np.abs(tr - [b for _, b in samples]).max() <= m.residual_max + 1e-15
    abl = feature_ablation(samples, test)
    assert set(abl.per_feature) == set(density.STATISTICS)


def test_feature_examples(toy_scene):
    names = list(density.FEATURE_NAMES)
    flat = extract_features(np.full((30, 30, 3), 0.4))
    for stat in ("rms_contrast", "michelson_contrast", "mean_gradient"):
        for region in density.REGIONS:
            assert abs(flat[names.index(f"{region}.{stat}")]) <= 1e-12
    assert np.array_equal(extract_features(toy_scene.image), extract_features(toy_scene.image.copy()))
    sc = LabeledScene(toy_scene.image, toy_scene.instance_labeling(), distance=toy_scene.distance_map())
    foggy = simulate(sc, 0.02).foggy
    k = names.index("global.rms_contrast")
    assert extract_features(foggy)[k] < extract_features(toy_scene.image)[k]


def test_foggier_simulation_estimated_higher_in_most_pairs():
    rng = np.random.default_rng(9)
    scenes = [toy.make_scene(rng, 64, "clear") for _ in range(30)]
    train, pairs = [], []
    for k, s in enumerate(scenes):
        sc = LabeledScene(s.image, s.instance_labeling(), distance=s.distance_map())
        feats = {b: extract_features(s.image if b == 0 else simulate(sc, b).foggy) for b in (0.0, 0.005, 0.01, 0.02)}
        if k < 22:
            train += [(f, b) for b, f in feats.items()]
        else:
            pairs += [(feats[0.005], feats[0.01]), (feats[0.01], feats[0.02])]
    m = fit_density_model(train)
    agree = np.mean([m.predict(np.array([hi]))[0] > m.predict(np.array([lo]))[0] for lo, hi in pairs])
    assert agree >= 0.9
