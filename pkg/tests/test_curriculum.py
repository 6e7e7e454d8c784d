import logging

import numpy as np
import pytest

from fogkit import toy
from fogkit.core import SemanticLabeling
from fogkit.curriculum import (ClearCorpus, CurriculumSchedule, DatasetManifest, DensityThresholdClassifier,
                               ManifestEntry, RealCorpus, SelectedModel, build_stage_datasets,
                               confusion_matrix, dataset_confusion, evaluate, format_table, iou_per_class,
                               mean_iou, miou_from_confusion, mixed_stream, model_select, pseudo_labels,
                               run_cmada, stream_lambda)
from fogkit.densify import DistanceHistogram
from fogkit.optics import LabeledScene
from fogkit.segmentation import ToyTrainer


class LookupEstimator:
    """Density 'estimate' read from the image's mean red value."""

    def estimate(self, image):
        return float(np.asarray(image)[..., 0].mean()) / 20.0


class Constant:
    def __init__(self, value):
        self.value = value

    def predict(self, image):
        return np.full(np.asarray(image).shape[:2], self.value)


@pytest.fixture(scope="module")
def corpora():
    rng = np.random.default_rng(5)
    scenes = [toy.make_scene(rng, 32, "clear") for _ in range(3)]
    clear = ClearCorpus([LabeledScene(s.image, s.instance_labeling(), distance=s.distance_map(), name=f"c{i}")
                         for i, s in enumerate(scenes)])
    # estimates 0.001, 0.004, 0.008 under LookupEstimator
    real = RealCorpus([np.full((32, 32, 3), v) for v in (0.02, 0.08, 0.16)], ["r0", "r1", "r2"])
    return clear, real


def factory():
    return ToyTrainer(toy.TOY_CLASSES, pixels_per_image=100, iters_per_epoch=5)


# -- schedule -----------------------------------------------------------------

def test_schedule_presets_and_validation():
    assert CurriculumSchedule.preset("CMAda1").betas == (0.0, 0.01)
    s = CurriculumSchedule.preset("CMAda3+")
    assert s.betas == (0.0, 0.0025, 0.005, 0.01) and s.densify and s.Z == 4 and s.K == 2
    assert CurriculumSchedule.parse("0,0.005,0.01").name == "CMAda2"
    for bad in [(0.0,), (0.001, 0.01), (0.0, 0.01, 0.005), (0.0, 0.01, 0.01)]:
        with pytest.raises(ValueError):
            CurriculumSchedule(bad)
    with pytest.raises(ValueError):
        CurriculumSchedule((0.0, 0.01), w=-1)
    with pytest.raises(ValueError):
        CurriculumSchedule.preset("CMAda9")


# -- datasets -----------------------------------------------------------------

def test_stage2_has_no_real_set(corpora, tmp_path):
    clear, real = corpora
    d = build_stage_datasets(CurriculumSchedule.preset("CMAda2"), 2, clear, real, LookupEstimator(), None, tmp_path)
    assert len(d.syn) == 3 and len(d.real) == 0
    assert all(e.origin == "synthetic" and e.beta_d == 0.005 for e in d.syn.entries)
    img, lab = d.syn.load(d.syn.entries[0])
    assert np.array_equal(lab, clear.truth(0))
    assert np.abs(img - clear.foggy(0, 0.005)).max() <= 0.5 / 255 + 1e-12


def test_stage3_selects_by_estimate_and_pseudo_labels(corpora, tmp_path):
    clear, real = corpora
    prev = Constant(toy.ROAD)
    d = build_stage_datasets(CurriculumSchedule.preset("CMAda2"), 3, clear, real, LookupEstimator(), prev, tmp_path)
    assert [e.image for e in d.real.entries] == ["real/r0.png", "real/r1.png"]
    for e in d.real.entries:
        img, lab = d.real.load(e)
        assert np.all(lab == toy.ROAD) and e.origin == "real" and e.beta_l == e.beta_d
    assert d.real.entries[0].beta_l == pytest.approx(0.001)


def test_densified_real_set(corpora, tmp_path):
    clear, real = corpora
    hist = DistanceHistogram(np.array([50.0, 200.0]), np.array([0.5, 0.5]))
    d = build_stage_datasets(CurriculumSchedule.preset("CMAda2+"), 3, clear, real, LookupEstimator(),
                             Constant(toy.SKY), tmp_path, hist)
    e = d.real.entries[1]
    assert e.origin == "real-densified"
    assert e.beta_d == pytest.approx(0.005 + 0.004 * (0.01 - 0.005) / 0.005)
    with pytest.raises(ValueError):
        build_stage_datasets(CurriculumSchedule.preset("CMAda2+"), 3, clear, real, LookupEstimator(),
                             Constant(toy.SKY), tmp_path)


def test_empty_selection_warns(corpora, tmp_path, caplog):
    clear, _ = corpora
    caplog.set_level(logging.WARNING, logger="fogkit")
    dense = RealCorpus([np.full((32, 32, 3), 0.9)])
    d = build_stage_datasets(CurriculumSchedule.preset("CMAda2"), 3, clear, dense, LookupEstimator(),
                             Constant(0), tmp_path)
    assert len(d.real) == 0 and any("empty" in r.message for r in caplog.records)


def test_stage_datasets_errors(corpora, tmp_path):
    clear, real = corpora
    s = CurriculumSchedule.preset("CMAda2")
    with pytest.raises(ValueError):
        build_stage_datasets(s, 1, clear, real, LookupEstimator(), None, tmp_path)
    with pytest.raises(ValueError):
        build_stage_datasets(s, 4, clear, real, LookupEstimator(), None, tmp_path)
    with pytest.raises(ValueError):
        build_stage_datasets(s, 3, clear, real, LookupEstimator(), None, tmp_path)
    with pytest.raises(ValueError):
        build_stage_datasets(s, 2, ClearCorpus([]), real, LookupEstimator(), None, tmp_path)


def test_manifest_round_trip(tmp_path):
    m = DatasetManifest(3, [ManifestEntry("a.png", "a_l.png", "real", 0.0012345678901234, 0.0012345678901234),
                            ManifestEntry("b.png", "b_l.png", "synthetic", 0.0, 0.01)], tmp_path)
    m.save(tmp_path / "m.tsv")
    m2 = DatasetManifest.load_file(tmp_path / "m.tsv")
    assert m2.entries == m.entries and m2.stage == 3
    with pytest.raises(ValueError):
        ManifestEntry("a", "b", "bogus", 0, 0)
    (tmp_path / "x.tsv").write_text("nope\n")
    with pytest.raises(ValueError):
        DatasetManifest.load_file(tmp_path / "x.tsv")


def test_pseudo_label_confidence():
    m = ToyTrainer((0, 1))
    img = np.zeros((4, 4, 3))
    assert np.all(pseudo_labels(m, img) == 0)
    assert np.all(pseudo_labels(m, img, min_confidence=0.6) == 255)


# -- stream -------------------------------------------------------------------

def _manifest(n, origin):
    return DatasetManifest(2, [ManifestEntry(f"{origin}{i}", "l", origin, 0.0, 0.0) for i in range(n)])


def test_stream_fraction_lambda_and_determinism():
    syn, real = _manifest(498, "synthetic"), _manifest(1556, "real")
    s = mixed_stream(syn, real, 1.0, seed=0)
    assert s.lam == pytest.approx(1556 / 498) and round(s.lam, 3) == 3.124
    draws = s.take(10_000)
    frac = np.mean([e.origin == "real" for e in draws])
    assert abs(frac - 0.5) <= 0.02
    assert draws == mixed_stream(syn, real, 1.0, seed=0).take(10_000)
    assert draws != mixed_stream(syn, real, 1.0, seed=1).take(10_000)


@pytest.mark.parametrize("w", [0.25, 1.0, 3.0])
def test_stream_convergence_bound(w):
    syn, real = _manifest(10, "synthetic"), _manifest(7, "real")
    n = 5000
    frac = np.mean([e.origin == "real" for e in mixed_stream(syn, real, w, seed=3).take(n)])
    p = w / (1 + w)
    assert abs(frac - p) <= 3 * np.sqrt(p * (1 - p) / n)


def test_stream_passes_cover_each_set():
    syn, real = _manifest(5, "synthetic"), _manifest(3, "real")
    draws = mixed_stream(syn, real, 0.0).take(10)
    assert all(e.origin == "synthetic" for e in draws)
    assert sorted(e.image for e in draws[:5]) == [f"synthetic{i}" for i in range(5)]
    with pytest.raises(ValueError):
        mixed_stream(syn, _manifest(0, "real"), 1.0)
    with pytest.raises(ValueError):
        mixed_stream(_manifest(0, "synthetic"), real, 0.0)
    with pytest.raises(ValueError):
        stream_lambda(1.0, 3, 0)


# -- orchestration ------------------------------------------------------------

def test_single_stage_matches_direct_dataset_build(corpora, tmp_path):
    clear, real = corpora
    s = CurriculumSchedule.preset("CMAda1")
    res = run_cmada(s, clear, real, LookupEstimator(), factory, tmp_path / "run", 1)
    direct = build_stage_datasets(s, 2, clear, real, LookupEstimator(), None, tmp_path / "direct")
    for name in ("syn.tsv", "real.tsv"):
        assert (tmp_path / "run/stage2" / name).read_bytes() == (tmp_path / "direct/stage2" / name).read_bytes()
    for e in direct.syn.entries:
        assert (tmp_path / "run/stage2" / e.image).read_bytes() == (tmp_path / "direct/stage2" / e.image).read_bytes()
    assert [p.name for p in res.checkpoints] == ["model.json", "model.json"]
    assert res.report["stages"][0]["R"] == 0


def test_zero_epochs_returns_initial_model(corpora, tmp_path):
    clear, real = corpora
    init = factory()
    init.weights[:] = np.random.default_rng(0).normal(size=init.weights.shape)
    res = run_cmada(CurriculumSchedule.preset("CMAda2"), clear, real, LookupEstimator(), factory, tmp_path, 0,
                    initial_model=init)
    assert np.array_equal(res.model.weights, init.weights)


def test_run_is_reproducible_and_reports(corpora, tmp_path):
    clear, real = corpora
    test = [(clear.foggy(i, 0.01), clear.truth(i)) for i in range(len(clear))]
    kw = dict(epochs_per_stage=1, test=test, seed=2)
    s = CurriculumSchedule.preset("CMAda2")
    a = run_cmada(s, clear, real, LookupEstimator(), factory, tmp_path / "a", **kw)
    b = run_cmada(s, clear, real, LookupEstimator(), factory, tmp_path / "b", **kw)
    assert a.report == b.report
    for rel in ("stage3/real.tsv", "stage3/model.json", "stage3/real/r1_labels.png"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    st3 = a.report["stages"][1]
    assert st3["R"] == 2 and st3["lambda"] == pytest.approx(2 / 3) and st3["draws"] == 6
    assert all(x >= y for x, y in zip(st3["losses"], st3["losses"][1:]))
    assert 0 <= a.report["final_miou"] <= 1


def test_trainer_failure_carries_stage_context(corpora, tmp_path):
    clear, real = corpora

    class Broken(ToyTrainer):
        def clone(self):
            raise FloatingPointError("boom")

    with pytest.raises(RuntimeError, match="stage 2"):
        run_cmada(CurriculumSchedule.preset("CMAda1"), clear, real, LookupEstimator(),
                  lambda: Broken(toy.TOY_CLASSES), tmp_path, 1)


# -- model selection ----------------------------------------------------------

def test_model_select_constant_gates():
    img = np.zeros((3, 3, 3))
    a, b = Constant(1), Constant(2)
    assert np.all(model_select(a, b, lambda x: 1, img) == 1)
    assert np.all(model_select(a, b, lambda x: 0, img) == 2)
    gate = DensityThresholdClassifier(LookupEstimator(), 0.0025)
    sel = SelectedModel(a, b, gate)
    assert np.all(sel.predict(np.full((3, 3, 3), 0.02)) == 1)  # estimate 0.001
    assert np.all(sel.predict(np.full((3, 3, 3), 0.2)) == 2)  # estimate 0.01


# -- metrics ------------------------------------------------------------------

def test_miou_examples():
    truth = np.array([[0, 0, 1, 1]])
    pred = np.array([[0, 1, 1, 1]])
    assert mean_iou(truth, truth) == 1.0
    assert mean_iou(pred, truth) == pytest.approx(7 / 12, abs=1e-15)
    conf = confusion_matrix(pred, truth, 2)
    assert np.array_equal(iou_per_class(conf), [0.5, 2 / 3])
    with pytest.raises(ValueError):
        mean_iou(pred, np.full((1, 4), 255))
    with pytest.raises(ValueError):
        mean_iou(pred, truth[:, :3])


def test_miou_void_and_subsets():
    truth = np.array([[0, 0, 255, 1]])
    pred = np.array([[0, 2, 1, 255]])
    conf = confusion_matrix(pred, truth, 3)
    # class 0: tp 1, fn 1; class 1: fn 1 (the void prediction); class 2: fp 1
    assert np.allclose(iou_per_class(conf), [0.5, 0.0, 0.0])
    assert miou_from_confusion(conf) == pytest.approx(1 / 6)
    assert miou_from_confusion(conf, "void-aware") == pytest.approx(0.25)
    assert miou_from_confusion(conf, "frequent", [0]) == pytest.approx(0.5)
    assert mean_iou(SemanticLabeling(pred.clip(0, 2), 19), SemanticLabeling(truth, 19)) == pytest.approx(1 / 6)


def test_miou_relabeling_symmetry():
    rng = np.random.default_rng(0)
    truth, pred = rng.integers(0, 5, (20, 20)), rng.integers(0, 5, (20, 20))
    perm = np.array([3, 0, 4, 1, 2])
    assert mean_iou(perm[pred], perm[truth], num_classes=5) == pytest.approx(mean_iou(pred, truth, num_classes=5),
                                                                            abs=1e-15)


def test_dataset_level_pooling():
    t1, p1 = np.array([[0, 0]]), np.array([[0, 0]])
    t2, p2 = np.array([[1, 1, 1, 1]]), np.array([[1, 0, 0, 0]])
    conf = dataset_confusion([p1, p2], [t1, t2], 2)
    pooled = miou_from_confusion(conf)
    assert pooled == pytest.approx((2 / 5 + 1 / 4) / 2)
    test = [(np.zeros((1, 2, 3)), t1), (np.zeros((1, 4, 3)), t2)]
    assert evaluate(Constant(0), test, num_classes=2) == pytest.approx((2 / 6 + 0) / 2)
    assert "CMAda1" in format_table([("CMAda1", 0.5), ("none", float("nan"))])
