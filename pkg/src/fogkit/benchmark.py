"""Seeded toy benchmark for curriculum adaptation and model selection.

One call builds every corpus from a single seed:

* a labeled clear corpus of ``"clear"``-domain scenes with analytic depth,
* an unlabeled real foggy corpus of ``"real"``-domain scenes under
  :func:`toy.render_real_fog` at densities drawn uniformly from a range,
* a dense-fog test set (labeled, real domain) and a clear test set.

The density estimator is trained on simulated fog of the clear corpus, the
distance histogram on its depth maps.  Each method then runs through
:func:`curriculum.run_cmada` with the :class:`ToyTrainer`, and model
selection is scored on the clear and foggy test sets pooled together.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import curriculum, densify, density, toy
from .curriculum import ClearCorpus, CurriculumSchedule, RealCorpus
from .optics import LabeledScene, SimulationParams
from .segmentation import ToyTrainer

log = logging.getLogger(__name__)

DEFAULT_METHODS = ("CMAda1", "CMAda2", "CMAda3+")


@dataclass(frozen=True)
class BenchmarkConfig:
    """Sizes and densities of the toy benchmark; fixed before any run."""

    seed: int = 0
    image_size: int = 128
    num_clear: int = 30
    num_real: int = 120
    num_test: int = 50
    real_beta_range: tuple[float, float] = (0.001, 0.015)
    test_beta_range: tuple[float, float] = (0.008, 0.015)
    epochs_per_stage: int = 4
    w: float = 1.0
    methods: tuple[str, ...] = DEFAULT_METHODS


@dataclass
class ToyBenchmark:
    config: BenchmarkConfig
    clear: ClearCorpus
    real: RealCorpus
    real_betas: np.ndarray
    fog_test: list[tuple[np.ndarray, np.ndarray]]
    clear_test: list[tuple[np.ndarray, np.ndarray]]
    density_model: density.DensityModel
    histogram: densify.DistanceHistogram
    timings: dict = field(default_factory=dict)


def build_benchmark(config: BenchmarkConfig = BenchmarkConfig(),
                    params: SimulationParams | None = None) -> ToyBenchmark:
    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    size = config.image_size
    clear_sc = [toy.make_scene(rng, size, "clear") for _ in range(config.num_clear)]
    real_sc = [toy.make_scene(rng, size, "real") for _ in range(config.num_real)]
    real_b = rng.uniform(*config.real_beta_range, config.num_real)
    real_imgs = [toy.render_real_fog(s, b, rng) for s, b in zip(real_sc, real_b)]
    test_sc = [toy.make_scene(rng, size, "real") for _ in range(config.num_test)]
    test_b = rng.uniform(*config.test_beta_range, config.num_test)
    fog_test = [(toy.render_real_fog(s, b, rng), s.classes) for s, b in zip(test_sc, test_b)]
    clear_test = [(s.image, s.classes) for s in (toy.make_scene(rng, size, "real") for _ in range(config.num_test))]

    scenes = [LabeledScene(s.image, s.instance_labeling(), distance=s.distance_map(), name=f"clear_{i:05d}")
              for i, s in enumerate(clear_sc)]
    clear = ClearCorpus(scenes, params or SimulationParams())
    real = RealCorpus(real_imgs, [f"real_{i:05d}" for i in range(config.num_real)])
    t1 = time.perf_counter()

    samples = [(density.extract_features(clear.foggy(i, b) if b > 0 else clear_sc[i].image), b)
               for b in density.TRAINING_BETAS for i in range(len(clear))]
    dm = density.fit_density_model(samples)
    hist = densify.build_distance_histogram([s.distance for s in scenes])
    t2 = time.perf_counter()
    return ToyBenchmark(config, clear, real, real_b, fog_test, clear_test, dm, hist,
                        {"corpora_s": t1 - t0, "density_s": t2 - t1})


def trainer_factory(seed: int = 0):
    return lambda: ToyTrainer(toy.TOY_CLASSES, seed=seed)


def run_benchmark(bench: ToyBenchmark, workdir, methods: Sequence[str] | None = None) -> dict:
    """Clear baseline, each CMAda variant and model selection.

    Returns a report with dense-fog mIoU per method (fractions in [0, 1]),
    per-stage details and model-selection scores on the pooled clear and
    foggy test sets.
    """
    cfg = bench.config
    methods = tuple(methods or cfg.methods)
    workdir = Path(workdir)
    t0 = time.perf_counter()
    factory = trainer_factory(cfg.seed)
    baseline = curriculum.train_clear_model(factory, bench.clear, cfg.epochs_per_stage)
    miou = {"baseline": curriculum.evaluate(baseline, bench.fog_test)}
    stages, models = {}, {}
    for name in methods:
        schedule = CurriculumSchedule.preset(name, cfg.w)
        res = curriculum.run_cmada(schedule, bench.clear, bench.real, bench.density_model, factory,
                                   workdir / name, cfg.epochs_per_stage, initial_model=baseline,
                                   histogram=bench.histogram, test=bench.fog_test, seed=cfg.seed)
        miou[name] = res.report["final_miou"]
        stages[name] = res.report["stages"]
        models[name] = res.model
        log.info("%s: dense-fog mIoU %.2f", name, 100 * miou[name])
    t1 = time.perf_counter()

    fog_model = models[methods[-1]]
    mixture = bench.clear_test + bench.fog_test
    gate = curriculum.DensityThresholdClassifier(bench.density_model)
    selection = {
        "fog_model": methods[-1],
        "clear_only": curriculum.evaluate(baseline, mixture),
        "fog_only": curriculum.evaluate(fog_model, mixture),
        "model_select": curriculum.evaluate(curriculum.SelectedModel(baseline, fog_model, gate), mixture),
        "gate_accuracy": float(np.mean([gate(img) == 1 for img, _ in bench.clear_test]
                                       + [gate(img) == 0 for img, _ in bench.fog_test])),
    }
    t2 = time.perf_counter()
    cfg_dict = asdict(cfg)
    cfg_dict["methods"] = list(methods)
    return {
        "config": cfg_dict,
        "real_estimates": {"selected_at_0.0025": int(np.sum(bench.real.estimates(bench.density_model) <= 0.0025)),
                           "selected_at_0.005": int(np.sum(bench.real.estimates(bench.density_model) <= 0.005))},
        "miou": miou,
        "stages": stages,
        "model_selection": selection,
        "timings": dict(bench.timings, training_s=t1 - t0, selection_s=t2 - t1),
    }


def ordering_holds(miou: dict, methods: Sequence[str] = DEFAULT_METHODS, min_gain: float = 0.02) -> bool:
    """``methods[-1] >= ... >= methods[0] >= baseline`` read right to left,
    with ``methods[1] - baseline >= min_gain``."""
    chain = [miou["baseline"]] + [miou[m] for m in methods]
    return all(b >= a for a, b in zip(chain, chain[1:])) and miou[methods[1]] - miou["baseline"] >= min_gain
