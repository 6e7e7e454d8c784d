"""Curriculum model adaptation from clear weather to dense fog.

A schedule ``(0, beta_2, ..., beta_Z)`` defines one adaptation stage per
nonzero density.  Stage ``z`` trains on

* ``syn``: the labeled clear corpus with simulated fog of density
  ``beta_z`` (labels inherited from the clear images), and
* ``real``: the unlabeled real foggy images whose estimated density is at
  most ``beta_{z-1}``, labeled by the stage ``z-1`` model.  With
  densification enabled each such image is first densified from its
  estimate ``beta_l`` to ``map_target_beta(beta_l, beta_{z-1}, beta_z)``.
  Stage 2 has no real set (no real image is estimated as fog-free).

Both sets are fed to the trainer as one stream mixing syn:real at 1:w,
each warm-started from the previous stage.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Protocol, Sequence

import numpy as np

from . import densify, io
from .core import SemanticLabeling, as_rgb
from .density import FogEstimator, predict_density
from .optics import LabeledScene, SimulationParams, estimate_atmospheric_light, scene_distance, simulate

log = logging.getLogger(__name__)

VOID = 255
ORIGINS = ("synthetic", "real", "real-densified")
MANIFEST_HEADER = "# fogkit-manifest v1"
MANIFEST_COLUMNS = ("image", "label", "origin", "beta_l", "beta_d")
CLEAR_THRESHOLD = 0.0025


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class CurriculumSchedule:
    """Ascending fog densities ``(0, ..., beta_Z)`` plus mixing options.

    Args:
        betas: densities of the source (0), the intermediate targets and
            the final target.
        densify: densify the real images of each stage (the "+" variant).
        w: relative weight of one real pseudo-labeled image against one
            synthetic image.
        name: label used in reports.
    """

    betas: tuple[float, ...]
    densify: bool = False
    w: float = 1.0
    name: str = ""

    def __post_init__(self):
        betas = tuple(float(b) for b in self.betas)
        if len(betas) < 2:
            raise ValueError("a schedule needs at least two densities")
        if betas[0] != 0.0:
            raise ValueError("the first density must be 0 (clear weather)")
        if any(b >= c for b, c in zip(betas, betas[1:])):
            raise ValueError("densities must be strictly ascending")
        if self.w < 0:
            raise ValueError("w must be non-negative")
        object.__setattr__(self, "betas", betas)
        if not self.name:
            object.__setattr__(self, "name", _default_name(betas, self.densify))

    @property
    def Z(self) -> int:
        return len(self.betas)

    @property
    def K(self) -> int:
        """Number of intermediate target domains."""
        return self.Z - 2

    @classmethod
    def preset(cls, name: str, w: float = 1.0) -> "CurriculumSchedule":
        """``CMAda1``, ``CMAda2``, ``CMAda3``; a trailing ``+`` enables densification."""
        plus = name.endswith("+")
        base = name.rstrip("+")
        if base not in PRESET_BETAS:
            raise ValueError(f"unknown schedule preset {name!r}; known: {sorted(PRESET_BETAS)}")
        return cls(PRESET_BETAS[base], plus, w, name)

    @classmethod
    def parse(cls, text: str, densify: bool = False, w: float = 1.0) -> "CurriculumSchedule":
        """A preset name or a comma-separated list of densities."""
        text = text.strip()
        if text.rstrip("+") in PRESET_BETAS:
            return cls.preset(text, w)
        return cls(tuple(float(v) for v in text.split(",")), densify, w)


PRESET_BETAS = {
    "CMAda1": (0.0, 0.01),
    "CMAda2": (0.0, 0.005, 0.01),
    "CMAda3": (0.0, 0.0025, 0.005, 0.01),
}


def _default_name(betas, plus) -> str:
    for name, b in PRESET_BETAS.items():
        if b == betas:
            return name + ("+" if plus else "")
    return "custom(" + ",".join(f"{b:g}" for b in betas) + ")" + ("+" if plus else "")


# ---------------------------------------------------------------------------
# corpora and manifests


@dataclass
class ClearCorpus:
    """Labeled clear-weather scenes; foggy versions are memoized per density."""

    scenes: Sequence[LabeledScene]
    params: SimulationParams = field(default_factory=SimulationParams)
    _foggy: dict = field(default_factory=dict, repr=False)
    _distance: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.scenes)

    def name(self, i: int) -> str:
        return self.scenes[i].name or f"clear_{i:05d}"

    def truth(self, i: int) -> np.ndarray:
        return self.scenes[i].labels.class_map(VOID)

    def distance(self, i: int):
        """Scene distance of scene ``i``, completed from disparity once."""
        if i not in self._distance:
            self._distance[i] = scene_distance(self.scenes[i], self.params)
        return self._distance[i]

    def foggy(self, i: int, beta: float) -> np.ndarray:
        key = (i, float(beta))
        if key not in self._foggy:
            dist = self.distance(i) if beta > 0 else None
            self._foggy[key] = simulate(self.scenes[i], beta, self.params, dist).foggy
        return self._foggy[key]


@dataclass
class RealCorpus:
    """Unlabeled real foggy images; density estimates are memoized."""

    images: Sequence[np.ndarray]
    names: Sequence[str] | None = None
    _estimates: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.images)

    def name(self, i: int) -> str:
        return self.names[i] if self.names is not None else f"real_{i:05d}"

    def estimates(self, model: FogEstimator) -> np.ndarray:
        key = id(model)
        if key not in self._estimates:
            self._estimates[key] = (model, np.array([predict_density(model, im) for im in self.images]))
        return self._estimates[key][1]


@dataclass(frozen=True)
class ManifestEntry:
    image: str  # relative to the manifest directory
    label: str
    origin: str
    beta_l: float
    beta_d: float

    def __post_init__(self):
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")


@dataclass
class DatasetManifest:
    """Training pairs of one stage as line-oriented tab-separated records."""

    stage: int
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.entries)

    def image_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.image

    def label_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.label

    def load(self, entry: ManifestEntry) -> tuple[np.ndarray, np.ndarray]:
        """``(image, class map)`` of one entry."""
        return (io.read_rgb(self.image_path(entry)),
                io.read_labels(self.label_path(entry)).class_map(VOID))

    def to_text(self) -> str:
        lines = [f"{MANIFEST_HEADER} stage={self.stage}", "\t".join(MANIFEST_COLUMNS)]
        for e in self.entries:
            lines.append("\t".join([e.image, e.label, e.origin, repr(float(e.beta_l)), repr(float(e.beta_d))]))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())

    @classmethod
    def load_file(cls, path) -> "DatasetManifest":
        path = Path(path)
        lines = path.read_text().splitlines()
        if not lines or not lines[0].startswith(MANIFEST_HEADER):
            raise ValueError(f"{path}: not a dataset manifest")
        stage = int(lines[0].split("stage=")[1])
        if lines[1].split("\t") != list(MANIFEST_COLUMNS):
            raise ValueError(f"{path}: unexpected columns {lines[1]!r}")
        entries = []
        for ln in lines[2:]:
            if not ln.strip():
                continue
            img, lab, origin, bl, bd = ln.split("\t")
            entries.append(ManifestEntry(img, lab, origin, float(bl), float(bd)))
        return cls(stage, entries, path.parent)


@dataclass
class StageDatasets:
    syn: DatasetManifest
    real: DatasetManifest


class SegmentationModel(Protocol):
    def predict(self, image: np.ndarray) -> np.ndarray: ...


class TrainableModel(SegmentationModel, Protocol):
    def train(self, samples: Sequence[tuple[np.ndarray, np.ndarray]], epochs: int) -> list[float]: ...
    def clone(self) -> "TrainableModel": ...
    def save(self, path) -> None: ...


def pseudo_labels(model: SegmentationModel, image: np.ndarray, min_confidence: float | None = None) -> np.ndarray:
    """Class map predicted by ``model``; with ``min_confidence`` pixels whose
    top class probability falls below it are set to void (needs
    ``predict_proba``)."""
    labels = np.asarray(model.predict(image), dtype=np.int64)
    if min_confidence is not None:
        proba = model.predict_proba(image)
        labels = np.where(proba.max(axis=2) >= min_confidence, labels, VOID)
    return labels


def build_stage_datasets(schedule: CurriculumSchedule, z: int, clear: ClearCorpus, real: RealCorpus,
                         density_model: FogEstimator, prev_model: SegmentationModel | None, workdir,
                         histogram: densify.DistanceHistogram | None = None,
                         min_confidence: float | None = None) -> StageDatasets:
    """Write the synthetic and real training sets of stage ``z`` (2-based)
    under ``workdir/stage<z>`` and return their manifests."""
    if not 2 <= z <= schedule.Z:
        raise ValueError(f"stage z={z} outside [2, {schedule.Z}]")
    if len(clear) == 0:
        raise ValueError("empty clear corpus")
    if z >= 3 and prev_model is None:
        raise ValueError(f"stage {z} needs the stage {z - 1} model")
    if schedule.densify and z >= 3 and histogram is None:
        raise ValueError("densification needs a distance histogram")
    beta = schedule.betas[z - 1]
    root = Path(workdir) / f"stage{z}"
    syn = DatasetManifest(z, [], root)
    for i in range(len(clear)):
        name = clear.name(i)
        img_rel, lab_rel = f"syn/{name}.png", f"syn/{name}_labels.png"
        io.write_rgb(root / img_rel, clear.foggy(i, beta))
        io.write_labels(root / lab_rel, SemanticLabeling(clear.truth(i), VOID + 1))
        syn.entries.append(ManifestEntry(img_rel, lab_rel, "synthetic", 0.0, beta))

    real_m = DatasetManifest(z, [], root)
    if z >= 3:
        beta_prev = schedule.betas[z - 2]
        est = real.estimates(density_model) if len(real) else np.zeros(0)
        selected = np.flatnonzero(est <= beta_prev)
        if selected.size == 0:
            log.warning("stage %d: no real image is estimated at or below beta=%g; real set is empty",
                        z, beta_prev)
        for n in selected:
            image = as_rgb(real.images[n])
            labels = pseudo_labels(prev_model, image, min_confidence)
            beta_l = float(est[n])
            origin, beta_d = "real", beta_l
            if schedule.densify:
                beta_d = densify.map_target_beta(beta_l, beta_prev, beta)
                image = densify.densify_image(image, beta_l, beta_d, histogram,
                                              estimate_atmospheric_light(image))
                origin = "real-densified"
            name = real.name(n)
            img_rel, lab_rel = f"real/{name}.png", f"real/{name}_labels.png"
            io.write_rgb(root / img_rel, image)
            io.write_labels(root / lab_rel, SemanticLabeling(labels, VOID + 1))
            real_m.entries.append(ManifestEntry(img_rel, lab_rel, origin, beta_l, beta_d))
    syn.save(root / "syn.tsv")
    real_m.save(root / "real.tsv")
    return StageDatasets(syn, real_m)


# ---------------------------------------------------------------------------
# mixed training stream


class MixedStream:
    """Endless sequence of manifest entries mixing syn:real at 1:w.

    Each draw picks the real set with probability ``w / (1 + w)``; within a
    set, entries come in shuffled passes, reshuffled after every pass.
    """

    def __init__(self, syn: DatasetManifest, real: DatasetManifest, w: float, seed=0):
        if w < 0:
            raise ValueError("w must be non-negative")
        if len(syn) == 0:
            raise ValueError("the synthetic set must not be empty")
        if w > 0 and len(real) == 0:
            raise ValueError("w > 0 needs a non-empty real set")
        self.syn, self.real, self.w, self.seed = syn, real, float(w), seed

    @property
    def real_fraction(self) -> float:
        return self.w / (1.0 + self.w)

    @property
    def lam(self) -> float:
        """Weight of the real loss term relative to the synthetic one, ``wR/M``."""
        return stream_lambda(self.w, len(self.real), len(self.syn))

    def __iter__(self) -> Iterator[ManifestEntry]:
        rng = np.random.default_rng(self.seed)
        sources = [self.syn.entries, self.real.entries]
        orders = [rng.permutation(len(s)) for s in sources]
        pos = [0, 0]
        p = self.real_fraction
        while True:
            k = 1 if (p > 0 and rng.random() < p) else 0
            if pos[k] == len(orders[k]):
                orders[k] = rng.permutation(len(sources[k]))
                pos[k] = 0
            yield sources[k][orders[k][pos[k]]]
            pos[k] += 1

    def take(self, n: int) -> list[ManifestEntry]:
        it = iter(self)
        return [next(it) for _ in range(int(n))]


def mixed_stream(syn: DatasetManifest, real: DatasetManifest, w: float, seed=0) -> MixedStream:
    return MixedStream(syn, real, w, seed)


def stream_lambda(w: float, R: int, M: int) -> float:
    if M <= 0:
        raise ValueError("M must be positive")
    return w * R / M


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class CMAdaResult:
    model: TrainableModel
    checkpoints: list[Path]
    report: dict


def _load_stream(manifests: dict[str, DatasetManifest], entries: Sequence[ManifestEntry]):
    cache: dict[ManifestEntry, tuple] = {}
    out = []
    for e in entries:
        if e not in cache:
            man = manifests["real" if e.origin != "synthetic" else "syn"]
            cache[e] = man.load(e)
        out.append(cache[e])
    return out


def train_clear_model(trainer_factory: Callable[[], TrainableModel], clear: ClearCorpus,
                      epochs: int) -> TrainableModel:
    """The source model: trained on the clear corpus with its labels."""
    model = trainer_factory()
    model.train([(as_rgb(s.image), clear.truth(i)) for i, s in enumerate(clear.scenes)], epochs)
    return model


def run_cmada(schedule: CurriculumSchedule, clear: ClearCorpus, real: RealCorpus,
              density_model: FogEstimator, trainer_factory: Callable[[], TrainableModel], workdir,
              epochs_per_stage: int, initial_model: TrainableModel | None = None,
              histogram: densify.DistanceHistogram | None = None,
              test: Sequence[tuple[np.ndarray, np.ndarray]] | None = None,
              draws_per_stage: int | None = None, seed: int = 0,
              min_confidence: float | None = None) -> CMAdaResult:
    """Run every stage of ``schedule``, each warm-started from the last.

    Without ``initial_model`` the clear-weather model is trained first for
    ``epochs_per_stage`` epochs.  Each stage draws ``draws_per_stage``
    entries (default ``M * (1 + w)``) from the mixed stream and trains on
    them.  Checkpoints go to ``workdir/stage<z>/model.json``.
    """
    workdir = Path(workdir)
    if initial_model is None:
        model = train_clear_model(trainer_factory, clear, epochs_per_stage)
    else:
        model = initial_model
    ckpt = workdir / "stage1" / "model.json"
    model.save(ckpt)
    checkpoints = [ckpt]
    stages = []
    report = {"schedule": schedule.name, "betas": list(schedule.betas), "densify": schedule.densify,
              "w": schedule.w, "epochs_per_stage": int(epochs_per_stage), "seed": int(seed), "stages": stages}
    if test is not None:
        report["clear_model_miou"] = evaluate(model, test)
    for z in range(2, schedule.Z + 1):
        try:
            data = build_stage_datasets(schedule, z, clear, real, density_model, model, workdir,
                                        histogram, min_confidence)
            w = schedule.w if len(data.real) else 0.0
            stream = mixed_stream(data.syn, data.real, w, seed=[seed, z])
            n = draws_per_stage if draws_per_stage is not None else int(round(len(data.syn) * (1.0 + w)))
            entries = stream.take(n)
            samples = _load_stream({"syn": data.syn, "real": data.real}, entries)
            model = model.clone()
            losses = model.train(samples, epochs_per_stage)
        except Exception as exc:
            raise RuntimeError(f"stage {z} (beta={schedule.betas[z - 1]:g}) failed: {exc}") from exc
        ckpt = workdir / f"stage{z}" / "model.json"
        model.save(ckpt)
        checkpoints.append(ckpt)
        info = {
            "z": z, "beta": schedule.betas[z - 1], "M": len(data.syn), "R": len(data.real),
            "w": w, "lambda": stream_lambda(w, len(data.real), len(data.syn)),
            "draws": len(entries), "real_draws": sum(e.origin != "synthetic" for e in entries),
            "losses": [float(v) for v in losses],
        }
        if test is not None:
            info["miou"] = evaluate(model, test)
        stages.append(info)
        log.info("stage %d/%d beta=%g M=%d R=%d%s", z, schedule.Z, info["beta"], info["M"], info["R"],
                 f" mIoU={info['miou']:.4f}" if "miou" in info else "")
    if test is not None:
        report["final_miou"] = stages[-1]["miou"] if stages else report["clear_model_miou"]
    return CMAdaResult(model, checkpoints, report)


# ---------------------------------------------------------------------------
# model selection


class DensityThresholdClassifier:
    """Clear/fog classifier ``g``: 1 (clear) when the estimated density is
    below ``threshold``, else 0."""

    def __init__(self, density_model: FogEstimator, threshold: float = CLEAR_THRESHOLD):
        self.density_model = density_model
        self.threshold = float(threshold)

    def __call__(self, image) -> int:
        return int(predict_density(self.density_model, image) < self.threshold)


def model_select(clear_model: SegmentationModel, fog_model: SegmentationModel,
                 classifier: Callable[[np.ndarray], int], image) -> np.ndarray:
    """Segment with the clear model when ``classifier(image) == 1``, else
    with the fog model."""
    return (clear_model if classifier(image) == 1 else fog_model).predict(image)


class SelectedModel:
    """A :class:`SegmentationModel` applying :func:`model_select`."""

    def __init__(self, clear_model, fog_model, classifier):
        self.clear_model, self.fog_model, self.classifier = clear_model, fog_model, classifier

    def predict(self, image) -> np.ndarray:
        return model_select(self.clear_model, self.fog_model, self.classifier, image)


# ---------------------------------------------------------------------------
# evaluation


def _class_array(x) -> np.ndarray:
    if isinstance(x, SemanticLabeling):
        return x.class_map(VOID)
    return np.asarray(x, dtype=np.int64)


def confusion_matrix(pred, truth, num_classes: int | None = None, void: int = VOID) -> np.ndarray:
    """``C[i, j]`` counts non-void pixels of true class ``i`` predicted as ``j``.

    Predicted ids outside ``[0, num_classes)`` (including void) count as
    errors against the true class but belong to no predicted class.
    """
    p, t = _class_array(pred), _class_array(truth)
    if p.shape != t.shape:
        raise ValueError(f"dimension mismatch: pred {p.shape}, truth {t.shape}")
    keep = t != void
    p, t = p[keep], t[keep]
    if num_classes is None:
        valid_p = p[p != void]
        num_classes = int(max(t.max(initial=-1), valid_p.max(initial=-1))) + 1
    if t.size and (t.min() < 0 or t.max() >= num_classes):
        raise ValueError("truth class outside [0, num_classes)")
    C = num_classes
    inside = (p >= 0) & (p < C)
    conf = np.bincount(t[inside] * C + p[inside], minlength=C * C).reshape(C, C)
    missed = np.bincount(t[~inside], minlength=C)
    # missed predictions are false negatives only: keep them on an extra column
    return np.concatenate([conf, missed[:, None]], axis=1).astype(np.int64)


def iou_per_class(conf: np.ndarray) -> np.ndarray:
    """IoU per class from an augmented confusion matrix; NaN where absent."""
    C = conf.shape[0]
    tp = np.diag(conf[:, :C]).astype(np.float64)
    fn = conf.sum(axis=1) - tp
    fp = conf[:, :C].sum(axis=0) - tp
    den = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, tp / np.where(den > 0, den, 1.0), np.nan)


def miou_from_confusion(conf: np.ndarray, subset: str = "all", classes: Sequence[int] | None = None) -> float:
    """Mean IoU over classes present in truth or prediction.

    ``subset``: ``"all"`` uses every present class; ``"frequent"`` only
    those in ``classes``; ``"void-aware"`` only classes present in the
    (non-void) ground truth, so spurious predicted classes add no term.
    """
    if conf.sum() == 0:
        raise ValueError("no non-void pixels")
    C = conf.shape[0]
    in_truth = conf.sum(axis=1) > 0
    in_pred = conf[:, :C].sum(axis=0) > 0
    if subset == "all":
        use = in_truth | in_pred
    elif subset == "frequent":
        if classes is None:
            raise ValueError("the frequent subset needs a class list")
        use = (in_truth | in_pred) & np.isin(np.arange(C), list(classes))
    elif subset == "void-aware":
        use = in_truth
    else:
        raise ValueError(f"unknown class subset {subset!r}")
    if not use.any():
        raise ValueError("no class of the subset is present")
    return float(np.mean(iou_per_class(conf)[use]))


def mean_iou(pred, truth, subset: str = "all", classes: Sequence[int] | None = None,
             num_classes: int | None = None) -> float:
    if num_classes is None and isinstance(truth, SemanticLabeling):
        num_classes = truth.num_classes
    return miou_from_confusion(confusion_matrix(pred, truth, num_classes), subset, classes)


def dataset_confusion(preds: Sequence, truths: Sequence, num_classes: int) -> np.ndarray:
    conf = np.zeros((num_classes, num_classes + 1), dtype=np.int64)
    for p, t in zip(preds, truths):
        conf += confusion_matrix(p, t, num_classes)
    return conf


def evaluate(model: SegmentationModel, test: Sequence[tuple[np.ndarray, np.ndarray]],
             num_classes: int = 19, subset: str = "all") -> float:
    """Dataset-level mIoU: one confusion matrix pooled over all test images."""
    conf = dataset_confusion((model.predict(img) for img, _ in test), (t for _, t in test), num_classes)
    return miou_from_confusion(conf, subset)


def format_table(rows: Sequence[tuple[str, float]], title: str = "mIoU (%)") -> str:
    width = max([len(r[0]) for r in rows] + [6])
    lines = [f"{'method':<{width}}  {title}", "-" * (width + 2 + len(title))]
    lines += [f"{name:<{width}}  {100.0 * v:6.2f}" if not math.isnan(v) else f"{name:<{width}}     n/a"
              for name, v in rows]
    return "\n".join(lines)
