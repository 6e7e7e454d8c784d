"""Fog density estimation: image -> attenuation coefficient.

The reference estimator regresses beta from a handful of fog-sensitive image
statistics with ridge regression, trained on simulated fog of known density.
Any object with an ``estimate(image) -> float`` method can stand in for it
(see :class:`FogEstimator`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
from scipy import stats

from .core import as_rgb
from .optics import dark_channel

STATISTICS = (
    "dark_channel_15",
    "dark_channel_31",
    "rms_contrast",
    "michelson_contrast",
    "mean_saturation",
    "mean_gradient",
    "top_decile_luminance",
)
#: image regions the statistics are computed on (fog hides distant, i.e.
#: high, rows first, so per-band statistics separate depth from content)
REGIONS = ("global", "top", "middle", "bottom")
FEATURE_NAMES = tuple(f"{r}.{s}" for r in REGIONS for s in STATISTICS)
# statistics entering the regression as log(x + eps): fog scales them by t
_LOG_STATS = ("rms_contrast", "michelson_contrast", "mean_saturation", "mean_gradient")
_LOG_EPS = 1e-4
#: beta levels of the synthetic training sets
TRAINING_BETAS = (0.0, 0.005, 0.01, 0.02)
DEFAULT_LAMBDA = 1e-3
MODEL_FORMAT = "fogkit-density"
MODEL_VERSION = 1


class FogEstimator(Protocol):
    def estimate(self, image: np.ndarray) -> float: ...


def luminance(img: np.ndarray) -> np.ndarray:
    return img @ np.array([0.2126, 0.7152, 0.0722])


def image_statistics(img: np.ndarray) -> np.ndarray:
    """The :data:`STATISTICS` of one image region.

    Michelson contrast uses the 1st/99th luminance percentiles so that
    isolated noisy pixels do not dominate it.
    """
    lum = luminance(img)
    lo, hi = np.percentile(lum, [1, 99])
    michelson = (hi - lo) / (hi + lo) if hi + lo > 0 else 0.0
    cmax, cmin = img.max(axis=2), img.min(axis=2)
    sat = np.where(cmax > 0, (cmax - cmin) / np.where(cmax > 0, cmax, 1.0), 0.0)
    if min(lum.shape) > 1:
        gy, gx = np.gradient(lum)
        grad = float(np.hypot(gx, gy).mean())
    else:
        grad = 0.0
    flat = lum.ravel()
    top = flat[flat >= np.percentile(flat, 90)].mean()
    return np.array([
        dark_channel(img, 15).mean(),
        dark_channel(img, 31).mean(),
        lum.std(),
        michelson,
        sat.mean(),
        grad,
        top,
    ])


def extract_features(img) -> np.ndarray:
    """Fog feature vector ordered as :data:`FEATURE_NAMES`: the statistics of
    the whole image followed by those of its top, middle and bottom thirds."""
    img = as_rgb(img)
    h = img.shape[0]
    parts = [img]
    if h >= 3:
        parts += [img[: h // 3], img[h // 3: 2 * h // 3], img[2 * h // 3:]]
    else:
        parts += [img] * 3
    return np.concatenate([image_statistics(p) for p in parts])


def _log_columns(names: Sequence[str]) -> np.ndarray:
    return np.array([n.rsplit(".", 1)[-1] in _LOG_STATS for n in names], dtype=bool)


def regression_inputs(features, names: Sequence[str] = FEATURE_NAMES) -> np.ndarray:
    """Raw features -> regression inputs (log of the contrast-like ones)."""
    x = np.array(np.atleast_2d(features), dtype=np.float64)
    cols = _log_columns(names)
    x[:, cols] = np.log(np.maximum(x[:, cols], 0.0) + _LOG_EPS)
    return x


@dataclass(frozen=True)
class DensityModel:
    weights: np.ndarray
    bias: float
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    betas: tuple[float, ...]
    lambda_ridge: float
    residual_rms: float = 0.0
    residual_max: float = 0.0
    feature_names: tuple[str, ...] = FEATURE_NAMES

    def raw_predict(self, features) -> np.ndarray:
        x = regression_inputs(features, self.feature_names)
        x = (x - self.feature_mean) / self.feature_scale
        return x @ self.weights + self.bias

    def predict(self, features) -> np.ndarray:
        return np.maximum(0.0, self.raw_predict(features))

    def estimate(self, image) -> float:
        return float(self.predict(extract_features(image))[0])

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "feature_names": list(self.feature_names),
            "weights": [float(v) for v in self.weights],
            "bias": float(self.bias),
            "feature_mean": [float(v) for v in self.feature_mean],
            "feature_scale": [float(v) for v in self.feature_scale],
            "betas": [float(b) for b in self.betas],
            "lambda_ridge": float(self.lambda_ridge),
            "residual_rms": float(self.residual_rms),
            "residual_max": float(self.residual_max),
        }

    @classmethod
    def from_dict(cls, meta: dict) -> "DensityModel":
        if meta.get("format") != MODEL_FORMAT:
            raise ValueError("not a density model file")
        if meta.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported density model version {meta.get('version')}")
        return cls(
            np.asarray(meta["weights"], dtype=np.float64),
            float(meta["bias"]),
            np.asarray(meta["feature_mean"], dtype=np.float64),
            np.asarray(meta["feature_scale"], dtype=np.float64),
            tuple(meta["betas"]),
            float(meta["lambda_ridge"]),
            float(meta.get("residual_rms", 0.0)),
            float(meta.get("residual_max", 0.0)),
            tuple(meta["feature_names"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DensityModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_density_model(samples: Iterable[tuple[np.ndarray, float]], lambda_ridge: float = DEFAULT_LAMBDA,
                      feature_names: Sequence[str] = FEATURE_NAMES) -> DensityModel:
    """Ridge regression of beta on standardized regression inputs.

    Minimizes ``mean((Zw + b - beta)**2) + lambda_ridge * |w|**2``; the
    intercept is not penalized.  Requires at least two distinct beta levels.
    """
    samples = list(samples)
    if lambda_ridge < 0:
        raise ValueError("lambda_ridge must be non-negative")
    raw = np.array([np.asarray(f, dtype=np.float64) for f, _ in samples])
    names = tuple(feature_names) if len(feature_names) == raw.shape[1] else tuple(
        f"f{i}" for i in range(raw.shape[1]))
    X = regression_inputs(raw, names)
    y = np.array([float(b) for _, b in samples])
    levels = tuple(sorted(set(y.tolist())))
    if len(levels) < 2:
        raise ValueError("need samples from at least two distinct beta levels")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    Z = (X - mean) / scale
    yc = y - y.mean()
    gram = Z.T @ Z
    if lambda_ridge == 0 and np.linalg.matrix_rank(Z) < Z.shape[1]:
        raise ValueError("degenerate design matrix; use lambda_ridge > 0")
    n = Z.shape[0]
    w = np.linalg.solve(gram / n + lambda_ridge * np.eye(Z.shape[1]), Z.T @ yc / n)
    resid = Z @ w + y.mean() - y
    return DensityModel(w, float(y.mean()), mean, scale, levels, float(lambda_ridge),
                        float(np.sqrt(np.mean(resid**2))), float(np.abs(resid).max()), names)


def predict_density(model: FogEstimator, image) -> float:
    """Non-negative fog density estimate of one image."""
    return max(0.0, float(model.estimate(image)))


@dataclass(frozen=True)
class RankEntry:
    index: int
    name: str
    estimate: float
    percentile: float


def rank_by_density(model: FogEstimator, images: Sequence, names: Sequence[str] | None = None,
                    estimates: Sequence[float] | None = None) -> list[RankEntry]:
    """Order images by increasing estimated fog density (stable on ties).

    ``percentile`` is the share of images whose estimate is at most this
    one's, in percent.  Precomputed ``estimates`` skip the model.
    """
    if estimates is None:
        estimates = [model.estimate(img) for img in images]
    est = np.asarray(estimates, dtype=np.float64)
    n = est.size
    if names is None:
        names = [str(i) for i in range(n)]
    order = np.argsort(est, kind="stable")
    return [
        RankEntry(int(i), names[i], float(est[i]),
                  float(stats.percentileofscore(est, est[i], kind="weak")))
        for i in order
    ]


def spearman(estimates, truths) -> float:
    return float(stats.spearmanr(estimates, truths).statistic)


def pairwise_agreement(estimates, truths) -> float:
    """Share of pairs with different true density whose estimates are
    strictly ordered the same way."""
    e = np.asarray(estimates, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    dt = np.sign(t[:, None] - t[None, :])
    de = np.sign(e[:, None] - e[None, :])
    pairs = np.triu(dt != 0, 1)
    if not pairs.any():
        raise ValueError("no pairs with distinct truths")
    return float((dt == de)[pairs].mean())


@dataclass
class AblationResult:
    baseline: float
    per_feature: dict[str, float] = field(default_factory=dict)  # spearman drop


def feature_ablation(train: Sequence[tuple[np.ndarray, float]], test: Sequence[tuple[np.ndarray, float]],
                     lambda_ridge: float = DEFAULT_LAMBDA,
                     feature_names: Sequence[str] = FEATURE_NAMES) -> AblationResult:
    """Held-out Spearman drop when each statistic is removed (from every region)."""
    names = list(feature_names)

    def score(cols):
        model = fit_density_model([(f[cols], b) for f, b in train], lambda_ridge,
                                  [names[c] for c in cols])
        est = model.predict(np.array([f[cols] for f, _ in test]))
        return spearman(est, [b for _, b in test])

    allc = list(range(len(names)))
    result = AblationResult(score(allc))
    stats_in_use = dict.fromkeys(n.rsplit(".", 1)[-1] for n in names)
    for stat in stats_in_use:
        keep = [c for c in allc if names[c].rsplit(".", 1)[-1] != stat]
        result.per_feature[stat] = result.baseline - score(keep)
    return result
