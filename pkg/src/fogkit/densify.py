"""Depth-free fog densification of real foggy images.

Without depth, the transmittance of an input foggy image is taken as one
global value, the expected transmittance under a reference distribution of
scene distances.  Densifying from ``beta_l`` to ``beta_d`` then reduces to

    I_d = (t_d / t_l) * I_l + (1 - t_d / t_l) * L

which never needs the clear radiance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ScalarMap, as_rgb
from .depth import DISTANCE_MAX, DISTANCE_MIN

HISTOGRAM_FORMAT = "fogkit-distance-histogram"
HISTOGRAM_VERSION = 1
DEFAULT_BINS = 64


@dataclass(frozen=True)
class DistanceHistogram:
    centers: np.ndarray  # meters, strictly increasing
    probabilities: np.ndarray  # sums to 1
    edges: np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        p = np.asarray(self.probabilities, dtype=np.float64)
        if c.ndim != 1 or c.shape != p.shape or c.size == 0:
            raise ValueError("centers and probabilities must be equal-length 1D arrays")
        if np.any(c <= 0) or np.any(np.diff(c) <= 0):
            raise ValueError("bin centers must be positive and strictly increasing")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "probabilities", p)

    def save(self, path) -> None:
        meta = {
            "format": HISTOGRAM_FORMAT,
            "version": HISTOGRAM_VERSION,
            "centers": [float(v) for v in self.centers],
            "probabilities": [float(v) for v in self.probabilities],
        }
        if self.edges is not None:
            meta["edges"] = [float(v) for v in self.edges]
        Path(path).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DistanceHistogram":
        meta = json.loads(Path(path).read_text())
        if meta.get("format") != HISTOGRAM_FORMAT or meta.get("version") != HISTOGRAM_VERSION:
            raise ValueError(f"{path}: not a version-{HISTOGRAM_VERSION} distance histogram")
        edges = meta.get("edges")
        return cls(np.asarray(meta["centers"]), np.asarray(meta["probabilities"]),
                   None if edges is None else np.asarray(edges))


def build_distance_histogram(distance_maps: Sequence[ScalarMap], bins: int = DEFAULT_BINS,
                             l_min: float = DISTANCE_MIN, l_max: float = DISTANCE_MAX) -> DistanceHistogram:
    """Pool valid distances into log-spaced bins over ``[l_min, l_max]``.

    Bin centers are geometric means of the bin edges.  Distances outside the
    range fall into the end bins.  Empty bins are kept with probability 0,
    so histograms built from different corpora share one layout.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    edges = np.geomspace(l_min, l_max, bins + 1)
    counts = np.zeros(bins)
    for dm in distance_maps:
        v = np.clip(dm.values[dm.mask], l_min, l_max)
        idx = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, bins - 1)
        counts += np.bincount(idx, minlength=bins)
    total = counts.sum()
    if total == 0:
        raise ValueError("no valid distance samples")
    centers = np.sqrt(edges[:-1] * edges[1:])
    return DistanceHistogram(centers, counts / total, edges)


def expected_transmittance(hist: DistanceHistogram, beta: float) -> float:
    """``sum_i p_i exp(-beta * l_i)``."""
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    return float(np.dot(hist.probabilities, np.exp(-beta * hist.centers)))


def densify_with_transmittance(foggy, t_l: float, t_d: float, light) -> np.ndarray:
    if not (0 < t_d <= t_l <= 1):
        raise ValueError("need 0 < t_d <= t_l <= 1")
    img = np.asarray(foggy, dtype=np.float64)
    L = np.asarray(light, dtype=np.float64).reshape(1, 1, 3)
    ratio = t_d / t_l
    return np.clip(ratio * img + (1.0 - ratio) * L, 0.0, 1.0)


def densify_image(foggy, beta_l: float, beta_d: float, hist: DistanceHistogram, light) -> np.ndarray:
    """Increase the fog density of ``foggy`` from ``beta_l`` to ``beta_d``."""
    if beta_l < 0:
        raise ValueError("beta_l must be non-negative")
    if beta_d < beta_l:
        raise ValueError(f"beta_d={beta_d} is below beta_l={beta_l}")
    img = as_rgb(foggy, "foggy image")
    return densify_with_transmittance(img, expected_transmittance(hist, beta_l),
                                      expected_transmittance(hist, beta_d), light)


def clear_radiance(foggy, t_l: float, light) -> np.ndarray:
    """Clear-scene radiance under constant transmittance (unclipped)."""
    if not t_l > 0:
        raise ValueError("t_l must be positive")
    L = np.asarray(light, dtype=np.float64).reshape(1, 1, 3)
    return (np.asarray(foggy, dtype=np.float64) - L) / t_l + L


def map_target_beta(beta_l: float, beta_prev: float, beta_next: float) -> float:
    """Linear map of ``[0, beta_prev]`` onto ``[beta_prev, beta_next]``."""
    if not (beta_prev > 0 and beta_prev < beta_next):
        raise ValueError("need 0 < beta_prev < beta_next")
    if not (0 <= beta_l <= beta_prev):
        raise ValueError(f"beta_l={beta_l} outside [0, {beta_prev}]")
    return beta_prev + beta_l * (beta_next - beta_prev) / beta_prev
