"""Atmospheric light estimation, the fog image formation model and the
end-to-end fog simulation on a labeled clear-weather scene."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import dbf, depth
from .core import FOG_BETA_MIN, ScalarMap, SemanticLabeling, as_rgb, fog_regime, rgb_to_lab

log = logging.getLogger(__name__)

#: Cityscapes train id of the sky class.
SKY_CLASS = 10


@dataclass(frozen=True)
class LabeledScene:
    """A clear-weather image with semantics and either disparity or distance.

    ``distance`` (meters, fully valid) short-circuits depth completion;
    otherwise ``disparity`` and ``camera`` are required.
    """

    image: np.ndarray
    labels: SemanticLabeling
    disparity: ScalarMap | None = None
    distance: ScalarMap | None = None
    camera: depth.CameraModel | None = None
    name: str = ""


@dataclass(frozen=True)
class SimulationParams:
    filter: dbf.FilterParams = field(default_factory=dbf.FilterParams)
    spatial_cell: float | None = None
    range_cell: float | None = None
    atmospheric_light: tuple[float, float, float] | None = None  # None: estimate
    sky_class: int | None = SKY_CLASS
    superpixels: int | None = None
    compactness: float = 10.0
    outlier_k: float = 3.0
    ransac_iters: int = 500
    inlier_tol: float = 1.0
    min_inliers: int = 12
    seed: int = 0


@dataclass(frozen=True)
class FogResult:
    foggy: np.ndarray
    t: ScalarMap
    t_hat: ScalarMap
    atmospheric_light: tuple[float, float, float]
    beta: float
    regime: str  # "clear" | "mist" | "fog"


def dark_channel(img: np.ndarray, window: int = 15) -> np.ndarray:
    """Per-pixel minimum over channels and a ``window x window`` neighbourhood."""
    return ndimage.minimum_filter(np.asarray(img).min(axis=2), size=window, mode="nearest")


def estimate_atmospheric_light(img, labels=None, sky_class: int | None = SKY_CLASS,
                               window: int = 15, fraction: float = 1e-3) -> tuple[float, float, float]:
    """Mean color of the pixels with the brightest dark channel.

    The top ``fraction`` of candidates (at least one pixel) is averaged.  When
    ``labels`` are given and contain ``sky_class``, candidates are restricted
    to sky pixels.  Ties in the dark channel are broken by raster order.
    """
    img = as_rgb(img)
    dark = dark_channel(img, window).ravel()
    cand = np.arange(dark.size)
    if labels is not None and sky_class is not None:
        cls = labels.class_map() if isinstance(labels, SemanticLabeling) else np.asarray(labels)
        sky = np.flatnonzero(cls.ravel() == sky_class)
        if sky.size:
            cand = sky
    n = max(1, int(np.floor(cand.size * fraction)))
    order = np.argsort(-dark[cand], kind="stable")[:n]
    light = img.reshape(-1, 3)[cand[order]].mean(axis=0)
    return tuple(float(c) for c in np.clip(light, 0.0, 1.0))


def synthesize_fog(clear, t, light) -> np.ndarray:
    """``I = R * t + L * (1 - t)`` per pixel, clamped to ``[0, 1]``."""
    clear = np.asarray(clear, dtype=np.float64)
    tv = t.values if isinstance(t, ScalarMap) else np.asarray(t, dtype=np.float64)
    if isinstance(t, ScalarMap) and not t.fully_valid:
        raise ValueError("transmittance must be valid everywhere")
    if tv.shape != clear.shape[:2]:
        raise ValueError(f"dimension mismatch: image {clear.shape[:2]}, t {tv.shape}")
    L = np.asarray(light, dtype=np.float64).reshape(1, 1, 3)
    tt = tv[..., None]
    return np.clip(clear * tt + L * (1.0 - tt), 0.0, 1.0)


def recover_transmittance(foggy, clear, light) -> np.ndarray:
    """Invert the image formation model for t (channel-averaged where ``R != L``)."""
    foggy = np.asarray(foggy, dtype=np.float64)
    clear = np.asarray(clear, dtype=np.float64)
    L = np.asarray(light, dtype=np.float64).reshape(1, 1, 3)
    den = clear - L
    ok = np.abs(den) > 1e-6
    est = np.where(ok, (foggy - L) / np.where(ok, den, 1.0), 0.0)
    cnt = ok.sum(axis=2)
    with np.errstate(invalid="ignore"):
        return np.where(cnt > 0, est.sum(axis=2) / np.maximum(cnt, 1), np.nan)


def scene_distance(scene: LabeledScene, params: SimulationParams = SimulationParams()) -> ScalarMap:
    if scene.distance is not None:
        if not scene.distance.fully_valid:
            raise ValueError("scene distance map must be fully valid")
        return scene.distance
    if scene.disparity is None or scene.camera is None:
        raise ValueError("scene needs a distance map, or disparity plus camera")
    return depth.complete_distance(
        scene.disparity, rgb_to_lab(scene.image), scene.camera,
        superpixels=params.superpixels, compactness=params.compactness,
        outlier_k=params.outlier_k, ransac_iters=params.ransac_iters,
        inlier_tol=params.inlier_tol, min_inliers=params.min_inliers, seed=params.seed,
    )


def simulate(scene: LabeledScene, beta: float, params: SimulationParams = SimulationParams(),
             distance: ScalarMap | None = None) -> FogResult:
    """Render homogeneous fog of density ``beta`` onto a labeled clear scene.

    Pipeline: depth completion (unless a distance map is available), initial
    transmittance ``exp(-beta * l)``, dual-reference filtering with labels
    and CIELAB color, then the image formation model.  ``distance`` may pass
    a precomputed completion to avoid repeating it across betas.
    """
    image = as_rgb(scene.image)
    regime = fog_regime(beta)
    light = params.atmospheric_light
    if light is None:
        light = estimate_atmospheric_light(image, scene.labels, params.sky_class)
    light = tuple(float(c) for c in light)
    if beta == 0:
        ones = ScalarMap(np.ones(image.shape[:2]))
        return FogResult(image.copy(), ones, ones, light, 0.0, regime)
    if beta < FOG_BETA_MIN:
        log.warning("beta=%g is below the fog bound %g (visibility above 1 km); tagging as mist",
                    beta, FOG_BETA_MIN)
    dist = distance if distance is not None else scene_distance(scene, params)
    t_hat = depth.transmittance_from_distance(dist, beta)
    t = dbf.dbf_grid(t_hat, rgb_to_lab(image), scene.labels.labels, params.filter,
                     params.spatial_cell, params.range_cell)
    return FogResult(synthesize_fog(image, t, light), t, t_hat, light, float(beta), regime)
