"""Shared raster containers, color conversion and visibility helpers.

Images live in memory as ``float64`` arrays of shape ``(H, W, 3)`` holding
gamma-encoded sRGB intensities in ``[0, 1]``.  Scalar fields that may have
holes (disparity, distance, transmittance) are wrapped in :class:`ScalarMap`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

#: ``MOR = MOR_CONTRAST / beta`` for homogeneous fog (5% contrast threshold).
MOR_CONTRAST = 2.996
#: Fog means a visibility below 1 km, hence the smallest "foggy" beta.
FOG_BETA_MIN = MOR_CONTRAST / 1000.0

_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_TO_SRGB = np.linalg.inv(_SRGB_TO_XYZ)
# D65 white taken from the matrix itself so that sRGB white maps to a*=b*=0.
_WHITE_D65 = _SRGB_TO_XYZ.sum(axis=1)
_LAB_EPS = (6.0 / 29.0) ** 3


def as_rgb(img, name: str = "image") -> np.ndarray:
    """Validate and return an RGB image as a float64 ``(H, W, 3)`` array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] * arr.shape[1] == 0:
        raise ValueError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def srgb_to_linear(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(v: np.ndarray) -> np.ndarray:
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, None)
    return np.where(v <= 0.0031308, 12.92 * v, 1.055 * v ** (1.0 / 2.4) - 0.055)


def rgb_to_lab(img) -> np.ndarray:
    """Convert gamma-encoded sRGB in ``[0, 1]`` to CIELAB under D65.

    Returns an array of the same shape whose last axis is ``(L*, a*, b*)``.
    """
    rgb = np.asarray(img, dtype=np.float64)
    xyz = srgb_to_linear(rgb) @ _SRGB_TO_XYZ.T / _WHITE_D65
    f = np.where(xyz > _LAB_EPS, np.cbrt(xyz), xyz / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def lab_to_rgb(lab) -> np.ndarray:
    """Inverse of :func:`rgb_to_lab`; out-of-gamut results are clipped."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    f = np.stack([fy + lab[..., 1] / 500.0, fy, fy - lab[..., 2] / 200.0], axis=-1)
    delta = 6.0 / 29.0
    xyz = np.where(f > delta, f**3, 3 * delta**2 * (f - 4.0 / 29.0)) * _WHITE_D65
    return np.clip(linear_to_srgb(xyz @ _XYZ_TO_SRGB.T), 0.0, 1.0)


def mor_to_beta(mor: float) -> float:
    """Attenuation coefficient (1/m) for a meteorological optical range in meters."""
    if not mor > 0:
        raise ValueError(f"MOR must be positive, got {mor}")
    return MOR_CONTRAST / mor


def beta_to_mor(beta: float) -> float:
    """Meteorological optical range (m) for an attenuation coefficient (1/m)."""
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    return MOR_CONTRAST / beta


def fog_regime(beta: float) -> str:
    """Classify a beta as ``"clear"``, ``"mist"`` (visibility >= 1 km) or ``"fog"``."""
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    if beta == 0:
        return "clear"
    return "mist" if beta < FOG_BETA_MIN else "fog"


@dataclass(frozen=True)
class ScalarMap:
    """Per-pixel scalar field with a validity mask.

    Invalid pixels carry arbitrary values and must be ignored by consumers.
    """

    values: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.size == 0:
            raise ValueError(f"ScalarMap values must be a non-empty 2D array, got {values.shape}")
        mask = np.isfinite(values) if self.mask is None else np.asarray(self.mask, dtype=bool)
        if mask.shape != values.shape:
            raise ValueError("ScalarMap mask and values differ in shape")
        values = values.copy()
        mask = mask.copy()
        values.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def fully_valid(self) -> bool:
        return bool(self.mask.all())

    def with_mask(self, mask: np.ndarray) -> "ScalarMap":
        return ScalarMap(self.values, mask)


@dataclass(frozen=True)
class SemanticLabeling:
    """Integer label map plus the table mapping label ids to classes.

    ``id_to_class`` is ``None`` when ids already are class indices.  With
    ``instance_aware`` set, distinct instances of a class carry distinct ids.
    """

    labels: np.ndarray
    num_classes: int
    instance_aware: bool = False
    id_to_class: dict[int, int] | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or labels.size == 0:
            raise ValueError("labels must be a non-empty 2D array")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError("labels must be integers")
        if labels.min() < 0:
            raise ValueError("labels must be non-negative")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        labels = labels.astype(np.int64)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def class_map(self, void: int = 255) -> np.ndarray:
        """Per-pixel class index; ids missing from the table become ``void``."""
        if self.id_to_class is None:
            return self.labels.copy()
        lut = np.full(int(self.labels.max()) + 1, void, dtype=np.int64)
        for k, v in self.id_to_class.items():
            if k < lut.size:
                lut[k] = v
        return lut[self.labels]


@dataclass(frozen=True)
class FogParams:
    beta: float
    atmospheric_light: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        light = tuple(float(c) for c in self.atmospheric_light)
        if len(light) != 3 or not all(0.0 <= c <= 1.0 for c in light):
            raise ValueError("atmospheric light must be an RGB triple in [0, 1]")
        object.__setattr__(self, "atmospheric_light", light)

    @property
    def regime(self) -> str:
        return fog_regime(self.beta)
