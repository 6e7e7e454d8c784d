"""Procedural street scenes with analytic depth for desk-scale experiments.

Scenes are rendered from a pinhole camera above a ground plane: road and
sidewalks on the ground, fronto-parallel boxes for buildings, vegetation and
cars, thin poles, and sky at the distance clamp.  Two appearance domains
exist: ``"clear"`` (the labeled clear-weather corpus) and ``"real"`` (the
unlabeled foggy corpus), which differ slightly in palette.

"Real" fog is rendered differently from the simulator: density varies
smoothly across the image, the atmospheric light is a tinted gray unrelated
to the sky, and forward scattering blurs the image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import ScalarMap, SemanticLabeling
from .depth import DISTANCE_MAX, DISTANCE_MIN, CameraModel

# Cityscapes train ids
ROAD, SIDEWALK, BUILDING, POLE, VEGETATION, SKY, CAR = 0, 1, 2, 5, 8, 10, 13
NUM_CLASSES = 19
CLASS_NAMES = {ROAD: "road", SIDEWALK: "sidewalk", BUILDING: "building", POLE: "pole",
               VEGETATION: "vegetation", SKY: "sky", CAR: "car"}
TOY_CLASSES = tuple(sorted(CLASS_NAMES))

#: Stereo rig of the toy camera (focal in pixels of a 128-pixel-wide frame).
TOY_CAMERA = CameraModel(100.0, 0.5, (64.0, 64.0))
_CAM_HEIGHT = 1.5

# base colors (sRGB) per domain; instances jitter around these
_PALETTES = {
    "clear": {
        ROAD: (0.50, 0.47, 0.50), SIDEWALK: (0.72, 0.60, 0.62), BUILDING: (0.55, 0.38, 0.30),
        POLE: (0.22, 0.22, 0.24), VEGETATION: (0.25, 0.50, 0.18), CAR: (0.15, 0.20, 0.55),
        SKY: (0.58, 0.70, 0.88),
    },
    "real": {
        ROAD: (0.46, 0.45, 0.48), SIDEWALK: (0.68, 0.60, 0.57), BUILDING: (0.60, 0.43, 0.33),
        POLE: (0.25, 0.24, 0.25), VEGETATION: (0.28, 0.47, 0.22), CAR: (0.20, 0.22, 0.50),
        SKY: (0.60, 0.70, 0.86),
    },
}
_JITTER = {"clear": 0.06, "real": 0.06}


@dataclass(frozen=True)
class ToyScene:
    image: np.ndarray  # (H, W, 3) sRGB in [0, 1]
    classes: np.ndarray  # (H, W) train ids
    instances: np.ndarray  # (H, W) instance-aware ids, < 256
    instance_class: dict[int, int]
    distance: np.ndarray  # (H, W) meters

    def class_labeling(self) -> SemanticLabeling:
        return SemanticLabeling(self.classes, NUM_CLASSES)

    def instance_labeling(self) -> SemanticLabeling:
        return SemanticLabeling(self.instances, NUM_CLASSES, instance_aware=True,
                                id_to_class=dict(self.instance_class))

    def distance_map(self) -> ScalarMap:
        return ScalarMap(self.distance)


def make_scene(rng: np.random.Generator, size: int = 128, domain: str = "clear") -> ToyScene:
    palette = _PALETTES[domain]
    jitter = _JITTER[domain]
    H = W = size
    f = TOY_CAMERA.focal_length * size / 128.0
    horizon = rng.uniform(0.35, 0.5) * H
    rows = np.arange(H) + 0.5
    cols = np.arange(W) + 0.5

    classes = np.full((H, W), SKY, dtype=np.int64)
    instances = np.zeros((H, W), dtype=np.int64)
    inst_class = {0: SKY}
    dist = np.full((H, W), DISTANCE_MAX)
    color = np.zeros((H, W, 3))

    def base(cls):
        return np.clip(np.asarray(palette[cls]) + rng.normal(0, jitter, 3), 0.02, 0.98)

    # sky: vertical gradient toward the horizon
    sky_top, sky_bottom = base(SKY), np.clip(np.asarray(palette[SKY]) + 0.12, 0, 1)
    a = np.clip(rows / max(horizon, 1.0), 0, 1)[:, None, None]
    color[:] = sky_top * (1 - a) + sky_bottom * a

    # ground plane
    below = rows > horizon
    z_ground = np.where(below, f * _CAM_HEIGHT / np.maximum(rows - horizon, 1e-6), DISTANCE_MAX)
    z_ground = np.clip(z_ground, DISTANCE_MIN, DISTANCE_MAX)
    vp = W * rng.uniform(0.4, 0.6)
    half_road = rng.uniform(3.0, 5.0)  # meters
    walk = rng.uniform(2.0, 4.0)
    road_c, walk_c, veg_c = base(ROAD), base(SIDEWALK), base(VEGETATION)
    next_id = 1
    ids = {}
    for cls in (ROAD, SIDEWALK, VEGETATION):
        ids[cls] = next_id
        inst_class[next_id] = cls
        next_id += 1
    for r in np.flatnonzero(below):
        z = z_ground[r]
        lateral = (cols - vp) * z / f  # meters from road center
        row_cls = np.where(np.abs(lateral) < half_road, ROAD,
                           np.where(np.abs(lateral) < half_road + walk, SIDEWALK, VEGETATION))
        classes[r] = row_cls
        instances[r] = [ids[c] for c in row_cls]
        dist[r] = z
        color[r] = np.where((row_cls == ROAD)[:, None], road_c,
                            np.where((row_cls == SIDEWALK)[:, None], walk_c, veg_c))

    def ground_row(z):
        return horizon + f * _CAM_HEIGHT / z

    objects = []
    for _ in range(rng.integers(3, 7)):  # buildings, left and right of the road
        z = rng.uniform(15.0, 120.0)
        side = rng.choice([-1, 1])
        lat0 = side * (half_road + walk + rng.uniform(0.0, 4.0))
        width = rng.uniform(8.0, 30.0)
        objects.append((z, BUILDING, lat0, lat0 + side * width, rng.uniform(8.0, 30.0)))
    for _ in range(rng.integers(1, 4)):  # trees
        z = rng.uniform(8.0, 60.0)
        side = rng.choice([-1, 1])
        lat0 = side * (half_road + walk + rng.uniform(0.0, 2.0))
        objects.append((z, VEGETATION, lat0, lat0 + side * rng.uniform(2.0, 6.0), rng.uniform(3.0, 8.0)))
    for _ in range(rng.integers(0, 4)):  # cars on the road
        z = rng.uniform(6.0, 50.0)
        lat0 = rng.uniform(-half_road, half_road - 1.8)
        objects.append((z, CAR, lat0, lat0 + 1.8, 1.5))
    for _ in range(rng.integers(1, 4)):  # poles at the curb
        z = rng.uniform(5.0, 35.0)
        lat0 = rng.choice([-1, 1]) * (half_road + rng.uniform(0.2, 0.8))
        objects.append((z, POLE, lat0, lat0 + 0.3, rng.uniform(4.0, 8.0)))

    for z, cls, l0, l1, height in sorted(objects, key=lambda o: -o[0]):
        lo, hi = sorted((l0, l1))
        c0 = int(np.floor(vp + lo * f / z))
        c1 = int(np.ceil(vp + hi * f / z))
        if cls == POLE:
            c1 = max(c1, c0 + 2)
        r1 = int(np.ceil(ground_row(z)))
        r0 = int(np.floor(ground_row(z) - height * f / z))
        c0, c1 = max(0, c0), min(W, c1)
        r0, r1 = max(0, r0), min(H, r1)
        if c0 >= c1 or r0 >= r1 or next_id > 255:
            continue
        classes[r0:r1, c0:c1] = cls
        instances[r0:r1, c0:c1] = next_id
        inst_class[next_id] = cls
        next_id += 1
        dist[r0:r1, c0:c1] = z
        c = base(cls)
        if cls == BUILDING:  # window rows
            stripes = ((np.arange(r0, r1) - r0) // 3) % 2 == 1
            block = np.broadcast_to(c, (r1 - r0, c1 - c0, 3)).copy()
            block[stripes] *= 0.75
            color[r0:r1, c0:c1] = block
        else:
            color[r0:r1, c0:c1] = c

    # texture and shading
    noise = ndimage.gaussian_filter(rng.normal(0, 1, (H, W)), 1.0)
    color *= (1.0 + 0.06 * noise)[..., None]
    color += rng.normal(0, 0.015, color.shape)
    image = np.clip(color, 0.0, 1.0)
    return ToyScene(image, classes, instances, inst_class, np.clip(dist, DISTANCE_MIN, DISTANCE_MAX))


def render_real_fog(scene: ToyScene, beta: float, rng: np.random.Generator) -> np.ndarray:
    """Fog unlike the simulator's: heterogeneous density, a gray atmospheric
    light unrelated to the sky color, and forward-scatter blur."""
    H, W = scene.distance.shape
    field = ndimage.gaussian_filter(rng.normal(0, 1, (H, W)), H / 8.0, mode="wrap")
    field /= field.std() + 1e-12
    beta_map = beta * np.clip(1.0 + 0.3 * field, 0.3, None)
    t = np.exp(-beta_map * scene.distance)[..., None]
    gray = rng.uniform(0.72, 0.92)
    light = np.clip(gray + np.array([-0.03, 0.0, 0.04]) + rng.normal(0, 0.01, 3), 0, 1)
    img = scene.image * t + light * (1.0 - t)
    blur = 15.0 * beta
    img = ndimage.gaussian_filter(img, (blur, blur, 0))
    return np.clip(img, 0.0, 1.0)


def disparity_from_distance(distance: np.ndarray, camera: CameraModel, rng: np.random.Generator | None = None,
                            hole_fraction: float = 0.0, outlier_fraction: float = 0.0,
                            invalid_beyond: float = 500.0) -> ScalarMap:
    """Stereo-like disparity for an analytic distance map.

    Pixels farther than ``invalid_beyond`` are invalid (no stereo match); a
    ``hole_fraction`` of pixels is dropped in blobs and an ``outlier_fraction``
    replaced by gross errors.
    """
    d = camera.focal_length * camera.baseline / distance
    mask = distance < invalid_beyond
    if rng is not None and hole_fraction > 0:
        blobs = ndimage.gaussian_filter(rng.random(distance.shape), 2.0)
        mask &= blobs > np.quantile(blobs, hole_fraction)
    if rng is not None and outlier_fraction > 0:
        out = rng.random(distance.shape) < outlier_fraction
        d = np.where(out, d + rng.uniform(5.0, 20.0, distance.shape), d)
    return ScalarMap(d, mask)
