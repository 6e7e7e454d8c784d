"""Disparity cleanup and completion: SLIC superpixels, robust outlier rejection,
per-superpixel RANSAC plane fits and plane-based hole filling.

The output is a complete metric distance map, from which the initial
transmittance map is obtained with :func:`transmittance_from_distance`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import ScalarMap

#: Distance clamp (m) applied to completed depth.
DISTANCE_MIN = 2.0
DISTANCE_MAX = 1000.0


@dataclass(frozen=True)
class CameraModel:
    focal_length: float  # pixels
    baseline: float  # meters
    principal_point: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (self.focal_length > 0 and self.baseline > 0):
            raise ValueError("focal_length and baseline must be positive")


#: Stereo rig of the Cityscapes cameras.
CITYSCAPES_CAMERA = CameraModel(2262.52, 0.209313, (1096.98, 513.137))


def load_camera(path) -> CameraModel:
    """Read a calibration file.

    Accepts flat JSON (``focal_length``/``baseline``/``principal_point``),
    Cityscapes camera JSON (``intrinsic.fx``, ``extrinsic.baseline``) or a
    flat text file of ``key value`` / ``key=value`` lines.
    """
    text = Path(path).read_text()
    try:
        meta = json.loads(text)
    except json.JSONDecodeError:
        meta = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.replace("=", " ").partition(" ")
            meta[key.strip()] = [float(v) for v in value.split()]
        meta = {k: v[0] if len(v) == 1 else v for k, v in meta.items()}
    if "intrinsic" in meta:
        intr, extr = meta["intrinsic"], meta["extrinsic"]
        return CameraModel(float(intr["fx"]), float(extr["baseline"]),
                           (float(intr.get("u0", 0.0)), float(intr.get("v0", 0.0))))
    focal = meta.get("focal_length", meta.get("fx"))
    pp = meta.get("principal_point", (meta.get("u0", 0.0), meta.get("v0", 0.0)))
    return CameraModel(float(focal), float(meta["baseline"]), (float(pp[0]), float(pp[1])))


@dataclass(frozen=True)
class SuperpixelPartition:
    assignment: np.ndarray  # (H, W) int, contiguous ids 0..k-1
    k: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.assignment.shape


@dataclass(frozen=True)
class PlaneFit:
    """``disparity = a*u + b*v + c`` for one superpixel (u: column, v: row)."""

    coefficients: tuple[float, float, float]
    inliers: np.ndarray  # flat pixel indices
    status: str  # "ok" | "degenerate"
    hypothesis_inliers: int = 0  # inlier count of the best RANSAC sample

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def evaluate(self, u, v):
        a, b, c = self.coefficients
        return a * np.asarray(u, dtype=np.float64) + b * np.asarray(v, dtype=np.float64) + c


def _check_same_shape(a, b):
    if tuple(a) != tuple(b):
        raise ValueError(f"dimension mismatch: {tuple(a)} vs {tuple(b)}")


# ---------------------------------------------------------------------------
# SLIC


def slic(lab: np.ndarray, k: int, compactness: float = 10.0, iterations: int = 10) -> SuperpixelPartition:
    """SLIC superpixels on a CIELAB image.

    Distance is ``sqrt(d_lab**2 + (d_xy * m / S)**2)`` with ``S = sqrt(N / k)``;
    centers start on a regular grid (at most ``k`` of them), are nudged to the
    lowest-gradient position in a 3x3 neighbourhood and refined by 10 rounds
    of local k-means.  Disconnected fragments are merged into a neighbour.
    """
    lab = np.asarray(lab, dtype=np.float64)
    h, w = lab.shape[:2]
    n = h * w
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds the pixel count {n}")
    if not compactness > 0:
        raise ValueError("compactness must be positive")

    step = math.sqrt(n / k)
    ny = max(1, min(h, int(round(math.sqrt(k * h / w)))))
    nx = max(1, min(w, k // ny))
    cx = (np.arange(nx) + 0.5) * w / nx
    cy = (np.arange(ny) + 0.5) * h / ny
    gy, gx = np.meshgrid(cy, cx, indexing="ij")
    centers_xy = np.stack([gx.ravel(), gy.ravel()], axis=1)

    centers_xy = _perturb_to_low_gradient(lab, centers_xy)
    ci = np.clip(centers_xy[:, 1].astype(int), 0, h - 1)
    cj = np.clip(centers_xy[:, 0].astype(int), 0, w - 1)
    centers_lab = lab[ci, cj].copy()

    # initial assignment: grid cells
    rows = np.minimum((np.arange(h) * ny) // h, ny - 1)
    cols = np.minimum((np.arange(w) * nx) // w, nx - 1)
    assign = rows[:, None] * nx + cols[None, :]

    yy, xx = np.mgrid[0:h, 0:w]
    spatial_w = (compactness / step) ** 2
    half = int(math.ceil(max(w / nx, h / ny, step)))
    flat_lab = lab.reshape(-1, 3)
    for _ in range(iterations):
        dist = np.full((h, w), np.inf)
        for c in range(centers_xy.shape[0]):
            x0, y0 = centers_xy[c]
            r0, r1 = max(0, int(y0) - half), min(h, int(y0) + half + 1)
            c0, c1 = max(0, int(x0) - half), min(w, int(x0) + half + 1)
            d_lab = ((lab[r0:r1, c0:c1] - centers_lab[c]) ** 2).sum(axis=2)
            d_xy = (yy[r0:r1, c0:c1] - y0) ** 2 + (xx[r0:r1, c0:c1] - x0) ** 2
            d = d_lab + spatial_w * d_xy
            better = d < dist[r0:r1, c0:c1]
            dist[r0:r1, c0:c1][better] = d[better]
            assign[r0:r1, c0:c1][better] = c
        flat = assign.ravel()
        counts = np.bincount(flat, minlength=centers_xy.shape[0]).astype(np.float64)
        live = counts > 0
        for ch in range(3):
            s = np.bincount(flat, weights=flat_lab[:, ch], minlength=counts.size)
            centers_lab[live, ch] = s[live] / counts[live]
        sx = np.bincount(flat, weights=xx.ravel(), minlength=counts.size)
        sy = np.bincount(flat, weights=yy.ravel(), minlength=counts.size)
        centers_xy[live, 0] = sx[live] / counts[live]
        centers_xy[live, 1] = sy[live] / counts[live]

    assign = _enforce_connectivity(assign)
    return SuperpixelPartition(assign, int(assign.max()) + 1)


def _perturb_to_low_gradient(lab, centers_xy):
    h, w = lab.shape[:2]
    if h < 3 or w < 3:
        return centers_xy
    gy = np.zeros((h, w))
    gx = np.zeros((h, w))
    gy[1:-1] = ((lab[2:] - lab[:-2]) ** 2).sum(axis=2)
    gx[:, 1:-1] = ((lab[:, 2:] - lab[:, :-2]) ** 2).sum(axis=2)
    grad = gx + gy
    out = centers_xy.copy()
    for c, (x, y) in enumerate(centers_xy):
        i, j = int(y), int(x)
        best = (np.inf, i, j)
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                ii, jj = i + di, j + dj
                if 1 <= ii < h - 1 and 1 <= jj < w - 1 and grad[ii, jj] < best[0]:
                    best = (grad[ii, jj], ii, jj)
        if np.isfinite(best[0]):
            out[c] = (best[2] + 0.5, best[1] + 0.5)
    return out


def _enforce_connectivity(assign: np.ndarray) -> np.ndarray:
    """Make every label 4-connected and relabel to ``0..k-1`` in raster order."""
    four = ndimage.generate_binary_structure(2, 1)
    assign = assign.copy()
    while True:
        comp = np.zeros(assign.shape, dtype=np.int64)
        comp_label = [0]  # component id -> superpixel label
        next_id = 1
        for lab_id, box in enumerate(ndimage.find_objects(assign + 1)):
            if box is None:
                continue
            cc, m = ndimage.label(assign[box] == lab_id, structure=four)
            sel = cc > 0
            comp[box][sel] = cc[sel] + next_id - 1
            comp_label.extend([lab_id] * m)
            next_id += m
        comp_label = np.asarray(comp_label)
        sizes = np.bincount(comp.ravel(), minlength=next_id)
        # keep the largest component of each label (first one on ties)
        order = np.lexsort((np.arange(next_id), -sizes, comp_label))
        kept = np.zeros(next_id, dtype=bool)
        seen = set()
        for cid in order:
            if cid == 0:
                continue
            if comp_label[cid] not in seen:
                seen.add(comp_label[cid])
                kept[cid] = True
        kept[0] = False
        orphans = np.flatnonzero(~kept)
        orphans = orphans[orphans > 0]
        if orphans.size == 0:
            break
        # adjacency between components, both directions
        a = np.concatenate([comp[:, :-1].ravel(), comp[:-1, :].ravel()])
        b = np.concatenate([comp[:, 1:].ravel(), comp[1:, :].ravel()])
        src = np.concatenate([a, b])
        dst = np.concatenate([b, a])
        sel = (src != dst) & ~kept[src] & kept[dst]
        src, dst = src[sel], dst[sel]
        if src.size == 0:
            raise RuntimeError("connectivity enforcement did not converge")
        key = src * next_id + dst
        uniq, cnt = np.unique(key, return_counts=True)
        us, ud = uniq // next_id, uniq % next_id
        order = np.lexsort((ud, -cnt, us))
        us, ud = us[order], ud[order]
        first = np.ones(us.size, dtype=bool)
        first[1:] = us[1:] != us[:-1]
        remap = comp_label.copy()
        remap[us[first]] = comp_label[ud[first]]
        assign = remap[comp]
    _, first_idx, inverse = np.unique(assign.ravel(), return_index=True, return_inverse=True)
    rank = np.empty(first_idx.size, dtype=np.int64)
    rank[np.argsort(first_idx, kind="stable")] = np.arange(first_idx.size)
    return rank[inverse].reshape(assign.shape)


# ---------------------------------------------------------------------------
# Outliers and planes


def detect_outliers(disparity: ScalarMap, partition: SuperpixelPartition, k: float = 3.0) -> ScalarMap:
    """Invalidate pixels with ``|d - median| > k * MAD`` within their superpixel.

    For ``k >= 1`` at most half of a superpixel's valid pixels can be
    rejected, since at most half of the absolute deviations exceed the MAD.
    """
    _check_same_shape(disparity.shape, partition.shape)
    if k < 1:
        raise ValueError("k must be >= 1")
    values = disparity.values.ravel()
    mask = disparity.mask.ravel().copy()
    labels = partition.assignment.ravel()
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return disparity
    order = idx[np.argsort(labels[idx], kind="stable")]
    bounds = np.flatnonzero(np.diff(labels[order])) + 1
    for group in np.split(order, bounds):
        d = values[group]
        med = np.median(d)
        dev = np.abs(d - med)
        mad = np.median(dev)
        mask[group[dev > k * mad]] = False
    return disparity.with_mask(mask.reshape(disparity.shape))


def fit_planes(
    disparity: ScalarMap,
    partition: SuperpixelPartition,
    iters: int = 500,
    inlier_tol: float = 1.0,
    min_inliers: int = 12,
    seed: int = 0,
) -> list[PlaneFit]:
    """RANSAC plane fit ``d = a*u + b*v + c`` for every superpixel.

    Each superpixel draws its samples from its own generator seeded with
    ``(seed, index)``, consumed in the same order for any ``iters`` so that
    longer runs extend shorter ones.
    """
    _check_same_shape(disparity.shape, partition.shape)
    if iters < 1 or not inlier_tol > 0:
        raise ValueError("iters must be >= 1 and inlier_tol > 0")
    h, w = disparity.shape
    labels = partition.assignment.ravel()
    valid = disparity.mask.ravel()
    values = disparity.values.ravel()
    order = np.argsort(labels, kind="stable")
    counts = np.bincount(labels, minlength=partition.k)
    groups = np.split(order, np.cumsum(counts)[:-1])
    fits = []
    for sp, group in enumerate(groups):
        group = group[valid[group]]
        rng = np.random.default_rng([seed, sp])
        fits.append(_ransac_plane(group, values[group], w, iters, inlier_tol, min_inliers, rng))
    return fits


def _degenerate(n_inliers=0) -> PlaneFit:
    return PlaneFit((0.0, 0.0, 0.0), np.empty(0, dtype=np.int64), "degenerate", n_inliers)


def _lstsq_plane(pts: np.ndarray, d: np.ndarray):
    coef, _, rank, _ = np.linalg.lstsq(pts, d, rcond=None)
    return coef if rank == 3 else None


def _ransac_plane(flat_idx, d, width, iters, tol, min_inliers, rng) -> PlaneFit:
    n = flat_idx.size
    if n < max(3, min_inliers):
        return _degenerate()
    u = (flat_idx % width).astype(np.float64)
    v = (flat_idx // width).astype(np.float64)
    pts = np.stack([u, v, np.ones(n)], axis=1)
    samples = np.minimum((rng.random((iters, 3)) * n).astype(np.int64), n - 1)

    best_count, best_iter = -1, -1
    chunk = max(1, min(iters, 4_000_000 // n))
    best_coef = None
    for s0 in range(0, iters, chunk):
        sm = samples[s0:s0 + chunk]
        A = pts[sm]  # (c, 3, 3)
        det = np.linalg.det(A)
        ok = np.abs(det) > 1e-9
        if not ok.any():
            continue
        coef = np.zeros((sm.shape[0], 3))
        coef[ok] = np.linalg.solve(A[ok], d[sm[ok]][..., None])[..., 0]
        resid = np.abs(pts @ coef.T - d[:, None])
        cnt = np.where(ok, (resid <= tol).sum(axis=0), -1)
        j = int(np.argmax(cnt))
        if cnt[j] > best_count:
            best_count, best_iter, best_coef = int(cnt[j]), s0 + j, coef[j]
    if best_coef is None or best_count < 3:
        return _degenerate(max(best_count, 0))

    inl = np.abs(pts @ best_coef - d) <= tol
    coef = _lstsq_plane(pts[inl], d[inl])
    if coef is None:
        return _degenerate(best_count)
    for _ in range(5):
        refined = np.abs(pts @ coef - d) <= tol
        if refined.sum() < inl.sum() or np.array_equal(refined, inl):
            break
        new = _lstsq_plane(pts[refined], d[refined])
        if new is None:
            break
        inl, coef = refined, new
    return PlaneFit(tuple(float(c) for c in coef), flat_idx[inl], "ok", best_count)


def disparity_to_distance(disparity, camera: CameraModel,
                          l_min: float = DISTANCE_MIN, l_max: float = DISTANCE_MAX) -> np.ndarray:
    """``focal * baseline / d`` clamped to ``[l_min, l_max]``; ``d <= 0`` maps to ``l_max``."""
    d = np.asarray(disparity, dtype=np.float64)
    fb = camera.focal_length * camera.baseline
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = np.where(d > 0, fb / np.where(d > 0, d, 1.0), l_max)
    return np.clip(dist, l_min, l_max)


def complete_depth(
    disparity: ScalarMap,
    fits: list[PlaneFit],
    partition: SuperpixelPartition,
    camera: CameraModel,
    l_min: float = DISTANCE_MIN,
    l_max: float = DISTANCE_MAX,
) -> ScalarMap:
    """Fill invalid disparities from superpixel planes and convert to distance.

    Superpixels without a usable plane borrow the plane of the non-degenerate
    superpixel with the nearest centroid.
    """
    _check_same_shape(disparity.shape, partition.shape)
    if len(fits) != partition.k:
        raise ValueError(f"{len(fits)} fits for {partition.k} superpixels")
    ok = np.array([f.ok for f in fits])
    if not ok.any():
        raise ValueError("no depth support: every superpixel is degenerate")
    h, w = disparity.shape
    lab = partition.assignment
    yy, xx = np.mgrid[0:h, 0:w]
    cnt = np.bincount(lab.ravel(), minlength=partition.k).astype(np.float64)
    cen = np.stack([
        np.bincount(lab.ravel(), weights=xx.ravel(), minlength=partition.k) / cnt,
        np.bincount(lab.ravel(), weights=yy.ravel(), minlength=partition.k) / cnt,
    ], axis=1)
    donor = np.arange(partition.k)
    good = np.flatnonzero(ok)
    for sp in np.flatnonzero(~ok):
        dist2 = ((cen[good] - cen[sp]) ** 2).sum(axis=1)
        donor[sp] = good[int(np.argmin(dist2))]
    coef = np.array([fits[i].coefficients for i in donor])[lab]  # (h, w, 3)
    plane = coef[..., 0] * xx + coef[..., 1] * yy + coef[..., 2]
    filled = np.where(disparity.mask, disparity.values, plane)
    return ScalarMap(disparity_to_distance(filled, camera, l_min, l_max))


def transmittance_from_distance(distance: ScalarMap, beta: float) -> ScalarMap:
    """Homogeneous-fog transmittance ``exp(-beta * distance)``."""
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    dist = np.where(distance.mask, distance.values, 1.0)
    if np.any(dist <= 0):
        raise ValueError("distances must be positive")
    return ScalarMap(np.exp(-beta * dist), distance.mask)


def complete_distance(disparity: ScalarMap, lab: np.ndarray, camera: CameraModel,
                      superpixels: int | None = None, compactness: float = 10.0,
                      outlier_k: float = 3.0, ransac_iters: int = 500, inlier_tol: float = 1.0,
                      min_inliers: int = 12, seed: int = 0) -> ScalarMap:
    """Full chain: superpixels, outlier rejection, plane fits, completion."""
    h, w = disparity.shape
    if superpixels is None:
        # one superpixel per 1024 pixels (2048 for 2048x1024 input)
        superpixels = max(1, (h * w) // 1024)
    part = slic(lab, superpixels, compactness)
    cleaned = detect_outliers(disparity, part, outlier_k)
    fits = fit_planes(cleaned, part, ransac_iters, inlier_tol, min_inliers, seed)
    return complete_depth(cleaned, fits, part, camera)
