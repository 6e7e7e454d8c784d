"""Dual-reference cross-bilateral filtering of a transmittance map.

Each neighbour ``q`` of ``p`` is weighted by

    G_s(|q - p|) * (delta(h(q) == h(p)) + mu * G_c(|J(q) - J(p)|))

where ``h`` is the (instance-aware) semantic labeling and ``J`` the CIELAB
image.  Both Gaussians are unnormalized (peak 1), so ``mu`` directly trades
the color term against the semantic indicator.

:func:`dbf_direct` evaluates the sum exactly over a square window;
:func:`dbf_grid` realizes it with one 2D spatial grid per label (the
semantic term, no blur across labels) plus one 5D ``(x, y, L*, a*, b*)``
grid (the color term).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import ScalarMap

# variance (in cells^2) added per axis by a multilinear splat followed by a
# multilinear slice
_INTERP_VAR = 1.0 / 3.0
_TRUNCATE = 3.0


@dataclass(frozen=True)
class FilterParams:
    mu: float = 5.0
    sigma_s: float = 20.0  # pixels
    sigma_c: float = 10.0  # CIELAB units
    window_radius: int | None = None  # pixels; defaults to ceil(3 * sigma_s)

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if not (self.sigma_s > 0 and self.sigma_c > 0):
            raise ValueError("sigma_s and sigma_c must be positive")
        if self.window_radius is not None and self.window_radius < 1:
            raise ValueError("window_radius must be >= 1")

    @property
    def radius(self) -> int:
        if self.window_radius is not None:
            return int(self.window_radius)
        return max(1, int(math.ceil(_TRUNCATE * self.sigma_s)))


def _prepare(t_hat, lab, labels):
    t = t_hat.values if isinstance(t_hat, ScalarMap) else np.asarray(t_hat, dtype=np.float64)
    if isinstance(t_hat, ScalarMap) and not t_hat.fully_valid:
        raise ValueError("t_hat must be fully valid")
    h = getattr(labels, "labels", labels)
    lab = np.asarray(lab, dtype=np.float64)
    h = np.asarray(h)
    if t.ndim != 2 or lab.shape != t.shape + (3,) or h.shape != t.shape:
        raise ValueError(
            f"dimension mismatch: t_hat {t.shape}, lab {lab.shape}, labels {h.shape}"
        )
    return np.asarray(t, dtype=np.float64), lab, h


def dbf_direct(t_hat, lab, labels, params: FilterParams = FilterParams()) -> ScalarMap:
    """Exact evaluation of the filter over a ``(2r+1)^2`` window.

    Output is ``t(p) + sum_q w_pq (t(q) - t(p)) / sum_q w_pq``, which is the
    normalized weighted mean written so that pixels whose neighbourhood
    carries their own value are reproduced exactly.
    """
    t, lab, h = _prepare(t_hat, lab, labels)
    H, W = t.shape
    r = params.radius
    inv2s = 1.0 / (2.0 * params.sigma_s**2)
    inv2c = 1.0 / (2.0 * params.sigma_c**2)
    out = np.empty_like(t)

    tile = 8
    while tile > 1 and tile * tile * (tile + 2 * r) ** 2 > 2_000_000:
        tile //= 2
    for y0 in range(0, H, tile):
        y1 = min(H, y0 + tile)
        qy0, qy1 = max(0, y0 - r), min(H, y1 + r)
        for x0 in range(0, W, tile):
            x1 = min(W, x0 + tile)
            qx0, qx1 = max(0, x0 - r), min(W, x1 + r)
            py, px = np.mgrid[y0:y1, x0:x1]
            qy, qx = np.mgrid[qy0:qy1, qx0:qx1]
            py, px, qy, qx = py.ravel(), px.ravel(), qy.ravel(), qx.ravel()
            dy = qy[None, :] - py[:, None]
            dx = qx[None, :] - px[:, None]
            gs = np.exp(-(dy * dy + dx * dx) * inv2s)
            gs[(np.abs(dy) > r) | (np.abs(dx) > r)] = 0.0
            hp, hq = h[py, px], h[qy, qx]
            rng_w = (hq[None, :] == hp[:, None]).astype(np.float64)
            if params.mu > 0:
                jp, jq = lab[py, px], lab[qy, qx]
                dc = ((jq[None, :, :] - jp[:, None, :]) ** 2).sum(axis=2)
                rng_w += params.mu * np.exp(-dc * inv2c)
            wgt = gs * rng_w
            tp, tq = t[py, px], t[qy, qx]
            num = (wgt * (tq[None, :] - tp[:, None])).sum(axis=1)
            den = wgt.sum(axis=1)
            out[y0:y1, x0:x1] = (tp + num / den).reshape(y1 - y0, x1 - x0)
    return ScalarMap(np.clip(out, t.min(), t.max()))


class BilateralGrid:
    """Dense regular lattice accumulating homogeneous ``(value, weight)`` pairs.

    Points are given in physical units; ``cells`` are the lattice spacings
    per axis and ``origin`` the physical coordinate of lattice node 0.  Splat
    and slice use multilinear (tent) interpolation over the ``2**D``
    surrounding nodes.
    """

    def __init__(self, origin, cells, shape):
        self.origin = np.asarray(origin, dtype=np.float64)
        self.cells = np.asarray(cells, dtype=np.float64)
        self.shape = tuple(int(s) for s in shape)
        self.value = np.zeros(self.shape)
        self.weight = np.zeros(self.shape)

    @classmethod
    def covering(cls, points: np.ndarray, cells) -> "BilateralGrid":
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        cells = np.asarray(cells, dtype=np.float64)
        shape = np.floor((hi - lo) / cells).astype(int) + 2
        return cls(lo, cells, shape)

    def _corners(self, points):
        g = (points - self.origin) / self.cells
        base = np.floor(g).astype(np.int64)
        base = np.clip(base, 0, np.asarray(self.shape) - 2)
        frac = g - base
        strides = np.array([int(np.prod(self.shape[i + 1:])) for i in range(len(self.shape))])
        for offs in itertools.product((0, 1), repeat=len(self.shape)):
            offs = np.array(offs)
            w = np.prod(np.where(offs, frac, 1.0 - frac), axis=1)
            idx = (base + offs) @ strides
            yield idx, w

    def splat(self, points: np.ndarray, values: np.ndarray) -> None:
        size = self.value.size
        v = self.value.reshape(-1)
        wt = self.weight.reshape(-1)
        for idx, w in self._corners(points):
            v += np.bincount(idx, weights=w * values, minlength=size)
            wt += np.bincount(idx, weights=w, minlength=size)

    def blur(self, sigmas) -> None:
        """Gaussian blur with per-axis ``sigmas`` in physical units.

        The interpolation variance of splat + slice is subtracted so the
        end-to-end kernel matches the requested width, and the result is
        rescaled to a peak-1 Gaussian so that sums from grids of different
        dimensionality are commensurable.
        """
        s = np.asarray(sigmas, dtype=np.float64) / self.cells
        peak = float(np.prod(np.sqrt(2.0 * np.pi) * s))
        s = np.sqrt(np.maximum(s**2 - _INTERP_VAR, 0.0))
        for arr in (self.value, self.weight):
            ndimage.gaussian_filter(arr, s, mode="constant", cval=0.0,
                                    truncate=_TRUNCATE, output=arr)
            arr *= peak

    def slice(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        num = np.zeros(points.shape[0])
        den = np.zeros(points.shape[0])
        v = self.value.reshape(-1)
        wt = self.weight.reshape(-1)
        for idx, w in self._corners(points):
            num += w * v[idx]
            den += w * wt[idx]
        return num, den


def dbf_grid(t_hat, lab, labels, params: FilterParams = FilterParams(),
             spatial_cell: float | None = None, range_cell: float | None = None) -> ScalarMap:
    """Bilateral-grid approximation of :func:`dbf_direct`.

    Default cells are ``sigma_s / 2`` (pixels) and ``sigma_c / 2`` (CIELAB).
    Each label's values are splatted relative to a per-label reference value,
    so regions of constant transmittance pass through unchanged.
    """
    t, lab, h = _prepare(t_hat, lab, labels)
    H, W = t.shape
    cs = params.sigma_s / 2.0 if spatial_cell is None else float(spatial_cell)
    cr = params.sigma_c / 2.0 if range_cell is None else float(range_cell)
    if not (cs > 0 and cr > 0):
        raise ValueError("grid cells must be positive")

    flat_t = t.ravel()
    flat_h = h.ravel()
    yy, xx = np.mgrid[0:H, 0:W]
    xy = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64)

    uniq, first, inverse = np.unique(flat_h, return_index=True, return_inverse=True)
    ref = flat_t[first][inverse]  # value of each label's first pixel, per pixel

    n3 = np.empty(flat_t.size)
    d3 = np.empty(flat_t.size)
    spatial = np.array([cs, cs])
    order = np.argsort(inverse, kind="stable")
    bounds = np.cumsum(np.bincount(inverse, minlength=uniq.size))[:-1]
    for idx in np.split(order, bounds):
        grid = BilateralGrid.covering(xy[idx], spatial)
        grid.splat(xy[idx], flat_t[idx] - ref[idx])
        grid.blur([params.sigma_s, params.sigma_s])
        n3[idx], d3[idx] = grid.slice(xy[idx])

    if params.mu > 0:
        m = float(flat_t[0])
        pts = np.concatenate([xy, lab.reshape(-1, 3)], axis=1)
        grid = BilateralGrid.covering(pts, [cs, cs, cr, cr, cr])
        grid.splat(pts, flat_t - m)
        grid.blur([params.sigma_s] * 2 + [params.sigma_c] * 3)
        n5, d5 = grid.slice(pts)
        num = n3 + params.mu * (n5 - (ref - m) * d5)
        den = d3 + params.mu * d5
    else:
        num, den = n3, d3
    ok = den > 1e-300
    out = np.where(ok, ref + num / np.where(ok, den, 1.0), flat_t)
    return ScalarMap(np.clip(out, t.min(), t.max()).reshape(H, W))
