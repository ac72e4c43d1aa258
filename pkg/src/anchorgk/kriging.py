"""Ordinary kriging and inverse-distance weighting.

Both interpolators take ``coords`` as an ``n x 2`` array. With
``metric="haversine"`` the rows are ``(lat, lon)`` and distances are
kilometres; with ``metric="euclidean"`` they are plain planar points.
Values may be a vector of length ``n`` or an ``n x T`` matrix, in which case
one weight vector is solved and applied to every column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .geometry import pairwise_euclidean, pairwise_km

SILL_FLOOR = 1e-12
JITTER = 1e-10


class KrigingError(ArithmeticError):
    pass


def _distances(a, b=None, metric="euclidean"):
    if metric == "haversine":
        return pairwise_km(a, b)
    if metric == "euclidean":
        return pairwise_euclidean(a, b)
    raise ValueError(f"unknown metric {metric!r}")


@dataclass(frozen=True)
class Variogram:
    nugget: float
    sill: float
    range_param: float
    model: str = "exponential"
    degenerate: bool = False

    def __post_init__(self):
        if self.model != "exponential":
            raise ValueError(f"unsupported variogram model {self.model!r}")
        if self.nugget < 0 or self.sill <= 0 or self.range_param <= 0:
            raise ValueError(f"invalid variogram {self}")

    def __call__(self, d):
        d = np.asarray(d, dtype=float)
        return self.nugget + self.sill * (1.0 - np.exp(-d / self.range_param))


def empirical_variogram(coords, values, metric="euclidean"):
    """Binned semivariances over ``ceil(sqrt(n(n-1)/2))`` equal-width lags.

    ``values`` is a length-n vector, or ``n x T`` in which case each pair's
    semivariance is averaged over the columns.
    Returns ``(lag_centres, semivariance, pair_counts)`` for non-empty bins.
    """
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    values = np.asarray(values, dtype=float)
    n = len(values)
    iu = np.triu_indices(n, k=1)
    d = _distances(coords, metric=metric)[iu]
    if values.ndim == 2:
        # mean over columns of (a - b)^2 without the n x n x T difference tensor
        sq = np.einsum("it,it->i", values, values) / values.shape[1]
        gram = values @ values.T / values.shape[1]
        g = 0.5 * np.maximum(sq[:, None] + sq[None, :] - 2.0 * gram, 0.0)[iu]
    else:
        g = 0.5 * (values[:, None] - values[None, :])[iu] ** 2
    n_bins = math.ceil(math.sqrt(n * (n - 1) / 2))
    edges = np.linspace(0.0, d.max(), n_bins + 1)
    which = np.clip(np.digitize(d, edges[1:-1]), 0, n_bins - 1)
    counts = np.bincount(which, minlength=n_bins)
    sums = np.bincount(which, weights=g, minlength=n_bins)
    dsum = np.bincount(which, weights=d, minlength=n_bins)
    keep = counts > 0
    return dsum[keep] / counts[keep], sums[keep] / counts[keep], counts[keep]


def fit_variogram(coords, values, metric="euclidean"):
    """Least-squares exponential variogram fit (nugget >= 0).

    ``values`` is a vector, or ``n x T`` to pool semivariances over columns.
    Residuals are weighted by the square root of each bin's pair count. A
    spatially constant field returns a flat variogram with ``degenerate=True``.
    """
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        values = values.ravel()
    if len(values) < 3:
        raise ValueError(f"variogram fit needs at least 3 points, got {len(values)}")
    if len(coords) != len(values):
        raise ValueError("coords and values differ in length")
    if not np.all(np.isfinite(values)):
        raise ValueError("values must be finite")
    d_all = _distances(coords, metric=metric)
    d_max = float(d_all.max())
    if d_max <= 0:
        raise ValueError("all points coincide")
    if np.all(values == values[0]):
        return Variogram(0.0, SILL_FLOOR, d_max / 3, degenerate=True)

    lags, gamma, counts = empirical_variogram(coords, values, metric)
    w = np.sqrt(counts)
    var = float(values.var(axis=0).mean())

    def resid(p):
        nugget, sill, rng = p
        return w * (nugget + sill * (1.0 - np.exp(-lags / rng)) - gamma)

    x0 = [0.0, max(var, SILL_FLOOR), d_max / 3]
    lo = [0.0, SILL_FLOOR, d_max * 1e-4]
    hi = [max(10 * var, 1e-9), max(100 * var, 1e-9), d_max * 100]
    x0 = np.clip(x0, lo, hi)
    sol = least_squares(resid, x0, bounds=(lo, hi), method="trf")
    nugget, sill, rng = (float(v) for v in sol.x)
    return Variogram(max(nugget, 0.0), max(sill, SILL_FLOOR), rng)


def ok_weights(coords, variogram, target, metric="euclidean"):
    """Solve the ordinary-kriging system; returns weights summing to one."""
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    n = len(coords)
    if n < 2:
        raise ValueError(f"ordinary kriging needs at least 2 known points, got {n}")
    target = np.asarray(target, dtype=float).reshape(1, 2)
    # a point's semivariance with itself is 0; the nugget is a jump away from the origin
    d = _distances(coords, metric=metric)
    a = np.ones((n + 1, n + 1))
    a[:n, :n] = np.where(d == 0, 0.0, variogram(d))
    a[n, n] = 0.0
    d_target = _distances(coords, target, metric=metric)[:, 0]
    rhs = np.ones(n + 1)
    rhs[:n] = np.where(d_target == 0, 0.0, variogram(d_target))
    try:
        sol = _solve(a, rhs)
    except np.linalg.LinAlgError:
        a[np.arange(n), np.arange(n)] += JITTER
        try:
            sol = _solve(a, rhs)
        except np.linalg.LinAlgError as exc:
            raise KrigingError("kriging system singular after jitter") from exc
    return sol[:n]


def _solve(a, rhs):
    sol = np.linalg.solve(a, rhs)
    if not np.all(np.isfinite(sol)) or np.linalg.cond(a) > 1e14:
        raise np.linalg.LinAlgError("ill-conditioned")
    return sol


def ok_predict(coords, values, variogram, target, metric="euclidean"):
    """Ordinary-kriging estimate at ``target``; returns ``(estimate, weights)``."""
    values = np.asarray(values, dtype=float)
    w = ok_weights(coords, variogram, target, metric)
    if values.shape[0] != len(w):
        raise ValueError("values and coords differ in length")
    return w @ values, w


def idw_predict(coords, values, target, power=2.0, metric="euclidean"):
    """Inverse-distance weighted mean; an exact hit returns the known value."""
    if power <= 0:
        raise ValueError("power must be positive")
    values = np.asarray(values, dtype=float)
    d = _distances(coords, np.asarray(target, dtype=float).reshape(1, 2), metric=metric)[:, 0]
    if len(d) < 1:
        raise ValueError("IDW needs at least one known point")
    hit = np.flatnonzero(d == 0)
    if hit.size:
        return values[hit[0]]
    w = d ** (-power)
    return (w @ values) / w.sum()


def stratum_members(stratum):
    """Member ids in augmented-column order: neighbours then anchor."""
    return list(stratum.neighbor_ids) + [stratum.anchor_id]


def local_kriging(ds, stratum, target, variogram):
    """Kriged series at ``target`` from one stratum's neighbours and anchor."""
    ids = stratum_members(stratum)
    rows = [ds.index_of(i) for i in ids]
    if not ds.available[rows, stratum.feature].all():
        raise ValueError("stratum members must all observe the stratum feature")
    series = ds.values[rows, :, stratum.feature]
    est, _ = ok_predict(ds.coords[rows], series, variogram, target, metric="haversine")
    return est


def build_augmented(ds, stratum, xbar):
    """``T x (U+2)`` matrix: neighbour series, anchor series, kriged series."""
    xbar = np.asarray(xbar, dtype=float)
    if xbar.shape != (ds.t,):
        raise ValueError(f"interpolated series has shape {xbar.shape}, expected {(ds.t,)}")
    if not np.all(np.isfinite(xbar)):
        raise ValueError("interpolated series must be finite")
    rows = [ds.index_of(i) for i in stratum_members(stratum)]
    return np.column_stack([ds.values[rows, :, stratum.feature].T, xbar])


def global_kriging(ds, feature, target, variogram=None):
    """Kriged series of ``feature`` at ``target`` from every location observing it.

    Falls back to IDW when fewer than two locations observe the feature.
    """
    rows = np.flatnonzero(ds.available[:, feature])
    if rows.size == 0:
        raise ValueError(f"feature {feature} is not available at any location")
    coords = ds.coords[rows]
    series = ds.values[rows, :, feature]
    if rows.size < 2:
        return idw_predict(coords, series, target, metric="haversine")
    if variogram is None:
        variogram = fit_feature_variogram(ds, feature)
    est, _ = ok_predict(coords, series, variogram, target, metric="haversine")
    return est


def fit_feature_variogram(ds, feature, pooled=True):
    """Variogram of ``feature`` over the locations observing it.

    ``pooled`` fits the semivariances averaged over timesteps, which is the
    spatial structure each per-timestep kriging solve actually sees;
    otherwise the fit uses time-averaged values.
    """
    rows = np.flatnonzero(ds.available[:, feature])
    coords = ds.coords[rows]
    if rows.size < 3:
        d = pairwise_km(coords).max() if rows.size > 1 else 1.0
        return Variogram(0.0, 1.0, max(d, 1.0) / 3, degenerate=True)
    series = ds.values[rows, :, feature]
    return fit_variogram(coords, series if pooled else series.mean(axis=1), metric="haversine")
