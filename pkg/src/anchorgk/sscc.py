"""Anchor-based strata and per-cell spatial correlation matrices.

Each stratum belongs to one ``(anchor, feature)`` pair: the anchor plus the
``U`` locations whose series of that feature correlate best with the
anchor's. The convex hull of those members is cut into grid cells, and each
cell carries its own ``(U+2) x (U+2)`` adjacency over
``[neighbours..., anchor, cell centre]``.

Coordinates are ``(lat, lon)`` at the API; hulls and cells are stored as
``(lon, lat)`` so that the planar geometry is map-oriented.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    GeometryError,
    Hull,
    MIN_DISTANCE_KM,
    area_km2,
    build_hull,
    lonlat,
    pairwise_euclidean,
    pairwise_km,
    point_in_hull,
)

LAMBDA_MAX = 1.6


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class AnchorSet:
    anchor_ids: tuple

    def __post_init__(self):
        ids = tuple(self.anchor_ids)
        object.__setattr__(self, "anchor_ids", ids)
        if not ids:
            raise ValueError("anchor set is empty")
        if len(set(ids)) != len(ids):
            raise ValueError("anchor ids must be distinct")

    def __iter__(self):
        return iter(self.anchor_ids)

    def __len__(self):
        return len(self.anchor_ids)


@dataclass(frozen=True)
class GridCell:
    min_lat: float
    max_lat: float
    min_lon: float
    max_lon: float

    @property
    def center(self):
        """``(lat, lon)`` of the cell centre."""
        return (0.5 * (self.min_lat + self.max_lat), 0.5 * (self.min_lon + self.max_lon))

    def contains(self, coord):
        lat, lon = coord
        return self.min_lat <= lat <= self.max_lat and self.min_lon <= lon <= self.max_lon

    def to_dict(self):
        return {
            "bounds": [self.min_lat, self.max_lat, self.min_lon, self.max_lon],
            "center": list(self.center),
        }


@dataclass(frozen=True, eq=False)
class Stratum:
    anchor_id: int
    feature: int
    neighbor_ids: tuple
    hull: Hull
    cells: tuple
    member_coords: np.ndarray = field(repr=False)  # (lat, lon) of neighbours then anchor
    grid_shape: tuple = (4, 4)

    @property
    def members(self):
        return tuple(self.neighbor_ids) + (self.anchor_id,)

    @property
    def u(self):
        return len(self.neighbor_ids)

    def contains(self, coord):
        return point_in_hull(lonlat(coord)[0], self.hull)

    def area_km2(self):
        return area_km2(self.hull.vertices)

    def locate_cell(self, coord):
        """Index of the cell covering ``coord``, else of the nearest cell centre."""
        for idx, cell in enumerate(self.cells):
            if cell.contains(coord):
                return idx
        centers = np.array([c.center for c in self.cells])
        d = pairwise_euclidean(centers, np.asarray(coord, dtype=float).reshape(1, 2))[:, 0]
        return int(np.argmin(d))

    def to_dict(self):
        return {
            "anchor_id": self.anchor_id,
            "feature": self.feature,
            "neighbor_ids": list(self.neighbor_ids),
            "hull": [[float(x), float(y)] for x, y in self.hull.vertices],
            "cells": [c.to_dict() for c in self.cells],
        }


@dataclass(frozen=True)
class SCParams:
    lam: float = 0.8
    sigma: float = 50.0
    epsilon: float = 0.0
    apply_density: bool = True

    def __post_init__(self):
        if not 0.0 < self.lam <= LAMBDA_MAX:
            raise ValueError(f"lambda must be in (0, {LAMBDA_MAX}], got {self.lam}")
        if not self.sigma > 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"epsilon must be in [0, 1), got {self.epsilon}")

    def to_dict(self):
        return {"lambda": self.lam, "sigma": self.sigma, "epsilon": self.epsilon, "apply_density": self.apply_density}

    @classmethod
    def from_dict(cls, doc):
        return cls(
            lam=float(doc.get("lambda", cls.lam)),
            sigma=float(doc.get("sigma", cls.sigma)),
            epsilon=float(doc.get("epsilon", cls.epsilon)),
            apply_density=bool(doc.get("apply_density", cls.apply_density)),
        )


@dataclass(frozen=True, eq=False)
class SpatialCorrelation:
    matrix: np.ndarray
    stratum_ref: tuple
    cell_index: int

    def to_dict(self):
        return {
            "stratum": list(self.stratum_ref),
            "cell_index": self.cell_index,
            "matrix": [[float(x) for x in row] for row in self.matrix],
        }


def select_anchors(ds, q, ids=None):
    """The ``q`` locations observing the most features; ties by ascending id."""
    pool = ds.ids if ids is None else sorted(ids)
    if not 1 <= q <= len(pool):
        raise ValueError(f"q must be in [1, {len(pool)}], got {q}")
    counts = {i: int(ds.available[ds.index_of(i)].sum()) for i in pool}
    ranked = sorted(pool, key=lambda i: (-counts[i], i))
    return AnchorSet(tuple(ranked[:q]))


def pearson(a, b):
    """Pearson correlation; 0 when either series is constant."""
    a = np.asarray(a, dtype=float) - np.mean(a)
    b = np.asarray(b, dtype=float) - np.mean(b)
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def pearson_matrix(series):
    """Row-wise Pearson matrix of an ``n x T`` array, constant rows giving 0."""
    x = np.asarray(series, dtype=float)
    x = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt((x * x).sum(axis=1))
    ok = norms > 0
    x[ok] /= norms[ok, None]
    x[~ok] = 0.0
    return np.clip(x @ x.T, -1.0, 1.0)


def select_relevant(ds, anchor, feature, k):
    """The ``k`` locations whose ``feature`` series correlate best with the anchor's."""
    a_row = ds.index_of(anchor)
    if not ds.available[a_row, feature]:
        raise ValueError(f"feature {feature} not available at anchor {anchor}")
    cand = [i for i, loc in enumerate(ds.locations) if ds.available[i, feature] and loc.id != anchor]
    if len(cand) < k or k < 1:
        raise ValueError(f"need {k} candidates observing feature {feature}, have {len(cand)}")
    anchor_series = ds.values[a_row, :, feature]
    scored = [(pearson(anchor_series, ds.values[i, :, feature]), ds.locations[i].id) for i in cand]
    scored.sort(key=lambda s: (-s[0], s[1]))
    return [loc_id for _, loc_id in scored[:k]]


def partition_grid(hull, rows=4, cols=4):
    """Split the hull's bounding box into ``rows x cols`` cells.

    Cells whose centre falls outside the hull are dropped. Survivors are
    returned row-major, row 0 being the southernmost band. If no centre
    survives, a single cell centred on the vertex mean is returned.
    """
    if hull.degenerate:
        raise GeometryError("cannot grid a degenerate hull")
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    lon0, lat0, lon1, lat1 = hull.bbox
    lat_edges = np.linspace(lat0, lat1, rows + 1)
    lon_edges = np.linspace(lon0, lon1, cols + 1)
    cells = []
    for r in range(rows):
        for c in range(cols):
            cell = GridCell(lat_edges[r], lat_edges[r + 1], lon_edges[c], lon_edges[c + 1])
            lat, lon = cell.center
            if point_in_hull((lon, lat), hull):
                cells.append(cell)
    if not cells:
        lon, lat = hull.vertices.mean(axis=0)
        h_lat = (lat1 - lat0) / (2 * rows)
        h_lon = (lon1 - lon0) / (2 * cols)
        cells.append(GridCell(lat - h_lat, lat + h_lat, lon - h_lon, lon + h_lon))
    return cells


def density_factor(points, area, metric="euclidean"):
    """Ratio of mean nearest-neighbour distance to its expectation under randomness."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    if n < 2:
        raise ValueError("density factor needs at least 2 points")
    if not area > 0:
        raise ValueError("area must be positive")
    d = pairwise_km(pts) if metric == "haversine" else pairwise_euclidean(pts)
    np.fill_diagonal(d, np.inf)
    r_obs = float(d.min(axis=1).mean())
    if r_obs == 0.0:
        raise GeometryError("all points coincide")
    r_exp = 1.0 / (2.0 * math.sqrt(n / area))
    return r_obs / r_exp


def proximity_adjacency(coords, params, metric="haversine"):
    """Gaussian-kernel distance adjacency, sparsified below ``epsilon``."""
    pts = np.asarray(coords, dtype=float).reshape(-1, 2)
    d = pairwise_km(pts) if metric == "haversine" else pairwise_euclidean(pts)
    a = np.exp(-(d**2) / params.sigma**2)
    a[a < params.epsilon] = 0.0
    np.fill_diagonal(a, 0.0)
    return a


def _floored_km(a, b=None):
    d = pairwise_km(a, b)
    return np.maximum(d, MIN_DISTANCE_KM)


def unified_adjacency(ds, stratum, cell, params, alpha=1.0):
    """Adjacency over ``[neighbours..., anchor, cell centre]`` for one grid cell.

    Known pairs get ``(r / e^(lam/d))^rho`` and the known-to-cell entry of
    node ``i`` sums ``(r_ij * e^(lam/d_jv) / e^(lam/d_ij))^rho_ij`` over the
    other known nodes ``j``, where ``r`` is Pearson and ``rho = max(0, r)``.
    Pairs with ``rho = 0`` contribute 0. The cell entries are scaled by
    ``alpha`` when ``params.apply_density``; entries below ``params.epsilon``
    are zeroed.
    """
    if isinstance(cell, int):
        cell_index, cell = cell, stratum.cells[cell]
    else:
        cell_index = stratum.cells.index(cell) if cell in stratum.cells else -1
    rows = [ds.index_of(i) for i in stratum.members]
    series = ds.values[rows, :, stratum.feature]
    corr = pearson_matrix(series)
    d_known = _floored_km(stratum.member_coords)
    d_cell = _floored_km(stratum.member_coords, np.asarray(cell.center).reshape(1, 2))[:, 0]
    matrix = _adjacency_from_parts(corr, d_known, d_cell, params, alpha)
    return SpatialCorrelation(matrix, (stratum.anchor_id, stratum.feature), cell_index)


def _adjacency_from_parts(corr, d_known, d_cell, params, alpha):
    n_known = corr.shape[0]
    pos = corr > 0
    np.fill_diagonal(pos, False)
    log_r = np.log(np.where(pos, corr, 1.0))
    d_known = np.maximum(d_known, MIN_DISTANCE_KM)
    d_cell = np.maximum(d_cell, MIN_DISTANCE_KM)
    decay = params.lam / d_known
    with np.errstate(over="raise", invalid="raise"):
        try:
            known = np.where(pos, np.exp(np.where(pos, corr * (log_r - decay), 0.0)), 0.0)
            # term[i, j] = exponent for the pair (i, j) toward the cell
            expo = corr * (log_r + params.lam / d_cell[None, :] - decay)
            cell_terms = np.where(pos, np.exp(np.where(pos, expo, 0.0)), 0.0)
        except FloatingPointError as exc:
            raise NumericError("non-finite spatial correlation") from exc
    to_cell = cell_terms.sum(axis=1)
    if params.apply_density:
        to_cell = alpha * to_cell
    m = np.zeros((n_known + 1, n_known + 1))
    m[:n_known, :n_known] = known
    m[:n_known, n_known] = to_cell
    m[n_known, :n_known] = to_cell
    if params.epsilon > 0:
        m[m < params.epsilon] = 0.0
    if not np.all(np.isfinite(m)):
        raise NumericError("non-finite spatial correlation")
    return m


def cell_density(stratum, cell):
    """Density factor of the stratum members plus the cell centre."""
    pts = np.vstack([stratum.member_coords, np.asarray(cell.center).reshape(1, 2)])
    area = stratum.area_km2()
    if area <= 0:
        return 1.0
    try:
        return density_factor(pts, area, metric="haversine")
    except GeometryError:
        return 1.0


def build_stratum(ds, anchor, feature, u, rows=4, cols=4):
    neighbors = select_relevant(ds, anchor, feature, u)
    member_rows = [ds.index_of(i) for i in neighbors + [anchor]]
    coords = ds.coords[member_rows]
    hull = build_hull(lonlat(coords)) if len(coords) >= 3 else Hull(lonlat(coords), degenerate=True)
    if hull.degenerate:
        raise GeometryError(f"stratum ({anchor}, {feature}) has a degenerate hull")
    cells = partition_grid(hull, rows, cols)
    return Stratum(anchor, feature, tuple(neighbors), hull, tuple(cells), coords, (rows, cols))


def build_strata(ds, anchors, u, rows=4, cols=4):
    """One stratum per ``(anchor, feature)`` with the feature observed at the anchor.

    Pairs without enough candidate neighbours or with a collinear membership
    are skipped.
    """
    strata = []
    for anchor in anchors:
        a_row = ds.index_of(anchor)
        for feature in range(ds.f):
            if not ds.available[a_row, feature]:
                continue
            try:
                strata.append(build_stratum(ds, anchor, feature, u, rows, cols))
            except (GeometryError, ValueError):
                continue
    return strata


def extend_for_outside_target(stratum, target):
    """Grow the hull to cover ``target`` and re-grid; identity if already inside."""
    if stratum.contains(target):
        return stratum
    pts = np.vstack([stratum.hull.vertices, lonlat(target)])
    hull = build_hull(pts)
    rows, cols = stratum.grid_shape
    cells = partition_grid(hull, rows, cols)
    return replace(stratum, hull=hull, cells=tuple(cells))


_BOUNDS = {"lam": (0.0, LAMBDA_MAX), "sigma": (0.0, math.inf), "epsilon": (0.0, 1.0)}


def _reflect(x, lo, hi):
    for _ in range(64):
        if x < lo:
            x = 2 * lo - x
        elif x > hi:
            x = 2 * hi - x
        else:
            break
    return min(max(x, lo), hi)


def _propose(params, rng, rel_step):
    lam = _reflect(params.lam + rel_step * LAMBDA_MAX * rng.normal(), *_BOUNDS["lam"])
    sigma = _reflect(params.sigma + rel_step * params.sigma * rng.normal(), *_BOUNDS["sigma"])
    eps = _reflect(params.epsilon + rel_step * rng.normal(), *_BOUNDS["epsilon"])
    lam = max(lam, 1e-6)
    sigma = max(sigma, 1e-9)
    eps = min(eps, 1.0 - 1e-9)
    return replace(params, lam=lam, sigma=sigma, epsilon=eps)


def mcmc_update(params, score, steps, seed, temperature=0.05, rel_step=0.05):
    """Metropolis random walk over ``(lambda, sigma, epsilon)`` minimising ``score``.

    Proposals are Gaussian with a standard deviation of ``rel_step`` times the
    parameter scale (the lambda range, the current sigma, the unit interval
    for epsilon) and are reflected back into bounds. Returns
    ``(best_params, best_score, trace)``; the start state counts as visited.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    cur = params
    cur_score = float(score(cur))
    if not math.isfinite(cur_score):
        cur_score = math.inf
    best, best_score = cur, cur_score
    trace = [(cur, cur_score, True)]
    for _ in range(steps):
        prop = _propose(cur, rng, rel_step)
        s = float(score(prop))
        u = rng.random()
        accepted = False
        if math.isfinite(s):
            delta = (cur_score - s) / temperature
            if delta >= 0 or u < math.exp(delta):
                cur, cur_score, accepted = prop, s, True
                if s < best_score:
                    best, best_score = prop, s
        trace.append((prop, s, accepted))
    return best, best_score, trace
