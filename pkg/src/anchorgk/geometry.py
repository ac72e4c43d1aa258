"""Planar hull geometry on ``(x, y)`` points and great-circle distances.

Hull and grid operations work in the plane; callers pass ``(lon, lat)`` so
that counter-clockwise means counter-clockwise on a map. Distances between
``(lat, lon)`` pairs are haversine kilometres.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_KM = 6371.0088
MIN_DISTANCE_KM = 1e-3  # 1 metre


class GeometryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Hull:
    vertices: np.ndarray  # k x 2, counter-clockwise
    degenerate: bool = False

    def __len__(self):
        return len(self.vertices)

    @property
    def bbox(self):
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return lo[0], lo[1], hi[0], hi[1]


def cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def build_hull(points):
    """Convex hull by Graham's scan.

    Returns the vertices counter-clockwise starting from the lowest point.
    Points lying on an edge are not vertices. If every point is collinear the
    result holds the two extreme points and is flagged ``degenerate``.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 3:
        raise ValueError(f"convex hull needs at least 3 points, got {len(pts)}")
    uniq = np.unique(pts, axis=0)
    # lowest y, then lowest x
    pivot_idx = np.lexsort((uniq[:, 0], uniq[:, 1]))[0]
    pivot = uniq[pivot_idx]
    rest = np.delete(uniq, pivot_idx, axis=0)
    if len(rest) == 0:
        return Hull(pivot[None, :].copy(), degenerate=True)
    d = rest - pivot
    angle = np.arctan2(d[:, 1], d[:, 0])
    dist = np.hypot(d[:, 0], d[:, 1])
    order = np.lexsort((dist, angle))

    stack = [pivot]
    for p in rest[order]:
        while len(stack) > 1 and cross(stack[-2], stack[-1], p) <= 0:
            stack.pop()
        stack.append(p)
    # a collinear run on the last ray leaves its nearer points behind
    while len(stack) > 2 and cross(stack[-2], stack[-1], stack[0]) <= 0:
        stack.pop()
    verts = np.array(stack)
    if len(verts) < 3:
        far = rest[np.argmax(dist)]
        return Hull(np.array([pivot, far]), degenerate=True)
    return Hull(verts, degenerate=False)


def point_in_hull(point, hull, tol=1e-12):
    """Closed membership test for a convex counter-clockwise polygon."""
    v = hull.vertices
    if hull.degenerate:
        raise GeometryError("point-in-polygon on a degenerate hull")
    scale = max(1.0, float(np.abs(v).max()))
    p = np.asarray(point, dtype=float)
    nxt = np.roll(v, -1, axis=0)
    c = (nxt[:, 0] - v[:, 0]) * (p[1] - v[:, 1]) - (nxt[:, 1] - v[:, 1]) * (p[0] - v[:, 0])
    return bool(np.all(c >= -tol * scale * scale))


def polygon_area(vertices):
    v = np.asarray(vertices, dtype=float)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def lonlat(coords):
    """``(lat, lon)`` rows to ``(lon, lat)`` rows."""
    c = np.asarray(coords, dtype=float).reshape(-1, 2)
    return c[:, ::-1].copy()


def latlon(points):
    return lonlat(points)


def haversine(a, b):
    """Great-circle distance in km between ``(lat, lon)`` arrays (broadcasting)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    lat1, lon1 = np.radians(a[..., 0]), np.radians(a[..., 1])
    lat2, lon2 = np.radians(b[..., 0]), np.radians(b[..., 1])
    h = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def pairwise_km(a, b=None):
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = a if b is None else np.asarray(b, dtype=float).reshape(-1, 2)
    return haversine(a[:, None, :], b[None, :, :])


def pairwise_euclidean(a, b=None):
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = a if b is None else np.asarray(b, dtype=float).reshape(-1, 2)
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


def area_km2(lonlat_vertices):
    """Area of a small lon/lat polygon via a local equirectangular projection."""
    v = np.asarray(lonlat_vertices, dtype=float)
    lat0 = np.radians(v[:, 1].mean())
    kx = np.radians(1.0) * EARTH_RADIUS_KM * np.cos(lat0)
    ky = np.radians(1.0) * EARTH_RADIUS_KM
    return polygon_area(np.column_stack([v[:, 0] * kx, v[:, 1] * ky]))
