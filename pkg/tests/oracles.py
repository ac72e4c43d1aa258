"""Independent reference implementations used as test oracles."""

import math

import numpy as np


def brute_hull(points):
    """Hull vertex set by checking every ordered pair as a candidate edge, O(n^3)."""
    pts = [tuple(p) for p in np.unique(np.asarray(points, dtype=float), axis=0)]
    verts = set()
    for i, a in enumerate(pts):
        for j, b in enumerate(pts):
            if i == j:
                continue
            edge = True
            for k, c in enumerate(pts):
                if k in (i, j):
                    continue
                cr = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
                if cr < 0:
                    edge = False
                    break
                if cr == 0:
                    # collinear points must lie strictly between a and b
                    dot = (c[0] - a[0]) * (b[0] - a[0]) + (c[1] - a[1]) * (b[1] - a[1])
                    if dot < 0 or dot > (b[0] - a[0]) ** 2 + (b[1] - a[1]) ** 2:
                        edge = False
                        break
            if edge:
                verts.update([a, b])
    return verts


def unified_adjacency_scalar(corr, d_known, d_cell, lam, alpha, epsilon, apply_density=True):
    """Term-by-term evaluation of the unified adjacency with plain floats."""
    n = len(corr)
    m = [[0.0] * (n + 1) for _ in range(n + 1)]
    for i in range(n):
        for j in range(n):
            r = float(corr[i][j])
            if i != j and r > 0:
                m[i][j] = (r / math.exp(lam / float(d_known[i][j]))) ** r
        total = 0.0
        for j in range(n):
            r = float(corr[i][j])
            if j == i or r <= 0:
                continue
            total += (r * math.exp(lam / float(d_cell[j])) / math.exp(lam / float(d_known[i][j]))) ** r
        if apply_density:
            total *= alpha
        m[i][n] = total
        m[n][i] = total
    for i in range(n + 1):
        for j in range(n + 1):
            if epsilon > 0 and m[i][j] < epsilon:
                m[i][j] = 0.0
    return np.array(m)


def kalman_step(x, p, z, f, h, q, r):
    """Closed-form linear Kalman filter predict + update."""
    x_pred = f @ x
    p_pred = f @ p @ f.T + q
    s = h @ p_pred @ h.T + r
    k = p_pred @ h.T @ np.linalg.inv(s)
    x_new = x_pred + k @ (z - h @ x_pred)
    p_new = (np.eye(len(x)) - k @ h) @ p_pred
    return x_new, p_new


def ok_dense(coords, values, variogram, target):
    """Ordinary kriging by explicit inversion of the bordered system."""
    n = len(coords)
    d = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    a = np.ones((n + 1, n + 1))
    a[:n, :n] = np.where(d == 0, 0.0, variogram(d))
    a[n, n] = 0.0
    b = np.ones(n + 1)
    dt = np.sqrt(((coords - target) ** 2).sum(-1))
    b[:n] = np.where(dt == 0, 0.0, variogram(dt))
    w = np.linalg.inv(a) @ b
    return float(w[:n] @ values), w[:n]
