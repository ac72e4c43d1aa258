"""Synthetic multivariate spatio-temporal fields.

Each feature is a stationary AR(1) sequence of spatial Gaussian fields with
exponential covariance. Features share a common spatial innovation with
weight ``feature_correlation`` so cross-feature information is present.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .datamodel import Dataset, Location, write_dataset
from .geometry import pairwise_km

DEFAULT_BOX = (22.45, 22.75, 113.90, 114.50)  # lat0, lat1, lon0, lon1


@dataclass(frozen=True)
class SynthConfig:
    n: int = 30
    t: int = 200
    f: int = 3
    seed: int = 0
    box: tuple = DEFAULT_BOX
    range_km: float = 20.0
    ar_coef: float = 0.8
    feature_correlation: float = 0.5
    noise_std: float = 0.0
    thinning: float = 0.0

    def __post_init__(self):
        if self.n < 5 or self.t < 10 or self.f < 1:
            raise ValueError(f"need n >= 5, t >= 10, f >= 1; got n={self.n}, t={self.t}, f={self.f}")
        if not 0.0 <= self.thinning < 1.0:
            raise ValueError("thinning must be in [0, 1)")
        if not 0.0 <= self.feature_correlation <= 1.0:
            raise ValueError("feature_correlation must be in [0, 1]")
        if not abs(self.ar_coef) < 1.0:
            raise ValueError("ar_coef must be in (-1, 1)")
        if not self.range_km > 0:
            raise ValueError("range_km must be positive")
        lat0, lat1, lon0, lon1 = self.box
        if not (-90 <= lat0 < lat1 <= 90 and -180 <= lon0 < lon1 <= 180):
            raise ValueError(f"invalid box {self.box}")


def random_coords(n, box, rng):
    lat0, lat1, lon0, lon1 = box
    return np.column_stack([rng.uniform(lat0, lat1, n), rng.uniform(lon0, lon1, n)])


def sample_field(coords, cfg, rng, n_steps=None):
    """``n x T x F`` field values at ``coords`` (before scaling)."""
    n_steps = n_steps or cfg.t
    d = pairwise_km(coords)
    cov = np.exp(-d / cfg.range_km)
    root = np.linalg.cholesky(cov + 1e-10 * np.eye(len(coords)))
    c = cfg.feature_correlation
    innov_scale = math.sqrt(1.0 - cfg.ar_coef**2)
    out = np.empty((len(coords), n_steps, cfg.f))
    state = None
    for t in range(n_steps):
        common = root @ rng.standard_normal(len(coords))
        own = root @ rng.standard_normal((len(coords), cfg.f))
        g = math.sqrt(c) * common[:, None] + math.sqrt(1.0 - c) * own
        state = g if state is None else cfg.ar_coef * state + innov_scale * g
        out[:, t, :] = state
    return out


def synthesize(cfg, extra_coords=None):
    """Generate a dataset; returns ``(dataset, truth)``.

    ``truth`` records the generating parameters, per-feature offsets and
    scales, and (when ``extra_coords`` is given) the noiseless field at those
    coordinates, sampled jointly with the dataset.
    """
    rng = np.random.default_rng(cfg.seed)
    coords = random_coords(cfg.n, cfg.box, rng)
    offsets = rng.uniform(-5.0, 5.0, cfg.f)
    scales = rng.uniform(0.5, 3.0, cfg.f)
    all_coords = coords if extra_coords is None else np.vstack([coords, np.asarray(extra_coords, float).reshape(-1, 2)])
    field = sample_field(all_coords, cfg, rng)
    values = offsets + scales * field
    if cfg.noise_std > 0:
        values[: cfg.n] += scales * cfg.noise_std * rng.standard_normal((cfg.n, cfg.t, cfg.f))

    available = np.ones((cfg.n, cfg.f), dtype=bool)
    n_drop = int(math.floor(cfg.thinning * cfg.n * cfg.f))
    if n_drop:
        available = _thin(cfg.n, cfg.f, n_drop, rng)

    locs = tuple(Location(i, float(lat), float(lon)) for i, (lat, lon) in enumerate(coords))
    ds = Dataset(locs, values[: cfg.n], available)
    truth = {
        "config": {**asdict(cfg), "box": list(cfg.box)},
        "offsets": offsets.tolist(),
        "scales": scales.tolist(),
        "masked_pairs": int((~available).sum()),
    }
    if extra_coords is not None:
        truth["extra_values"] = values[cfg.n :]
    return ds, truth


def _thin(n, f, n_drop, rng):
    """Drop ``n_drop`` (location, feature) pairs, leaving every location one feature."""
    if n_drop > n * (f - 1):
        raise ValueError(f"cannot drop {n_drop} pairs and keep one feature per location")
    for _ in range(1000):
        flat = rng.choice(n * f, size=n_drop, replace=False)
        available = np.ones(n * f, dtype=bool)
        available[flat] = False
        available = available.reshape(n, f)
        if available.any(axis=1).all():
            return available
    # fall back to a deterministic fill that respects the constraint
    available = np.ones((n, f), dtype=bool)
    order = rng.permutation(n * f)
    dropped = 0
    for idx in order:
        i, j = divmod(idx, f)
        if dropped == n_drop:
            break
        if available[i].sum() > 1:
            available[i, j] = False
            dropped += 1
    return available


def write_synth(cfg, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds, truth = synthesize(cfg)
    write_dataset(ds, out / "locations.csv", out / "readings.csv")
    (out / "truth.json").write_text(json.dumps(truth, sort_keys=True, indent=1) + "\n")
    return ds, truth
