"""Spatio-temporal observations with incomplete features.

A :class:`Dataset` holds ``N`` locations, ``T`` timesteps and ``F`` features.
Features that were never observed at a location are flagged in the
``available`` mask and their series are held at exactly zero.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Raised for malformed input files, carrying the offending line."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class ConflictError(DataError):
    pass


class UnknownLocationError(DataError):
    pass


@dataclass(frozen=True)
class Location:
    id: int
    lat: float
    lon: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} out of range for location {self.id}")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} out of range for location {self.id}")


@dataclass(frozen=True, eq=False)
class Dataset:
    locations: tuple
    values: np.ndarray
    available: np.ndarray

    def __post_init__(self):
        locs = tuple(self.locations)
        object.__setattr__(self, "locations", locs)
        values = np.array(self.values, dtype=float)
        available = np.array(self.available, dtype=bool)
        if values.ndim != 3:
            raise ValueError(f"values must be N x T x F, got shape {values.shape}")
        n, t, f = values.shape
        if len(locs) != n:
            raise ValueError(f"{len(locs)} locations but values have N={n}")
        if t < 2 or f < 1:
            raise ValueError(f"need T >= 2 and F >= 1, got T={t}, F={f}")
        if available.shape != (n, f):
            raise ValueError(f"available must be {(n, f)}, got {available.shape}")
        ids = [loc.id for loc in locs]
        if len(set(ids)) != len(ids):
            raise ValueError("location ids must be unique")
        if not np.all(np.isfinite(values)):
            raise ValueError("values must be finite")
        values[~available[:, None, :].repeat(t, axis=1)] = 0.0
        values.setflags(write=False)
        available.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "available", available)

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def t(self):
        return self.values.shape[1]

    @property
    def f(self):
        return self.values.shape[2]

    @property
    def ids(self):
        return [loc.id for loc in self.locations]

    @property
    def coords(self):
        """``N x 2`` array of ``(lat, lon)``."""
        return np.array([[loc.lat, loc.lon] for loc in self.locations], dtype=float).reshape(-1, 2)

    def index_of(self, loc_id):
        for i, loc in enumerate(self.locations):
            if loc.id == loc_id:
                return i
        raise KeyError(loc_id)

    def subset(self, ids):
        """Dataset restricted to ``ids``, keeping the original order."""
        keep = set(ids)
        rows = [i for i, loc in enumerate(self.locations) if loc.id in keep]
        return Dataset(
            locations=tuple(self.locations[i] for i in rows),
            values=self.values[rows],
            available=self.available[rows],
        )

    def with_values(self, values):
        return Dataset(self.locations, values, self.available)


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_json(self):
        return json.dumps({"mean": [float(x) for x in self.mean], "std": [float(x) for x in self.std]})

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(np.asarray(doc["mean"], dtype=float), np.asarray(doc["std"], dtype=float))

    def apply(self, values, available=None):
        out = (np.asarray(values, dtype=float) - self.mean) / self.std
        if available is not None:
            out = np.where(np.asarray(available)[:, None, :], out, 0.0)
        return out

    def invert(self, values, available=None):
        out = np.asarray(values, dtype=float) * self.std + self.mean
        if available is not None:
            out = np.where(np.asarray(available)[:, None, :], out, 0.0)
        return out


@dataclass(frozen=True)
class MaskSplit:
    observed_ids: frozenset = field(default_factory=frozenset)
    masked_ids: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "observed_ids", frozenset(self.observed_ids))
        object.__setattr__(self, "masked_ids", frozenset(self.masked_ids))
        if self.observed_ids & self.masked_ids:
            raise ValueError(f"locations both observed and masked: {sorted(self.observed_ids & self.masked_ids)}")
        if self.observed_ids & self.masked_ids:
            raise ValueError("observed and masked ids overlap")


def _read_rows(path, header):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise DataError("empty file", path, 1) from None
        if [c.strip() for c in first] != header:
            raise DataError(f"expected header {','.join(header)}, got {','.join(first)}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"expected {len(header)} fields, got {len(row)}", path, lineno)
            yield lineno, row


def _parse_int(text, path, lineno, name):
    try:
        return int(text)
    except ValueError:
        raise DataError(f"{name} is not an integer: {text!r}", path, lineno) from None


def _parse_float(text, path, lineno, name):
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"{name} is not a number: {text!r}", path, lineno) from None
    if not math.isfinite(value):
        raise DataError(f"{name} is not finite: {text!r}", path, lineno)
    return value


def load_locations(path):
    locs = []
    seen = set()
    for lineno, row in _read_rows(path, ["id", "lat", "lon"]):
        loc_id = _parse_int(row[0], path, lineno, "id")
        lat = _parse_float(row[1], path, lineno, "lat")
        lon = _parse_float(row[2], path, lineno, "lon")
        if loc_id in seen:
            raise ConflictError(f"duplicate location id {loc_id}", path, lineno)
        seen.add(loc_id)
        try:
            locs.append(Location(loc_id, lat, lon))
        except ValueError as exc:
            raise DataError(str(exc), path, lineno) from None
    if not locs:
        raise DataError("no locations", path)
    return locs


def _interpolate_gaps(series):
    """Linear interpolation of NaN gaps; ends are held at the nearest reading."""
    known = ~np.isnan(series)
    if known.all():
        return series
    idx = np.arange(series.size)
    return np.interp(idx, idx[known], series[known])


def load_dataset(locations_path, readings_path):
    """Read ``locations.csv`` and long-format ``readings.csv`` into a Dataset.

    A ``(location, feature)`` pair is available iff it has at least one reading.
    Interior and edge gaps in an available series are filled by linear
    interpolation in time.
    """
    locs = load_locations(locations_path)
    index = {loc.id: i for i, loc in enumerate(locs)}
    cells = {}
    t_max = -1
    f_max = -1
    for lineno, row in _read_rows(readings_path, ["location_id", "t", "feature", "value"]):
        loc_id = _parse_int(row[0], readings_path, lineno, "location_id")
        t = _parse_int(row[1], readings_path, lineno, "t")
        feat = _parse_int(row[2], readings_path, lineno, "feature")
        value = _parse_float(row[3], readings_path, lineno, "value")
        if t < 0 or feat < 0:
            raise DataError("t and feature must be non-negative", readings_path, lineno)
        if loc_id not in index:
            raise UnknownLocationError(f"unknown location_id {loc_id}", readings_path, lineno)
        key = (index[loc_id], t, feat)
        if key in cells:
            raise ConflictError(
                f"duplicate reading for location {loc_id}, t={t}, feature={feat}",
                readings_path,
                lineno,
            )
        cells[key] = value
        t_max = max(t_max, t)
        f_max = max(f_max, feat)
    if not cells:
        raise DataError("no readings", readings_path)

    n, n_t, n_f = len(locs), t_max + 1, f_max + 1
    raw = np.full((n, n_t, n_f), np.nan)
    for (i, t, feat), value in cells.items():
        raw[i, t, feat] = value
    available = ~np.all(np.isnan(raw), axis=1)
    values = np.zeros_like(raw)
    for i in range(n):
        for feat in range(n_f):
            if available[i, feat]:
                values[i, :, feat] = _interpolate_gaps(raw[i, :, feat])
    return Dataset(tuple(locs), values, available)


def write_locations(locations, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "lat", "lon"])
        for loc in locations:
            writer.writerow([loc.id, repr(float(loc.lat)), repr(float(loc.lon))])


def write_dataset(ds, locations_path, readings_path):
    """Inverse of :func:`load_dataset`; unavailable series are not written."""
    write_locations(ds.locations, locations_path)
    with Path(readings_path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["location_id", "t", "feature", "value"])
        for i, loc in enumerate(ds.locations):
            for t in range(ds.t):
                for feat in range(ds.f):
                    if ds.available[i, feat]:
                        writer.writerow([loc.id, t, feat, repr(float(ds.values[i, t, feat]))])


def compute_stats(ds, ids=None):
    """Per-feature mean and population std over available entries.

    If ``ids`` is given only those locations contribute. Zero-variance or
    empty features get ``std = 1``.
    """
    rows = np.arange(ds.n) if ids is None else np.array([ds.index_of(i) for i in ids], dtype=int)
    mean = np.zeros(ds.f)
    std = np.ones(ds.f)
    for feat in range(ds.f):
        sel = rows[ds.available[rows, feat]]
        if sel.size == 0:
            continue
        x = ds.values[sel, :, feat].ravel()
        mean[feat] = x.mean()
        s = x.std()
        std[feat] = s if s > 0 else 1.0
    return NormStats(mean, std)


def normalize(ds, stats=None, ids=None):
    """Return the z-scored dataset and the statistics used.

    Unavailable entries stay exactly zero.
    """
    if stats is None:
        stats = compute_stats(ds, ids)
    return ds.with_values(stats.apply(ds.values, ds.available)), stats


def denormalize(ds, stats):
    return ds.with_values(stats.invert(ds.values, ds.available))


def split_masks(ds, mask_fraction, seed):
    """Hold out ``floor(mask_fraction * N)`` whole locations at random."""
    if not 0.0 < mask_fraction < 1.0:
        raise ValueError(f"mask_fraction must be in (0, 1), got {mask_fraction}")
    n = ds.n
    m = int(math.floor(mask_fraction * n))
    if m < 1:
        raise ValueError(f"mask_fraction {mask_fraction} masks no location out of {n}")
    if n - m < 2:
        raise ValueError(f"mask_fraction {mask_fraction} leaves {n - m} observed locations, need >= 2")
    rng = np.random.default_rng(seed)
    ids = ds.ids
    picked = rng.choice(n, size=m, replace=False)
    masked = {ids[i] for i in picked}
    return MaskSplit(frozenset(ids) - masked, frozenset(masked))
