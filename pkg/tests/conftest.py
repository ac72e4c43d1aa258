import numpy as np
import pytest

from anchorgk.datamodel import Dataset, Location
from anchorgk.synth import SynthConfig, synthesize


def make_dataset(n=12, t=30, f=2, seed=0, available=None):
    """Random dataset with smooth-ish series inside a small lat/lon box."""
    rng = np.random.default_rng(seed)
    lat = rng.uniform(22.45, 22.75, n)
    lon = rng.uniform(113.9, 114.5, n)
    base = np.cumsum(rng.normal(size=(t, f)), axis=0)
    values = base[None] * rng.uniform(0.5, 1.5, (n, 1, f)) + rng.normal(scale=0.5, size=(n, t, f))
    locs = tuple(Location(i, float(a), float(b)) for i, (a, b) in enumerate(zip(lat, lon)))
    if available is None:
        available = np.ones((n, f), dtype=bool)
    return Dataset(locs, values, available)


@pytest.fixture
def small_ds():
    return make_dataset()


@pytest.fixture(scope="session")
def synth_small():
    ds, truth = synthesize(SynthConfig(n=16, t=24, f=2, seed=3))
    return ds, truth


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
