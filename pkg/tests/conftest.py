import sys

import numpy as np
import pytest

from featgen import data


@pytest.fixture(scope="session")
def phantom_hgg():
    return data.generate_phantom(data.Label.HGG, 8, seed=1)


@pytest.fixture(scope="session")
def phantom_lgg():
    return data.generate_phantom(data.Label.LGG, 8, seed=1)


@pytest.fixture(scope="session")
def phantom_slices(phantom_hgg, phantom_lgg):
    return data.extract_slices(phantom_hgg) + data.extract_slices(phantom_lgg)


@pytest.fixture(scope="session")
def small_corpus():
    """Small-side phantom corpus for training smoke tests."""
    side = 64
    volumes = [data.generate_phantom(data.Label.HGG, 5, s, side=side) for s in range(3)]
    volumes += [data.generate_phantom(data.Label.LGG, 5, s, side=side) for s in range(3)]
    slices = [s for v in volumes for s in data.extract_slices(v)]
    stats = data.fit_normalizer(slices)
    return data.apply_normalizer(slices, stats)


def random_mask(rng, shape=(16, 16)):
    return (rng.random(shape) < rng.uniform(0.05, 0.6)).astype(np.uint8)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "VERDICTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.VERDICTS:
        terminalreporter.write_line(line)
