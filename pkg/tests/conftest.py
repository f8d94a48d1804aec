import numpy as np
import pytest

from fedunlearn.data import Dataset, Partition
from fedunlearn.nn import NetworkSpec, init_params


def random_dataset(n, d, classes, seed):
    rng = np.random.default_rng(seed)
    return Dataset(rng.uniform(0, 1, (n, d)), rng.integers(0, classes, n), classes, "random")


def split_partition(n_total, sizes, forget=()):
    """Contiguous client blocks of the given sizes, with ``forget`` flagged."""
    bounds = np.cumsum([0, *sizes])
    flags = np.zeros(n_total, dtype=bool)
    flags[list(forget)] = True
    return Partition([np.arange(a, b) for a, b in zip(bounds[:-1], bounds[1:])], flags)


@pytest.fixture
def net242():
    spec = NetworkSpec.mlp([2, 4, 2])
    return spec, init_params(spec, 3)


@pytest.fixture
def data8():
    return random_dataset(8, 2, 2, seed=11)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
