import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from srlab.net import Network, init_network  # noqa: E402


def random_net(rng, dims, scaling=False):
    ws = [rng.normal(size=(a, b)) for a, b in zip(dims[:-1], dims[1:])]
    gs = [rng.uniform(0.5, 1.5, size=n) if scaling else np.ones(n) for n in dims[1:-1]]
    return Network(tuple(ws), tuple(gs))


def random_dims(rng, max_width=8, max_depth=4, n_in=None):
    depth = int(rng.integers(1, max_depth + 1))
    dims = [n_in or int(rng.integers(1, max_width + 1))]
    dims += [int(rng.integers(1, max_width + 1)) for _ in range(depth - 1)]
    dims.append(int(rng.integers(2, max_width + 1)))
    return dims


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_net():
    return init_network([2, 4, 3], 0)
