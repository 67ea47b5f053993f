import sys
from pathlib import Path

import numpy as np
import pytest

import drlab
from drlab.cli import write_data_csv

sys.path.insert(0, str(Path(__file__).parent))  # make tests/oracles.py importable

FIXTURE_SEED = 424242


@pytest.fixture(scope="session")
def default_spec():
    return drlab.DGPSpec()


@pytest.fixture(scope="session")
def default_truth(default_spec):
    return drlab.truth(default_spec)


@pytest.fixture(scope="session")
def dgp_fixture_csv(tmp_path_factory, default_spec):
    """Simulated default-DGP file of n=8000 with a recorded seed."""
    path = tmp_path_factory.mktemp("fixtures") / "default_dgp_n8000.csv"
    data = drlab.sample(default_spec, 8000, drlab.substream(FIXTURE_SEED, "estimate-fixture"))
    write_data_csv(path, data)
    return path


def random_observation(rng):
    x = np.array([1.0, rng.uniform(-2.0, 2.0)])
    return drlab.Observation(x=x, a=int(rng.integers(0, 2)), y=float(rng.uniform(-3.0, 3.0)))


def random_point(rng, k):
    """(psi, theta, single-row dataset) kept inside the positivity-safe box."""
    obs = random_observation(rng)
    psi = np.array([rng.uniform(-2.0, 2.0)])
    theta = rng.uniform(-1.0, 1.0, size=k) if k else np.zeros(0)
    data = drlab.data.from_rows([obs])
    return psi, theta, data
