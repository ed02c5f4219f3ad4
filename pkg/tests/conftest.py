import numpy as np
import pytest

from glucotrial.controller import load_profile
from glucotrial.hovorka import load_parameter_table
from glucotrial.population import generate_population, load_demographics


@pytest.fixture(scope="session")
def demographics():
    return load_demographics()


@pytest.fixture(scope="session")
def table():
    return load_parameter_table()


@pytest.fixture(scope="session")
def profile():
    return load_profile()


@pytest.fixture(scope="session")
def small_population():
    entries, _ = generate_population(seed=101, n=12)
    return entries


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
