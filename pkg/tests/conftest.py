import numpy as np
import pytest
from hypothesis import settings

from qfilter.operators import EXCITED, GROUND, SIGMA_MINUS, SIGMA_X, SystemModel

settings.register_profile("qfilter", max_examples=60, deadline=None)
settings.load_profile("qfilter")


def random_hermitian(rng, d):
    a = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    return 0.5 * (a + a.conj().T)


def random_density(rng, d):
    w = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    rho = w @ w.conj().T
    return rho / np.trace(rho).real


def random_operator(rng, d):
    return rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))


def random_model(rng, d, detection="homodyne"):
    return SystemModel(random_hermitian(rng, d), random_operator(rng, d) / np.sqrt(d),
                       random_density(rng, d), detection)


@pytest.fixture
def decay():
    return SystemModel(np.zeros((2, 2)), SIGMA_MINUS, EXCITED, "homodyne")


@pytest.fixture
def rabi():
    return SystemModel(SIGMA_X, SIGMA_MINUS, GROUND, "homodyne")
