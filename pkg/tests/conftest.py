import numpy as np
import pytest
from hypothesis import settings

from bspmort.basis import build_default_basis
from bspmort.covariance import build_correlations

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def basis():
    return build_default_basis()


@pytest.fixture(scope="session")
def correlations(basis):
    return build_correlations(basis)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
