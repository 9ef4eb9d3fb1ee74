"""Shared fixtures: backend selection and small instance builders."""
import numpy as np
import pytest

from otagg import kernels
from otagg.backend import numba_available


def _backend_params():
    params = ["numpy"]
    if numba_available():
        params.insert(0, "numba")
    return params


@pytest.fixture(params=_backend_params())
def backend(request):
    """Run the test under each available kernel backend, then restore."""
    previous = kernels.current_backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_intensities(rng, n):
    """Strictly positive weights summing to 1."""
    w = rng.exponential(1.0, n) + 1e-3
    return w / w.sum()
