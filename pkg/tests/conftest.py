import numpy as np
import pytest

from dghif import tensor as T


@pytest.fixture(autouse=True)
def force_f64():
    """All tests run at 64-bit precision; training default stays 32-bit."""
    prev = T.precision()
    T.set_precision("f64")
    yield
    T.set_precision(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
