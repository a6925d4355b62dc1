import numpy as np
import pytest

from portforge.emport import Mode, modal_surrogate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_surrogate():
    """Three damped modes on one port, like the shipped validation config."""
    return modal_surrogate([Mode(8e9, 0.05, 60.0), Mode(10.5e9, 0.08, 40.0),
                            Mode(13e9, 0.10, 80.0)])


def direct_dft(x):
    n = len(x)
    k = np.arange(n)
    return np.array([np.sum(x * np.exp(-2j * np.pi * m * k / n)) for m in range(n)])
