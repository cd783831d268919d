import numpy as np
import pytest

from migflow.domain import DemographicRates, TimeAxis


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_rates(n, years=(2000, 2000), births=None, gamma=None):
    axis = TimeAxis(*years)
    y = len(axis)
    b = np.zeros((y, n)) if births is None else np.broadcast_to(np.asarray(births, float), (y, n)).copy()
    g = np.zeros((y, n)) if gamma is None else np.broadcast_to(np.asarray(gamma, float), (y, n)).copy()
    return DemographicRates(axis, b, g)
