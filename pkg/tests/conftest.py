import numpy as np
import pytest

from coxnnmi.simulation import generate_dataset, make_scenario
from coxnnmi.survival_core import SurvivalData


def brute_loglik(beta, time, event, covs, weights=None):
    """Breslow partial log-likelihood by explicit loops over event times."""
    n = len(time)
    w = [1.0] * n if weights is None else list(weights)
    total = 0.0
    for i in range(n):
        if not event[i]:
            continue
        eta_i = sum(b * c for b, c in zip(beta, covs[i]))
        denom = 0.0
        for j in range(n):
            if time[j] >= time[i]:
                denom += w[j] * np.exp(sum(b * c for b, c in zip(beta, covs[j])))
        total += w[i] * (eta_i - np.log(denom))
    return total


@pytest.fixture
def six_subjects():
    # tied event/censoring at t=5; finite maximum
    time = np.array([2.0, 3.0, 5.0, 5.0, 7.0, 8.0])
    event = np.array([1, 1, 1, 0, 1, 0])
    x = np.array([0.5, 1.2, -0.3, 0.8, 0.1, -1.0])
    return SurvivalData(time, event, np.zeros((6, 0)), x)


@pytest.fixture(scope="session")
def table4_400():
    return generate_dataset(make_scenario("table4", 400), np.random.default_rng(11), full=True)


@pytest.fixture(scope="session")
def table5_400():
    return generate_dataset(make_scenario("table5", 400), np.random.default_rng(12), full=True)
