import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from musci.dataset import CellProbabilities
from musci.learners import BasisSpec, LogisticModel
from musci.nuisance import ConditionalCdf, DensityRatio, MissingnessRatio, SitePropensity, build_grid
from musci.simulate import ScenarioConfig, generate_dataset

settings.register_profile("musci", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("musci")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


# -- constant nuisances ------------------------------------------------------

def const_logistic(p):
    return LogisticModel.constant(p, BasisSpec(2), 1)


def const_cdf(scores, values, scope="site 0"):
    """CDF fixed in x: ``values[j]`` at the j-th grid point built from ``scores``."""
    grid = build_grid(scores, G=len(np.unique(scores)))
    assert len(grid.points) == len(values)
    return ConditionalCdf(scope, grid, tuple(const_logistic(v) for v in values), np.array([], int))


def const_missingness(ratio):
    # (1 - e) / e = ratio
    return MissingnessRatio(const_logistic(1.0 / (1.0 + ratio)), "const")


def const_density(site, ratio):
    return DensityRatio(site, const_logistic(0.5), ratio)


def const_propensity(q0):
    return SitePropensity((0, 1), (const_logistic(q0), const_logistic(1 - q0)))


def cells(mapping, num_sites=2):
    probs = {(k, r): 0.0 for k in range(num_sites) for r in (0, 1)}
    probs.update(mapping)
    return CellProbabilities(probs, "test")


@pytest.fixture(scope="session")
def small_data():
    cfg = ScenarioConfig(n_k=200, replications=1)
    return generate_dataset(cfg, np.random.default_rng(123))


@pytest.fixture(scope="session")
def shifted_data():
    cfg = ScenarioConfig(n_k=200, covariate_shift="strong", concept_shift="strong", replications=1)
    return generate_dataset(cfg, np.random.default_rng(321))
