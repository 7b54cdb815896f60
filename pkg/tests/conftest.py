import pytest

from kickflow.features import FeatureMap
from kickflow.grid_field import DomainSpec
from kickflow.noise import build_model
from kickflow.ns_solver import SolverConfig, estimate_dissipation
from kickflow.oracle import bundled_five_state


@pytest.fixture(scope="session")
def domain():
    return DomainSpec(32, 32, 0.05)


@pytest.fixture(scope="session")
def model():
    return build_model()


@pytest.fixture(scope="session")
def solver():
    # coarse step for test speed; fine-step runs pin their own config
    return SolverConfig(dt=0.05)


@pytest.fixture(scope="session")
def solver_fine():
    return SolverConfig(dt=0.025)


@pytest.fixture(scope="session")
def fmap(domain):
    return FeatureMap.build(domain)


@pytest.fixture(scope="session")
def chain5():
    return bundled_five_state()


@pytest.fixture(scope="session")
def dissipation(domain, model, solver_fine):
    # shared by the dissipativity and mixing criteria; the fitted constants
    # define the invariant-ball radius every ball-relative tolerance uses
    return estimate_dissipation(domain, model, solver_fine, n_samples=128, seed=5)
