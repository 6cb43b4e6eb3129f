import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from darcyinv.darcy import ForwardModel
from darcyinv.grid import BoundaryConditions, build_grid, sample_observation_nodes
from darcyinv.random_field import CovarianceSpec, build_kl_basis

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def desk_grid():
    return build_grid(26, 26, 200.0, 200.0)


@pytest.fixture(scope="session")
def desk_basis(desk_grid):
    return build_kl_basis(desk_grid, CovarianceSpec(1.0, 100.0), 20)


@pytest.fixture(scope="session")
def desk_ctx(desk_grid, desk_basis):
    obs = sample_observation_nodes(desk_grid, 200, 1)
    return ForwardModel(desk_grid, desk_basis, BoundaryConditions(), obs)


@pytest.fixture(scope="session")
def small_ctx():
    """8x8 grid, 6 modes, 10 monitors: cheap enough for hypothesis."""
    g = build_grid(8, 8, 70.0, 70.0)
    basis = build_kl_basis(g, CovarianceSpec(1.0, 30.0), 6)
    return ForwardModel(g, basis, BoundaryConditions(), sample_observation_nodes(g, 10, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config.stash.setdefault(ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
