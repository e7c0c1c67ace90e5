import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from capsense.geometry import build_quadrature, make_surface
from capsense.solver import solve_equilibrium

settings.register_profile(
    "capsense",
    deadline=None,
    max_examples=15,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("capsense")


@pytest.fixture(scope="session")
def sphere():
    return make_surface("sphere", 1.0)


@pytest.fixture(scope="session")
def ellipsoid():
    return make_surface("ellipsoid", 2.0, 1.0, 0.5)


@pytest.fixture(scope="session")
def q_sphere(sphere):
    return build_quadrature(sphere, 64)


@pytest.fixture(scope="session")
def q_sphere32(sphere):
    return build_quadrature(sphere, 32)


@pytest.fixture(scope="session")
def q_ellipsoid(ellipsoid):
    return build_quadrature(ellipsoid, 64)


@pytest.fixture(scope="session")
def eq_sphere(q_sphere):
    return solve_equilibrium(q_sphere)


@pytest.fixture(scope="session")
def eq_ellipsoid(q_ellipsoid):
    return solve_equilibrium(q_ellipsoid)


@pytest.fixture
def rng():
    return np.random.default_rng(20240617)
