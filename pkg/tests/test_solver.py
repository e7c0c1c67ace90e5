"""Equilibrium solve, capacity, exterior Dirichlet problem and far field."""

import math
import warnings

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from capsense import solver
from capsense.errors import ConditioningError, ConditioningWarning, NearFieldError, RadiusTooSmallError
from capsense.geometry import SH_INDEX, build_quadrature, make_surface, real_sph_harm
from capsense.oracle import ellipsoid_capacity
from capsense.potential import assemble_K, assemble_S
from capsense.solver import (
    condition_estimate,
    eval_potential,
    far_field_coefficient,
    solve_equilibrium,
    solve_exterior_dirichlet,
)


@pytest.mark.parametrize("R", [1.0, 2.0])
def test_sphere_capacity(R):
    eq = solve_equilibrium(build_quadrature(make_surface("sphere", R), 64))
    assert abs(eq.capacity - R) <= 5e-3 * R


def test_ellipsoid_capacity(eq_ellipsoid):
    ref = ellipsoid_capacity(2, 1, 0.5)
    assert abs(eq_ellipsoid.capacity - ref) <= 0.01 * ref


@pytest.mark.parametrize("eq", ["eq_sphere", "eq_ellipsoid"])
def test_equilibrium_invariants(eq, request):
    sol = request.getfixturevalue(eq)
    q = sol.quadrature
    np.testing.assert_allclose(assemble_S(q) @ sol.density, 1.0, atol=1e-9)
    assert sol.capacity > 0
    assert np.all(sol.density < 0)


def test_star_capacity_positive_and_two_routes_agree():
    q = build_quadrature(make_surface("star", 1.0, 2, 0, 0.2, 3, 1, 0.1), 32)
    eq = solve_equilibrium(q)
    assert eq.capacity > 0
    r = 60 * q.circumradius
    assert abs(far_field_coefficient(eq, r) - eq.capacity) <= 3.0 / r * eq.capacity


@pytest.mark.parametrize("alpha", [0.5, 2.0])
def test_capacity_scaling(alpha):
    base = solve_equilibrium(build_quadrature(make_surface("sphere", 1.0), 32)).capacity
    scaled = solve_equilibrium(build_quadrature(make_surface("sphere", alpha), 32)).capacity
    assert abs(scaled - alpha * base) <= 5e-3 * alpha * base


# ---------------------------------------------------------------------------
# Exterior Dirichlet problem
# ---------------------------------------------------------------------------


def test_dirichlet_constant_data_recovers_equilibrium(q_sphere):
    sol = solve_exterior_dirichlet(q_sphere, np.ones(q_sphere.size))
    x = 5 * np.array([0.6, 0.0, 0.8])
    assert abs(eval_potential(sol, x) - 0.2) <= 5e-3 * 0.2


def test_dirichlet_zero_data(q_sphere):
    sol = solve_exterior_dirichlet(q_sphere, np.zeros(q_sphere.size))
    assert not np.any(sol.density)
    assert sol.potential([3.0, 0, 0]) == 0.0


def test_dirichlet_degree_one_harmonic(q_sphere):
    sol = solve_exterior_dirichlet(q_sphere, real_sph_harm(1, 0, q_sphere.points))
    x = 5 * np.array([1.0, 2.0, 3.0]) / math.sqrt(14)
    ref = real_sph_harm(1, 0, x)[0] / 25
    assert abs(eval_potential(sol, x) - ref) <= 0.01 * abs(ref)


def test_dirichlet_density_solves_second_kind_rhs(q_ellipsoid, rng):
    f = rng.normal(size=q_ellipsoid.size)
    sol = solve_exterior_dirichlet(q_ellipsoid, f)
    lhs = assemble_S(q_ellipsoid) @ sol.density
    rhs = 0.5 * f + assemble_K(q_ellipsoid) @ f
    assert q_ellipsoid.norm(lhs - rhs) <= 1e-9 * q_ellipsoid.norm(rhs)


def test_green_reciprocity(eq_ellipsoid, rng):
    """sum dv/dn u w = sum du/dn v w with u = 1 and v the Dirichlet solution."""
    q = eq_ellipsoid.quadrature
    B = np.stack([real_sph_harm(l, m, q.points) for l, m in SH_INDEX[:9]], 1)
    for _ in range(3):
        f = B @ rng.normal(size=9)
        v = solve_exterior_dirichlet(q, f)
        a = q.inner(v.density, np.ones(q.size))
        b = q.inner(eq_ellipsoid.density, f)
        assert abs(a - b) <= 5e-3 * max(abs(a), abs(b))


# ---------------------------------------------------------------------------
# Potentials and far field
# ---------------------------------------------------------------------------


def test_potential_values(eq_sphere, eq_ellipsoid):
    assert abs(eval_potential(eq_sphere, [0.0, 4.0, 0.0]) - 0.25) <= 5e-3 * 0.25
    for eq in (eq_sphere, eq_ellipsoid):
        diam = eq.quadrature.surface.diameter
        x = 1e4 * diam * np.array([2.0, -1.0, 2.0]) / 3.0
        assert abs(np.linalg.norm(x) * eval_potential(eq, x) - eq.capacity) <= 1e-3 * eq.capacity


def test_potential_near_surface_raises(eq_sphere):
    with pytest.raises(NearFieldError):
        eval_potential(eq_sphere, [0.0, 0.0, 1.0 + 1e-6])


def test_far_field_coefficient(eq_sphere, eq_ellipsoid):
    assert abs(far_field_coefficient(eq_sphere, 100.0) - 1.0) <= 0.01
    ff = far_field_coefficient(eq_ellipsoid, 200.0)
    assert abs(ff - eq_ellipsoid.capacity) <= 0.01 * eq_ellipsoid.capacity
    assert abs(ff - eq_ellipsoid.capacity) <= 3.0 / 200.0 * eq_ellipsoid.capacity
    eq2 = solve_equilibrium(build_quadrature(make_surface("sphere", 2.0), 32))
    assert abs(far_field_coefficient(eq2, 100.0) - 2.0) <= 0.02


def test_far_field_radius_too_small(eq_sphere):
    with pytest.raises(RadiusTooSmallError):
        far_field_coefficient(eq_sphere, 10.0)


# ---------------------------------------------------------------------------
# Conditioning and determinism
# ---------------------------------------------------------------------------


def test_conditioning_thresholds(monkeypatch, sphere):
    q = build_quadrature(sphere, 16)
    cond = condition_estimate(q)
    assert 1 < cond < solver.WARN_CONDITION
    monkeypatch.setattr(solver, "WARN_CONDITION", cond / 2)
    with pytest.warns(ConditioningWarning):
        condition_estimate(q)
    monkeypatch.setattr(solver, "MAX_CONDITION", cond / 2)
    with pytest.raises(ConditioningError) as info:
        condition_estimate(q)
    assert info.value.condition == pytest.approx(cond)


def test_no_warning_in_normal_use(sphere):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        solve_equilibrium(build_quadrature(sphere, 24))


def test_repeatable_and_thread_independent(ellipsoid):
    runs = []
    for threads in (1, 1, 2):
        with threadpool_limits(limits=threads):
            q = build_quadrature(ellipsoid, 32)
            runs.append(solve_equilibrium(q))
    assert runs[0].density.tobytes() == runs[1].density.tobytes()
    assert runs[0].capacity == runs[1].capacity
    np.testing.assert_allclose(runs[2].density, runs[0].density, rtol=1e-12, atol=0)
    assert abs(runs[2].capacity - runs[0].capacity) <= 1e-12 * runs[0].capacity
