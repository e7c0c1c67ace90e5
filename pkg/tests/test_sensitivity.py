"""First-order expansions: corrector, current, capacity, far field, eigenvector."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from capsense.errors import ConfigurationError, RadiusTooSmallError
from capsense.geometry import Profile, build_quadrature, make_surface, perturbation_field, real_sph_harm
from capsense.oracle import sphere_np_eigenvalue
from capsense.potential import assemble_Kstar
from capsense.sensitivity import (
    capacity_first_order,
    eigen_residual,
    eigenvector_pairing,
    fit_order,
    ground_truth_eigenvector,
    np_first_eigenvector,
    np_spectrum_check,
    perturbed_equilibrium,
    predict_current,
    predict_eigenvector,
    predict_farfield,
    run_expansion_study,
    solve_corrector,
    spectrum_verdict,
)
from capsense.solver import solve_equilibrium

ONE = Profile.constant(1.0)
Y20 = Profile.harmonic(2, 0)

# ---------------------------------------------------------------------------
# Corrector
# ---------------------------------------------------------------------------


def test_corrector_inflation(eq_sphere):
    q = eq_sphere.quadrature
    cor = solve_corrector(eq_sphere, perturbation_field(q, ONE))
    np.testing.assert_array_equal(cor.boundary_data, -1.0 * eq_sphere.density)
    assert np.max(np.abs(cor.normal_derivative + 1.0)) <= 5e-3
    x = np.array([0.0, 3.0, 4.0])
    assert abs(cor.potential(x) - 0.2) <= 1e-3 * 0.2


def test_corrector_zero_profile(eq_sphere):
    cor = solve_corrector(eq_sphere, perturbation_field(eq_sphere.quadrature, Profile.zero()))
    assert not np.any(cor.normal_derivative)
    assert cor.potential([3.0, 0.0, 0.0]) == 0.0


def test_corrector_quadrupole(eq_sphere):
    q = eq_sphere.quadrature
    fld = perturbation_field(q, Y20)
    cor = solve_corrector(eq_sphere, fld)
    np.testing.assert_array_equal(cor.boundary_data, -fld.h * eq_sphere.density)
    Y = real_sph_harm(2, 0, q.points)
    assert q.norm(cor.normal_derivative + 3 * Y) <= 0.02 * q.norm(3 * Y)


# ---------------------------------------------------------------------------
# Current
# ---------------------------------------------------------------------------


def test_predict_current_inflated_sphere(eq_sphere):
    q = eq_sphere.quadrature
    fld = perturbation_field(q, ONE)
    pred = predict_current(eq_sphere, solve_corrector(eq_sphere, fld), fld, 0.1)
    assert np.max(np.abs(pred + 0.9)) <= 5e-3
    truth = perturbed_equilibrium(eq_sphere, ONE, 0.1).density
    assert np.max(np.abs(truth + 1 / 1.1)) <= 5e-3
    res = np.abs(truth - pred)
    assert np.max(np.abs(res - 0.01 / 1.1)) <= 0.2 * 0.01 / 1.1


def test_predict_current_eps_zero(eq_sphere):
    fld = perturbation_field(eq_sphere.quadrature, Y20)
    np.testing.assert_array_equal(predict_current(eq_sphere, solve_corrector(eq_sphere, fld), fld, 0.0), eq_sphere.density)


# ---------------------------------------------------------------------------
# Capacity
# ---------------------------------------------------------------------------


def test_capacity_first_order_values(eq_sphere):
    q = eq_sphere.quadrature
    assert abs(capacity_first_order(eq_sphere, perturbation_field(q, ONE)) - 1.0) <= 5e-3
    assert capacity_first_order(eq_sphere, perturbation_field(q, Profile.zero())) == 0.0
    t1 = capacity_first_order(eq_sphere, perturbation_field(q, Y20))
    assert abs(t1) <= 1e-3 * q.norm(real_sph_harm(2, 0, q.points))


@pytest.mark.parametrize("profile", ["Y20+const:0.3", "bump:1.5,0.3,0.2,0.6+x:0.2"])
def test_green_identity_reduction(eq_ellipsoid, profile):
    """sum dv/dn w = -sum h phi0^2 w, so T1 = -(1/4pi) sum dv/dn w."""
    q = eq_ellipsoid.quadrature
    fld = perturbation_field(q, Profile.parse(profile))
    cor = solve_corrector(eq_ellipsoid, fld)
    a = float(np.sum(cor.normal_derivative * q.weights))
    b = -float(np.sum(fld.h * eq_ellipsoid.density**2 * q.weights))
    assert abs(a - b) <= 5e-3 * abs(b)
    t1 = capacity_first_order(eq_ellipsoid, fld)
    assert abs(t1 + a / (4 * math.pi)) <= 5e-3 * abs(t1)


_SIGN_EQ = {}


def _small_ellipsoid_eq():
    if "eq" not in _SIGN_EQ:
        _SIGN_EQ["eq"] = solve_equilibrium(build_quadrature(make_surface("ellipsoid", 2, 1, 0.5), 16))
    return _SIGN_EQ["eq"]


@given(
    st.floats(0.0, 2.0),
    st.floats(0.05, 3.0),
    st.tuples(st.floats(-2, 2), st.floats(-1, 1), st.floats(-1, 1)),
    st.floats(0.2, 1.5),
    st.booleans(),
)
def test_capacity_sign_rule(c0, amp, centre, width, negate):
    eq = _small_ellipsoid_eq()
    prof = Profile.constant(c0) + Profile.bump(centre, width, amp)
    if negate:
        prof = -1.0 * prof
    t1 = capacity_first_order(eq, perturbation_field(eq.quadrature, prof))
    assert (t1 < 0) if negate else (t1 > 0)


# ---------------------------------------------------------------------------
# Far field
# ---------------------------------------------------------------------------


def test_predict_farfield_inflated_sphere(eq_sphere):
    fld = perturbation_field(eq_sphere.quadrature, ONE)
    x = np.array([0.0, 60.0, 80.0])
    val = predict_farfield(eq_sphere, fld, 0.1, x)
    assert abs(val - 0.011) <= 0.01**2 / 100 + 0.1 / 100**2
    assert predict_farfield(eq_sphere, fld, 0.0, x) == pytest.approx(float(eq_sphere.potential(x)), abs=0)
    with pytest.raises(RadiusTooSmallError):
        predict_farfield(eq_sphere, fld, 0.1, [10.0, 0, 0])


# ---------------------------------------------------------------------------
# First NP eigenvector
# ---------------------------------------------------------------------------


def test_first_eigenvector(eq_sphere, eq_ellipsoid):
    v = np_first_eigenvector(eq_sphere)
    assert np.max(np.abs(v + 1 / (2 * math.sqrt(math.pi)))) <= 5e-3 * 0.28209
    for eq in (eq_sphere, eq_ellipsoid):
        v = np_first_eigenvector(eq)
        assert abs(eq.quadrature.norm(v) - 1.0) <= 1e-10
        assert eigen_residual(eq.quadrature, v) <= 1e-3


def test_predict_eigenvector_inflated_sphere(eq_sphere):
    q = eq_sphere.quadrature
    fld = perturbation_field(q, ONE)
    base = np_first_eigenvector(eq_sphere)
    pred = predict_eigenvector(eq_sphere, solve_corrector(eq_sphere, fld), fld, 0.1)
    assert np.max(np.abs(pred - 0.9 * base)) <= 5e-3 * 0.28209
    truth = ground_truth_eigenvector(eq_sphere, ONE, 0.1)
    assert np.max(np.abs(truth - base / 1.1)) <= 5e-3 * 0.28209
    res = np.max(np.abs(truth - pred))
    assert abs(res - 0.01 * 0.28209) <= 0.2 * 0.01 * 0.28209
    # <pred, phi0> = 1 + eps <tau h phi0, phi0> = 1 - eps here (see the pairing identity)
    assert abs(q.inner(pred, base) - 0.9) <= 1e-3


def test_predict_eigenvector_eps_zero(eq_sphere):
    fld = perturbation_field(eq_sphere.quadrature, Y20)
    pred = predict_eigenvector(eq_sphere, solve_corrector(eq_sphere, fld), fld, 0.0)
    np.testing.assert_array_equal(pred, np_first_eigenvector(eq_sphere))


def test_pairing(eq_sphere):
    q = eq_sphere.quadrature
    assert eigenvector_pairing(eq_sphere, perturbation_field(q, Profile.zero()), 0.05) == (0.0, 0.0)
    lhs, rhs = eigenvector_pairing(eq_sphere, perturbation_field(q, ONE), 0.05)
    assert abs(rhs + 0.05) <= 1e-3 * 0.05
    assert abs(lhs + 0.05) <= 2.5e-3


# ---------------------------------------------------------------------------
# NP spectrum
# ---------------------------------------------------------------------------


def _sphere_reference(count):
    return [sphere_np_eigenvalue(l) for l in range(5) for _ in range(2 * l + 1)][:count]


@pytest.mark.parametrize("R", [1.0, 2.0])
def test_sphere_spectrum(R):
    vals = np_spectrum_check(build_quadrature(make_surface("sphere", R), 32), 10)
    np.testing.assert_allclose(vals, _sphere_reference(10), atol=1e-3)


def test_ellipsoid_spectrum(q_ellipsoid):
    top = np_spectrum_check(q_ellipsoid, 1)
    assert abs(top[0] - 0.5) <= 1e-3
    vals = np_spectrum_check(build_quadrature(make_surface("ellipsoid", 2, 1, 0.5), 32), 10)
    v = spectrum_verdict(vals)
    assert v["top_ok"] and v["interior_ok"]


def test_spectrum_symmetrized_on_sphere(q_sphere32):
    """On the sphere the weighted K* is symmetric, so all eigenvalues are real."""
    Ks = assemble_Kstar(q_sphere32).entries
    w = np.sqrt(q_sphere32.weights)
    M = w[:, None] * Ks / w[None, :]
    assert np.max(np.abs(M - M.T)) <= 1e-10


# ---------------------------------------------------------------------------
# Study machinery
# ---------------------------------------------------------------------------


def test_fit_order_exact_power_law():
    eps = np.array([0.02, 0.04, 0.08])
    slope, intercept, used = fit_order(eps, 3.0 * eps**2)
    assert slope == pytest.approx(2.0, abs=1e-12)
    assert intercept == pytest.approx(math.log(3.0), abs=1e-12)
    assert used.all()
    slope, _, used = fit_order(eps, 3.0 * eps**2, floor=3.0 * 0.02**2 / 10 * 2.0)
    assert list(used) == [False, True, True] and slope == pytest.approx(2.0)
    slope, _, used = fit_order(eps, [1e-9, 1e-9, 1e-9], floor=1e-8)
    assert math.isnan(slope) and not used.any()


def test_study_configuration_errors(sphere):
    with pytest.raises(ConfigurationError):
        run_expansion_study("capacity", sphere, ONE, [])
    with pytest.raises(ConfigurationError):
        run_expansion_study("capacity", sphere, ONE, [0.1, -0.1])
    with pytest.raises(ConfigurationError):
        run_expansion_study("volume", sphere, ONE, [0.1])


def test_capacity_study_inflation_is_floor_limited(sphere):
    """cap(B_{1+eps}) is linear in eps, so the residual is pure discretization noise."""
    rep = run_expansion_study("capacity", sphere, ONE, [0.05, 0.1, 0.2], resolution=32, floor_resolution=48)
    assert len(rep.residuals) == 3
    assert rep.verdict == "floor-limited"
    assert max(rep.residuals) <= 5e-3 * max(rep.truth)
    np.testing.assert_allclose(rep.truth, [1.05, 1.1, 1.2], rtol=5e-3)
    assert all(g <= t for g, t in zip(rep.extra["farfield_vs_gauss"], rep.extra["farfield_tolerance"]))
    d = rep.to_dict()
    assert d["verdict"] == "floor-limited" and d["slope"] is None
