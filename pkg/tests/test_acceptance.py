"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` (lines appear without ``-s``).
"""

import json
import time

import numpy as np
import pytest

from capsense.cli import ExperimentConfig, effective_threads, main, run
from capsense.geometry import (
    SH_INDEX,
    Profile,
    build_quadrature,
    make_surface,
    perturb_surface,
    perturbation_field,
    real_sph_harm,
)
from capsense.oracle import ellipsoid_capacity, fd_capacity_derivative, sphere_np_eigenvalue
from capsense.potential import assemble_K, assemble_Kstar, eval_double_layer, single_layer_along_normal
from capsense.sensitivity import (
    capacity_first_order,
    eigenvector_pairing,
    np_spectrum_check,
    perturbed_equilibrium,
    predict_current,
    run_expansion_study,
    solve_corrector,
    spectrum_verdict,
)
from capsense.solver import solve_equilibrium

ONE = Profile.constant(1.0)
Y20 = Profile.harmonic(2, 0)
EPS = [0.02, 0.04, 0.08]

pytestmark = pytest.mark.slow


@pytest.fixture
def verdict(capsys):
    """Collect named sub-checks, print one line for the criterion, then assert."""

    class Verdict:
        def __init__(self):
            self.checks = []

        def check(self, name, ok, detail=""):
            self.checks.append((name, bool(ok), detail))

        def finish(self, number, title):
            ok = all(c[1] for c in self.checks)
            failed = [f"{n} ({d})" for n, good, d in self.checks if not good]
            line = f"CRITERION {number:2d} {'PASS' if ok else 'FAIL'}: {title}"
            if failed:
                line += " | failed: " + "; ".join(failed)
            with capsys.disabled():
                print("\n" + line)
                for n, good, d in self.checks:
                    print(f"    [{'ok' if good else 'FAIL'}] {n}: {d}")
            assert ok, line

    return Verdict()


def test_criterion_01_capacity_oracle(verdict):
    t0 = time.perf_counter()
    cap = solve_equilibrium(build_quadrature(make_surface("sphere", 1.0), 64)).capacity
    t_sphere = time.perf_counter() - t0
    verdict.check("sphere(1) within 0.5%", abs(cap - 1.0) <= 5e-3, f"cap={cap:.8f}")
    verdict.check("sphere runtime <= 60 s", t_sphere <= 60, f"{t_sphere:.1f} s")

    t0 = time.perf_counter()
    cap = solve_equilibrium(build_quadrature(make_surface("ellipsoid", 2, 1, 0.5), 64)).capacity
    t_ell = time.perf_counter() - t0
    ref = ellipsoid_capacity(2, 1, 0.5)
    verdict.check("ellipsoid(2,1,0.5) within 1%", abs(cap - ref) <= 0.01 * ref, f"cap={cap:.8f} oracle={ref:.8f}")
    verdict.check("ellipsoid runtime <= 60 s", t_ell <= 60, f"{t_ell:.1f} s")
    verdict.finish(1, "capacity oracle")


def test_criterion_02_K_and_D_of_one(verdict, q_sphere, q_ellipsoid):
    for name, q in (("sphere", q_sphere), ("ellipsoid", q_ellipsoid)):
        one = np.ones(q.size)
        err = float(np.max(np.abs(assemble_K(q) @ one - 0.5)))
        verdict.check(f"{name} K[1] = 1/2 nodewise", err <= 1e-3, f"max err {err:.2e}")
        R = q.circumradius
        outside = np.array([[1.5 * R, 0.3, 0.2], [0.0, 0.0, 2.0 * R], [-1.2 * R, 1.2 * R, 0.5]])
        inside = np.array([[0.0, 0.0, 0.0], [0.1, 0.2, -0.1], [0.3, -0.2, 0.05]])
        e_out = float(np.max(np.abs(eval_double_layer(q, one, outside))))
        e_in = float(np.max(np.abs(eval_double_layer(q, one, inside) - 1.0)))
        verdict.check(f"{name} D[1] = 0 outside", e_out <= 1e-3, f"max err {e_out:.2e}")
        verdict.check(f"{name} D[1] = 1 inside", e_in <= 1e-3, f"max err {e_in:.2e}")
    verdict.finish(2, "K[1] = 1/2 and D[1] = 0 / 1")


def test_criterion_03_jump_closure(verdict, q_sphere):
    q = q_sphere
    rng = np.random.default_rng(7)
    B = np.stack([real_sph_harm(l, m, q.points) for l, m in SH_INDEX], 1)
    phi = B @ rng.normal(size=(B.shape[1], 20))
    delta = 1e-2
    F = single_layer_along_normal(q, phi, [0.0, delta, 2 * delta, 3 * delta])
    fd = (-11 * F[..., 0] + 18 * F[..., 1] - 9 * F[..., 2] + 2 * F[..., 3]) / (6 * delta)
    Ks = assemble_Kstar(q)
    errs = []
    for k in range(20):
        exact = 0.5 * phi[:, k] + Ks @ phi[:, k]
        errs.append(q.norm(fd[:, k] - exact) / q.norm(exact))
    verdict.check("20 random densities within 1% (weighted L2)", max(errs) <= 0.01, f"worst {max(errs):.2e}")
    verdict.finish(3, "jump-relation closure")


def test_criterion_04_capacity_derivative(verdict, sphere, eq_sphere):
    t0 = time.perf_counter()
    t1 = capacity_first_order(eq_sphere, perturbation_field(eq_sphere.quadrature, ONE))
    fd = fd_capacity_derivative(sphere, ONE)
    verdict.check("h=1: T1 = 1 +- 0.5%", abs(t1 - 1.0) <= 5e-3, f"T1={t1:.6f}")
    verdict.check("h=1: T1 vs finite difference within 1%", abs(t1 - fd) <= 0.01 * abs(fd), f"fd={fd:.6f}")
    rep = run_expansion_study("capacity", sphere, Y20, EPS)
    verdict.check(
        "h=Y20: residual slope 2 +- 0.3",
        rep.verdict == "pass",
        f"slope={rep.slope:.3f} verdict={rep.verdict} residuals={['%.2e' % r for r in rep.residuals]} floor={rep.floor:.1e}",
    )
    elapsed = time.perf_counter() - t0
    verdict.check("runtime <= 5 min", elapsed <= 300, f"{elapsed:.0f} s")
    verdict.finish(4, "capacity first-order term")


def test_criterion_05_current(verdict, sphere, eq_sphere):
    q = eq_sphere.quadrature
    fld = perturbation_field(q, ONE)
    cor = solve_corrector(eq_sphere, fld)
    for e in EPS:
        res = np.abs(perturbed_equilibrium(eq_sphere, ONE, e).density - predict_current(eq_sphere, cor, fld, e))
        target = e * e / (1 + e)
        dev = float(np.max(np.abs(res - target)) / target)
        verdict.check(f"h=1 eps={e}: residual eps^2/(1+eps) within 20%", dev <= 0.2, f"max rel dev {dev:.3f}")
    rep = run_expansion_study("current", sphere, Y20, EPS)
    verdict.check("h=Y20: slope 2 +- 0.3", rep.verdict == "pass", f"slope={rep.slope:.3f} verdict={rep.verdict}")
    verdict.finish(5, "first-order current")


def test_criterion_06_farfield(verdict, sphere, ellipsoid):
    rep = run_expansion_study("farfield", sphere, ONE, [0.1], radius=100.0)
    r, b = rep.residuals[0], rep.extra["bound"][0]
    verdict.check("sphere h=1 eps=0.1 |x|=100", r <= b, f"error {r:.2e} bound {b:.2e}")
    rep = run_expansion_study("farfield", ellipsoid, Y20, EPS, radius=100.0)
    detail = ", ".join(f"{x:.1e}<={y:.1e}" for x, y in zip(rep.residuals, rep.extra["bound"]))
    verdict.check("ellipsoid h=Y20 study |x|=100", rep.verdict == "pass", detail)
    verdict.finish(6, "far-field expansion")


def test_criterion_07_eigenvector(verdict, sphere, eq_sphere):
    lhs, rhs = eigenvector_pairing(eq_sphere, perturbation_field(eq_sphere.quadrature, ONE), 0.05)
    verdict.check("h=1 eps=0.05 pairing lhs = -0.05 within 10%", abs(lhs + 0.05) <= 0.005, f"lhs={lhs:.5f}")
    verdict.check("h=1 eps=0.05 pairing rhs = -0.05 within 10%", abs(rhs + 0.05) <= 0.005, f"rhs={rhs:.5f}")
    ev = run_expansion_study("eigenvector", sphere, Y20, EPS)
    verdict.check("h=Y20 eigenvector slope 2 +- 0.3", ev.verdict == "pass", f"slope={ev.slope:.3f} verdict={ev.verdict}")
    pr = run_expansion_study("pairing", sphere, Y20, EPS)
    verdict.check("h=Y20 pairing slope 2 +- 0.3", pr.verdict == "pass", f"slope={pr.slope:.3f} verdict={pr.verdict}")
    for e, d in zip(EPS, ev.extra["pred_dot_base"]):
        verdict.check(f"h=Y20 eps={e}: <pred, phi0> = 1 within 10 eps^2", abs(d - 1.0) <= 10 * e * e, f"{d:.6f}")
    verdict.finish(7, "eigenvector expansion and pairing")


def test_criterion_08_np_spectrum(verdict, sphere):
    vals = np_spectrum_check(build_quadrature(sphere, 32), 10)
    ref = np.array([sphere_np_eigenvalue(l) for l in range(4) for _ in range(2 * l + 1)][:10])
    err = float(np.max(np.abs(vals - ref)))
    verdict.check("sphere(1) top 10 match 1/(2(2l+1))", err <= 1e-3, f"max err {err:.2e}")
    ell = make_surface("ellipsoid", 2, 1, 0.5)
    top = float(np_spectrum_check(build_quadrature(ell, 64), 1)[0])
    verdict.check("ellipsoid top eigenvalue 1/2 +- 1e-3", abs(top - 0.5) <= 1e-3, f"top={top:.6f}")
    sv = spectrum_verdict(np_spectrum_check(build_quadrature(ell, 32), 10))
    verdict.check("ellipsoid other eigenvalues inside (-1/2, 1/2)", sv["interior_ok"], "top 10 checked")
    for prof, e in ((Y20, 0.05), (Y20, 0.1), (Profile.parse("bump:0.6,0.0,0.8,0.5+x:0.5"), 0.1)):
        t = float(np_spectrum_check(build_quadrature(perturb_surface(sphere, prof, e), 32), 1)[0])
        verdict.check(f"perturbed sphere eps={e}: top eigenvalue 1/2 +- 1e-3", abs(t - 0.5) <= 1e-3, f"top={t:.6f}")
    verdict.finish(8, "Neumann-Poincare spectrum")


def test_criterion_09_density_estimate(verdict, sphere):
    rep = run_expansion_study("density", sphere, Y20, EPS)
    verdict.check("h=Y20 slope >= 0.9", rep.verdict == "pass", f"slope={rep.slope:.3f} verdict={rep.verdict}")
    verdict.finish(9, "density stability estimate")


def test_criterion_10_determinism(verdict, tmp_path):
    argv = ["capacity", "--shape", "ellipsoid:2,1,0.5", "--resolution", "32", "--threads", "1"]
    paths = [tmp_path / f"run{k}.json" for k in range(2)]
    codes = [main(argv + ["--out", str(p)]) for p in paths]
    same = paths[0].read_bytes() == paths[1].read_bytes()
    verdict.check("repeated CLI runs are byte-identical", same and codes == [0, 0], f"exit codes {codes}")
    reps = [run(ExperimentConfig("capacity", shape="ellipsoid:2,1,0.5", resolution=[32], threads=t)) for t in (1, 2)]
    a, b = reps[0].results, reps[1].results
    rel = max(abs(a[k] - b[k]) / abs(a[k]) for k in ("capacity", "farfield_coefficient", "condition_estimate"))
    used = effective_threads(2)
    verdict.check(
        "threads 1 vs 2 agree to 1e-12 relative", rel <= 1e-12, f"max rel diff {rel:.1e} (2 requested, {used} usable)"
    )
    loaded = json.loads(paths[0].read_text())
    verdict.check("report carries no timings", "timings" not in loaded, "timings go to the sidecar file")
    verdict.finish(10, "determinism")
