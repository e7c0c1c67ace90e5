"""How the capacity, the surface charge and the far field respond to a bump.

A surface is pushed along its normal by eps * h.  The first-order terms
come from a single corrector solve on the unperturbed surface; here they
are compared with honest re-solves on the deformed surfaces, and the
remainders are shown to shrink like eps^2.

Run from the repository root:  python3 demos/02_shape_sensitivity.py
"""

import numpy as np

from capsense.geometry import Profile, build_quadrature, make_surface, perturbation_field
from capsense.oracle import fd_capacity_derivative
from capsense.sensitivity import capacity_first_order, run_expansion_study
from capsense.solver import solve_equilibrium

sphere = make_surface("sphere", 1.0)
ellipsoid = make_surface("ellipsoid", 2.0, 1.0, 0.5)
eq = solve_equilibrium(build_quadrature(ellipsoid, 32))

# %% The capacity derivative for a few profiles, checked by finite differences.
print("profile                         T1 (first order)   finite difference")
for text in ("const:1", "Y20", "z:0.5", "bump:2,0,0,0.4"):
    prof = Profile.parse(text)
    t1 = capacity_first_order(eq, perturbation_field(eq.quadrature, prof))
    fd = fd_capacity_derivative(ellipsoid, prof, 1e-2, resolution=32)
    print(f"{text:30s}  {t1:+.6f}          {fd:+.6f}")
print("(a positive profile always increases the capacity; the sign follows h)")

# %% Inflating the unit sphere by eps gives the ball of radius 1 + eps, whose
# capacity is exactly linear in eps: the remainder is only discretization noise.
rep = run_expansion_study("capacity", sphere, Profile.constant(1.0), [0.05, 0.1, 0.2], resolution=32)
print(f"\ninflated sphere: truth {np.round(rep.truth, 6)}  verdict {rep.verdict}")

# %% A quadrupole deformation of the sphere: every remainder is second order.
eps = [0.02, 0.04, 0.08]
print("\nY20 on the unit sphere, residual slopes over eps =", eps)
for kind in ("capacity", "current", "eigenvector", "density"):
    rep = run_expansion_study(kind, sphere, Profile.harmonic(2, 0), eps, resolution=32)
    res = ", ".join(f"{r:.2e}" for r in rep.residuals)
    print(f"  {kind:12s} residuals [{res}]  slope {rep.slope:.2f}  ({rep.verdict})")
print("  (density is the zeroth-order stability estimate, so its slope is about 1)")

# %% Far field of a deformed ellipsoid, 100 units away.
rep = run_expansion_study("farfield", ellipsoid, Profile.harmonic(2, 0), eps, resolution=32, radius=100.0)
for e, r, b in zip(eps, rep.residuals, rep.extra["bound"]):
    print(f"far field eps={e:.2f}: error {r:.2e}  allowed {b:.2e}")
