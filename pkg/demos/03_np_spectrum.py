"""The Neumann-Poincare operator K* and its top eigenvalue.

K* always has 1/2 as its largest eigenvalue, with the equilibrium charge as
eigenvector, whatever the shape.  On the sphere the whole spectrum is known:
1/(2(2l+1)) with multiplicity 2l+1.  We check both facts and then watch the
normalized eigenvector move under a deformation.

Run from the repository root:  python3 demos/03_np_spectrum.py
"""

import numpy as np

from capsense.geometry import Profile, build_quadrature, make_surface, perturb_surface, perturbation_field
from capsense.oracle import sphere_np_eigenvalue
from capsense.sensitivity import eigenvector_pairing, np_spectrum_check, spectrum_verdict
from capsense.solver import solve_equilibrium

sphere = make_surface("sphere", 1.0)

# %% Sphere: numerical eigenvalues against 1/(2(2l+1)).
vals = np_spectrum_check(build_quadrature(sphere, 32), 16)
ref = [sphere_np_eigenvalue(l) for l in range(4) for _ in range(2 * l + 1)]
print(" k   computed    exact")
for k, (v, r) in enumerate(zip(vals, ref)):
    print(f"{k:2d}   {v:.6f}   {r:.6f}")

# %% Other shapes: the top eigenvalue stays at 1/2, the rest stay inside.
shapes = {
    "ellipsoid(2,1,0.5)": make_surface("ellipsoid", 2.0, 1.0, 0.5),
    "sphere + 0.1 Y20": perturb_surface(sphere, Profile.harmonic(2, 0), 0.1),
    "sphere + 0.1 bump": perturb_surface(sphere, Profile.parse("bump:0.6,0,0.8,0.5+x:0.5"), 0.1),
}
print()
for name, surf in shapes.items():
    v = np_spectrum_check(build_quadrature(surf, 32), 6)
    sv = spectrum_verdict(v)
    print(f"{name:20s} top {sv['top']:.6f}  next {np.round(v[1:], 4)}  inside (-1/2,1/2): {sv['interior_ok']}")

# %% Inflating the sphere by eps rescales the normalized eigenvector by 1/(1+eps).
# Its projection on the old one moves by about eps * <tau h phi0, phi0> = -eps.
eq = solve_equilibrium(build_quadrature(sphere, 32))
fld = perturbation_field(eq.quadrature, Profile.constant(1.0))
print()
for eps in (0.02, 0.05, 0.1):
    lhs, rhs = eigenvector_pairing(eq, fld, eps)
    print(f"eps={eps:.2f}: measured shift {lhs:+.5f}   first-order prediction {rhs:+.5f}")
