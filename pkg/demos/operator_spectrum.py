"""Linearized hard-sphere operator: null space, spectral gap and transport coefficients."""
import numpy as np

from vpblab import kinetic, nsfp

ang = kinetic.build_angular_quadrature()
for n, r in ((12, 6.0), (16, 8.0)):
    grid = kinetic.build_velocity_grid(n, r)
    op = kinetic.assemble_linearized(kinetic.PotentialModel(1.0), grid, ang, compute_gap=True)
    kdim, ev = kinetic.kernel_dimension(op)
    c = nsfp.compute_transport_coefficients(op, grid)
    print(f"grid ({n}, {r}): {grid.size} nodes")
    print(f"  symmetry defect {op.defects['symmetry']:.2e}, kernel dimension {kdim}")
    print(f"  lowest eigenvalues {np.array2string(ev[:7], precision=4)}")
    print(f"  sigma0 {op.sigma0_estimate:.4f}, viscosity {c.lam:.4f}, conductivity {c.kappa:.4f}")

# the BGK surrogate has lam = kappa = 1/nu0 exactly
grid = kinetic.build_velocity_grid(20, 8.0)
c = nsfp.compute_transport_coefficients(kinetic.BGKOperator(grid, 2.0), grid)
print(f"bgk nu0 = 2: lam {c.lam:.10f}, kappa {c.kappa:.10f}")
