"""Kinetic BGK runs at shrinking eps against the incompressible NSFP reference."""
import math

import numpy as np

from vpblab import diagnostics, kinetic, nsfp, solver

vg = kinetic.build_velocity_grid(12, 6.0)
sg = solver.SpatialGrid(16)
bgk = kinetic.BGKOperator(vg, 1.0)
coef = nsfp.compute_transport_coefficients(bgk, vg)

x = sg.points
A = 0.1
u0 = np.zeros((3,) + sg.shape)
u0[1] = A * np.sin(x)
u0[2] = A * np.cos(2 * x)
fs0 = nsfp.fluid_state(sg, u0, rho0=A * np.cos(x), theta0=0.5 * A * np.sin(2 * x))

t_end, interval = 0.5, 0.0625
frun = nsfp.nsfp_run(fs0, coef, 1 / 256, t_end, record_every=16)
f0 = solver.macro_initial(sg, vg, fs0.rho, np.moveaxis(fs0.u, 0, -1), fs0.theta)

runs = {}
for eps in (0.5, 0.25, 0.125):
    # dt ~ eps^3 so the splitting error stays below the O(eps) modelling error
    n = max(1, math.ceil(interval / (0.5 * eps ** 3)))
    conf = solver.SolverConfig(interval / n, t_end, record_every=n)
    runs[eps] = solver.run_scenario(solver.make_state(sg, vg, f0, eps), conf,
                                    solver.Operators(bgk), keep_states=True)

table, order = diagnostics.hydro_limit_error(runs, frun)
for eps in sorted(table):
    row = table[eps]
    print(f"eps {eps:5.3f}: rho {row['rho']:.4f}  u {row['u']:.4f}  theta {row['theta']:.4f}"
          f"  grad phi {row['grad_phi']:.4f}  total {row['total']:.4f}")
print(f"fitted order {order:.3f}")
