"""Nonlinear VPB run with the bgk surrogate: conserved sums and energy dissipation."""
import numpy as np

from vpblab import kinetic, solver

vg = kinetic.build_velocity_grid(12, 6.0)
sg = solver.SpatialGrid(32)
x = sg.points
u = np.zeros(sg.shape + (3,))
u[..., 1] = 0.05 * np.sin(x)
f0 = solver.macro_initial(sg, vg, rho=0.05 * np.cos(x), u=u)

for eps in (0.5, 0.25):
    st = solver.make_state(sg, vg, f0, eps)
    run = solver.run_scenario(st, solver.SolverConfig(0.01, 2.0, record_every=50),
                              solver.Operators(kinetic.BGKOperator(vg, 1.0)))
    rep = solver.conservation_report(run)
    print(f"eps {eps}")
    print("      t    mass        momentum_2    f_norm2+field  micro_norm2")
    E = run.series("f_norm2") + run.series("field_energy")
    for r, e in zip(run.records, E):
        print(f"  {r['t']:5.2f}  {r['mass']:+.3e}  {r['momentum_2']:+.3e}  {e:.6e}   {r['micro_norm2']:.3e}")
    print(f"  mass drift rate {rep['mass_drift_rate']:.1e}, max Poisson residual "
          f"{run.max_poisson_residual:.1e}, integrated micro part {run.micro_integral:.3e}")
