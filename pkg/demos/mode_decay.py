"""Energy of single Fourier modes of the linearized system for several |k| and eps."""
import numpy as np

from vpblab import kinetic, spectral

grid = kinetic.build_velocity_grid(12, 6.0)
op = kinetic.assemble_linearized(kinetic.PotentialModel(1.0), grid, kinetic.build_angular_quadrature())
profile = spectral.ball_profile(grid, "thermal", 1.0)
t = np.array([0.0, 1.0, 5.0, 20.0, 100.0])

print("  eps     |k|  " + "  ".join(f"E(t={s:g})".rjust(11) for s in t))
for eps in (1.0, 0.5, 0.25):
    factory = spectral.mode_factory(op, grid, eps)
    for kmag in (0.01, 0.1, 1.0, 4.0):
        mop = factory(kmag)
        _, E = spectral.evolve_mode(mop, mop.reduce(profile(0.0)), t, return_energy=True)
        print(f"{eps:5.2f} {kmag:7.2f}  " + "  ".join(f"{e:11.4e}" for e in E))

# whole-space norms and their fitted decay exponents
kgrid = spectral.radial_k_grid(1e-3, 8.0, 32)
t = np.linspace(0.0, 300.0, 301)
series = spectral.synthesize_whole_space_norms(kgrid, profile, spectral.mode_factory(op, grid, 1.0), t)
for key, ser in series.items():
    fit = spectral.fit_decay_exponent(ser.sqrt(), (20.0, 300.0))
    print(f"{key:8s} ~ (1+t)^{fit.exponent:.3f}")
