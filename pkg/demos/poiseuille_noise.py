"""
How well does the clamped-parabola fit recover vmax and radius from a
25-sample profile with 5% noise?  Prints the hit rate and spread.
"""
import numpy as np

from hflow.flow import fit_poiseuille

vmax, radius, trials = 10e-3, 5.0, 2000
x = np.arange(25) - 12.0
clean = vmax * np.clip(1 - (x / radius) ** 2, 0, None)

rng = np.random.default_rng(1)
fits = [fit_poiseuille(clean + rng.normal(0, 0.05 * vmax, x.size)) for _ in range(trials)]
ev = np.array([f.vmax for f in fits]) / vmax - 1
er = np.array([f.radius_px for f in fits]) / radius - 1

for name, e in (("vmax", ev), ("radius", er)):
    print(f"{name:>6}: within 5% in {np.mean(np.abs(e) <= 0.05):.1%}, "
          f"bias {100 * e.mean():+.2f}%, std {100 * e.std():.2f}%")
