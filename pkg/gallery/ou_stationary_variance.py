"""Check the integrator against the Ornstein-Uhlenbeck process.

For ``du = -a u dt + dW`` with ``E dW^2 = q dt`` the stationary variance is
``q / (2a)``; with ``a = 2`` and ``q = 1`` that is ``0.25``.  The
semi-implicit scheme is exactly linear here, so the discrete variance is
also known in closed form and the script prints both.
"""
import numpy as np

from hydroldp import CovarianceSpec, IntegratorConfig, SigmaSpec, make_model, simulate_ensemble

a, dt, T, reps = 2.0, 1e-3, 10.0, 10_000
m = make_model("linear", 1, weights=a)
cov = CovarianceSpec([1.0])
s = SigmaSpec("additive", np.ones((1, 1)))
cfg = IntegratorConfig(dt=dt, eps=1.0, save_stride=int(round(T / dt)))

ens = simulate_ensemble(m, s, cov, cfg, [0.0], T, reps, seed=4)
x = ens.final[:, 0]
var = x.var(ddof=1)
se = np.sqrt(np.var((x - x.mean()) ** 2, ddof=1) / x.size)
r = 1 / (1 + a * dt)
discrete = dt * r**2 / (1 - r**2)

print(f"sample variance      {var:.5f} +- {se:.5f}")
print(f"continuous q/(2a)    {1 / (2 * a):.5f}")
print(f"discrete stationary  {discrete:.5f}")
