"""Rate function and tail probabilities of a linear Gaussian model.

The terminal value ``u(T)`` of ``du = -u dt + sqrt(eps) dW`` is Gaussian,
so ``P(u(T) >= z)`` is an explicit normal tail.  The script compares the
minimum action with ``z^2 / (2 G)`` and plain and tilted Monte Carlo with
the exact probability as ``eps`` shrinks.
"""
import warnings

import numpy as np
from scipy.stats import norm

from hydroldp import ActionProblem, CovarianceSpec, Event, SigmaSpec, make_model, mc_probability, minimize_action

z, dt = 0.5, 1e-3
p = ActionProblem(
    make_model("linear", 1, weights=1.0), SigmaSpec("additive", np.ones((1, 1))), CovarianceSpec([1.0]),
    [0.0], 1.0, Event.halfspace([1.0], z), dt=dt,
)
res = minimize_action(p)
G = (1 - np.exp(-2.0)) / 2
print(f"I* = {res.action_value:.6f}   closed form {z * z / (2 * G):.6f}")

# variance of the discrete terminal value
r = 1 / (1 + dt)
Gd = dt * np.sum(r ** (2 * np.arange(1, 1001)))
print(f"{'eps':>6} {'exact p':>11} {'plain':>11} {'tilted':>11} {'-eps log p':>10}")
with warnings.catch_warnings():
    warnings.simplefilter("ignore", RuntimeWarning)
    for i, eps in enumerate([0.2, 0.1, 0.05, 0.02]):
        exact = norm.sf(z / np.sqrt(eps * Gd))
        plain = mc_probability(p, eps, 5000, seed=10 + i)
        tilted = mc_probability(p, eps, 5000, tilt=res.h_star, seed=20 + i)
        print(f"{eps:6.3f} {exact:11.3e} {plain.p_hat:11.3e} {tilted.p_hat:11.3e} {-eps * np.log(exact):10.4f}")
