"""Deterministic controlled ("skeleton") equation and small-noise scans.

The skeleton ``u_h' + A u_h + B(u_h) + R~(t, u_h) = sigma(t, u_h) h(t)`` is
integrated with the stochastic scheme of :mod:`hydroldp.galerkin` with the
noise switched off, so a minimum-action control and a Monte Carlo path see
exactly the same discrete dynamics.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Trajectory, _x_norm2
from .galerkin import IntegratorConfig, simulate, simulate_ensemble, with_eps
from .models import Model
from .noise import ControlPath, CovarianceSpec, SigmaSpec, control_energy


def solve_skeleton(
    m: Model,
    s: SigmaSpec,
    cov: CovarianceSpec,
    cfg: IntegratorConfig,
    xi,
    T: float,
    h: ControlPath | None = None,
) -> Trajectory:
    """Path of the skeleton equation driven by ``h`` (``None`` means ``h = 0``)."""
    if h is not None:
        e = control_energy(cov, h)
        if not np.isfinite(e.energy):
            raise ValueError("control has infinite energy")
        if not e.in_SM:
            raise ValueError(f"control energy {e.energy:.6g} exceeds the budget {h.budget}")
    traj = simulate(m, s, cov, with_eps(cfg, 0.0), xi, T, h=h)
    traj.meta["skeleton"] = True
    return traj


@dataclass(frozen=True)
class WeakScanRow:
    eps: float
    mean_x_distance: float
    std_error: float


@dataclass(frozen=True)
class WeakScan:
    rows: list
    fitted_order: float

    def table(self):
        return [(r.eps, r.mean_x_distance, r.std_error) for r in self.rows]


def fit_loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x`` over positive entries."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    ok = (x > 0) & (y > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def weak_convergence_scan(
    m: Model,
    s: SigmaSpec,
    cov: CovarianceSpec,
    xi,
    T: float,
    h: ControlPath | None,
    eps_list,
    n_reps: int,
    seed: int,
    cfg: IntegratorConfig | None = None,
) -> WeakScan:
    """Mean path-space distance between noisy controlled paths and the skeleton.

    For every ``eps`` an ensemble of the controlled equation with noise
    ``sqrt(eps) sigma dW`` is compared replicate by replicate to the skeleton
    path in the norm ``(sup |u|^2 + int ||u||^2)^(1/2)``.  The fitted order is
    the log-log slope of the mean distance against ``eps``.
    """
    eps_list = [float(e) for e in eps_list]
    if any(e < 0 for e in eps_list):
        raise ValueError("eps values must be nonnegative")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly decreasing")
    cfg = cfg or IntegratorConfig()
    cfg = IntegratorConfig(cfg.dt, 0.0, cfg.blowup_cap, 1)
    g = m.gelfand()
    skel = solve_skeleton(m, s, cov, cfg, xi, T, h)
    rows = []
    for eps in eps_list:
        ens = simulate_ensemble(m, s, cov, with_eps(cfg, eps), xi, T, n_reps, seed, h=h, on_blowup="raise")
        d = np.sqrt(_x_norm2(ens.times, ens.states - skel.states, g))
        se = float(np.std(d, ddof=1) / np.sqrt(d.size)) if d.size > 1 else 0.0
        rows.append(WeakScanRow(eps, float(np.mean(d)), se))
    order = fit_loglog_slope([r.eps for r in rows], [r.mean_x_distance for r in rows])
    return WeakScan(rows, order)
