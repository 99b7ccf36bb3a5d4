"""Rate function by discrete minimum action, and Monte Carlo tail estimates.

For a terminal event ``F`` the rate is evaluated as

    I*(F) = inf { 1/2 int_0^T |h(s)|_0^2 ds : u_h(T) in F }

over piecewise-constant controls, where ``u_h`` is the discrete skeleton
path.  The endpoint constraint is handled by a quadratic penalty ``mu P(u_h(T))``
with ``mu`` increased stage by stage; the gradient of the penalized objective
is the exact adjoint of the discrete scheme.

Importance sampling uses the controlled equation

    du + [Au + B(u) + R~] dt = sigma h dt + sqrt(eps) sigma dW

whose law, reweighted by the Girsanov density of the shift ``h / sqrt(eps)``,
is the law of the uncontrolled equation with noise ``sqrt(eps) sigma dW``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .galerkin import IntegratorConfig, _drift_free_rhs, iter_ensemble_chunks, with_eps
from .models import Model, pairing
from .noise import ControlPath, CovarianceSpec, SigmaSpec, control_energy


class ConvergenceError(RuntimeError):
    """Raised by callers that require a converged minimizer."""


@dataclass(frozen=True)
class Event:
    """Terminal event for ``u(T)``.

    ``halfspace``  ``<u, direction> >= threshold``
    ``point``      ``u = target`` (Monte Carlo uses the ball of ``radius``)
    ``free``       the whole space
    """

    kind: str
    direction: np.ndarray | None = None
    threshold: float = 0.0
    target: np.ndarray | None = None
    radius: float = 0.0

    def __post_init__(self):
        if self.kind not in ("halfspace", "point", "free"):
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.kind == "halfspace" and self.direction is None:
            raise ValueError("halfspace event needs a direction")
        if self.kind == "point" and self.target is None:
            raise ValueError("point event needs a target")

    @classmethod
    def halfspace(cls, direction, threshold):
        return cls("halfspace", direction=np.asarray(direction), threshold=float(threshold))

    @classmethod
    def point(cls, target, radius=0.0):
        return cls("point", target=np.asarray(target), radius=float(radius))

    @property
    def scale(self) -> float:
        if self.kind == "halfspace":
            return max(1.0, abs(self.threshold))
        if self.kind == "point":
            return max(1.0, float(np.linalg.norm(self.target)))
        return 1.0

    def observable(self, u):
        return pairing(u, self.direction)

    def indicator(self, u) -> np.ndarray:
        u = np.asarray(u)
        if self.kind == "halfspace":
            return self.observable(u) >= self.threshold
        if self.kind == "point":
            return np.sqrt(np.sum(np.abs(u - self.target) ** 2, axis=-1)) <= self.radius
        return np.ones(u.shape[:-1], dtype=bool)

    def penalty(self, u) -> float:
        if self.kind == "halfspace":
            return max(0.0, self.threshold - float(self.observable(u))) ** 2
        if self.kind == "point":
            return float(np.sum(np.abs(u - self.target) ** 2))
        return 0.0

    def penalty_grad(self, u) -> np.ndarray:
        if self.kind == "halfspace":
            gap = max(0.0, self.threshold - float(self.observable(u)))
            return -2.0 * gap * self.direction
        if self.kind == "point":
            return 2.0 * (u - self.target)
        return np.zeros_like(u)

    def violation(self, u) -> float:
        if self.kind == "halfspace":
            return max(0.0, self.threshold - float(self.observable(u)))
        if self.kind == "point":
            return float(np.sqrt(np.sum(np.abs(u - self.target) ** 2)))
        return 0.0


def _require_ldp_sigma(s: SigmaSpec):
    if s.K2 > 0 or s.L2 > 0:
        raise ValueError(
            f"large-deviation operations need a noise intensity with K2 = L2 = 0 (got K2={s.K2}, L2={s.L2})"
        )


@dataclass
class ActionProblem:
    """Minimum-action problem for reaching ``event`` at time ``T`` from ``xi``."""

    model: Model
    sigma: SigmaSpec
    cov: CovarianceSpec
    xi: np.ndarray
    T: float
    event: Event
    dt: float = 1e-3
    n_cells: int = 32
    mu_schedule: tuple = (10.0, 100.0, 1e3, 1e4)
    max_iter: int = 2000
    gtol: float = 1e-10
    violation_tol: float = 1e-3
    restarts: int = 1
    seed: int = 0
    blowup_cap: float = 1e6

    def __post_init__(self):
        _require_ldp_sigma(self.sigma)
        mu = tuple(float(x) for x in self.mu_schedule)
        if not mu or any(b <= a for a, b in zip(mu, mu[1:])) or mu[0] < 0:
            raise ValueError("mu_schedule must be nonnegative and strictly increasing")
        self.mu_schedule = mu
        self.xi = np.asarray(self.xi, dtype=self.model.dtype)
        self.model.check_state(self.xi)
        n_steps = self.cfg.n_steps(self.T)
        if not 1 <= self.n_cells <= n_steps:
            raise ValueError(f"n_cells must lie in [1, {n_steps}] (the number of integrator steps)")
        # cell edges snapped to integrator steps; widths differ by at most one step
        self._edges = np.round(np.linspace(0, n_steps, self.n_cells + 1)).astype(int)
        self._cell_of_step = np.searchsorted(self._edges, np.arange(n_steps), side="right") - 1

    @property
    def cfg(self) -> IntegratorConfig:
        return IntegratorConfig(self.dt, 0.0, self.blowup_cap, 1)

    @property
    def n_steps(self) -> int:
        return self.cfg.n_steps(self.T)

    @property
    def cell_widths(self) -> np.ndarray:
        return np.diff(self._edges) * self.dt

    @property
    def grid(self) -> np.ndarray:
        return self._edges * self.dt

    def control(self, values) -> ControlPath:
        return ControlPath(self.grid, np.asarray(values, dtype=float).reshape(self.n_cells, self.cov.K))


def action(cov: CovarianceSpec, h: ControlPath) -> float:
    """``1/2 int_0^T |h(s)|_0^2 ds``."""
    return 0.5 * control_energy(cov, h).energy


def _forward(p: ActionProblem, hv: np.ndarray) -> np.ndarray:
    m, s = p.model, p.sigma
    dt, N = p.dt, p.n_steps
    cell = p._cell_of_step
    denom = 1.0 + dt * m.weights
    u = np.empty((N + 1, m.n), dtype=m.dtype)
    u[0] = p.xi
    for k in range(N):
        u[k + 1] = _drift_free_rhs(m, s, dt, 0.0, k * dt, u[k], None, hv[cell[k]]) / denom
        if not np.sum(np.abs(u[k + 1]) ** 2) <= p.blowup_cap**2:
            from .galerkin import BlowUpError

            raise BlowUpError((k + 1) * dt, float(np.linalg.norm(u[k + 1])), k + 1)
    return u


def _objective(p: ActionProblem, hv: np.ndarray, mu: float, with_grad=True):
    m, s, q = p.model, p.sigma, p.cov.q
    dt, N = p.dt, p.n_steps
    w = p.cell_widths[:, None]
    u = _forward(p, hv)
    act = 0.5 * float(np.sum(hv**2 / q * w))
    J = act + mu * p.event.penalty(u[-1])
    if not with_grad:
        return J, act, u, None
    grad = hv * w / q
    if mu == 0 or p.event.kind == "free":
        return J, act, u, grad
    denom = 1.0 + dt * m.weights
    lam = mu * p.event.penalty_grad(u[-1])
    for k in range(N - 1, -1, -1):
        t, uk, c = k * dt, u[k], p._cell_of_step[k]
        lt = lam / denom
        grad[c] += dt * s.apply_transpose(t, uk, lt)
        back = lt - dt * (m.apply_B_adjoint_first(uk, lt) - m.apply_B(uk, lt)) - dt * m.r_tilde.apply_adjoint(t, lt)
        if s.state_dependent:
            back = back + s.state_derivative_adjoint(t, uk, dt * hv[c], lt)
        lam = back
    return J, act, u, grad


def penalized_objective(p: ActionProblem, h: ControlPath, mu: float) -> float:
    """``action(h) + mu * penalty(u_h(T))``."""
    return _objective(p, h.values, mu, with_grad=False)[0]


def discrete_adjoint_gradient(p: ActionProblem, h: ControlPath, mu: float | None = None) -> np.ndarray:
    """Gradient of the penalized objective with respect to every control value.

    Returns an array shaped like ``h.values`` (cells by ``H_0`` coordinates).
    ``mu`` defaults to the last value of the penalty schedule.
    """
    if h.n_cells != p.n_cells or h.K != p.cov.K:
        raise ValueError("control does not match the problem's control grid")
    mu = p.mu_schedule[-1] if mu is None else mu
    return _objective(p, h.values, mu)[3]


@dataclass
class MinimizerResult:
    h_star: ControlPath
    action_value: float
    constraint_violation: float
    iterations: int
    converged: bool
    objective: float
    terminal_state: np.ndarray
    stages: list = field(default_factory=list)
    message: str = ""


def feasible_action(p: ActionProblem, hv: np.ndarray) -> float:
    """Action of the smallest rescaling ``c h`` that reaches a halfspace event.

    Gives an upper bound on the rate from any stage of the continuation.
    Returns NaN for other event kinds or when no rescaling up to ``2^20``
    reaches the event.
    """
    ev = p.event
    if ev.kind == "free":
        return 0.0
    if ev.kind != "halfspace":
        return float("nan")
    act = 0.5 * float(np.sum(hv**2 / p.cov.q * p.cell_widths[:, None]))

    def gap(c):
        return float(ev.observable(_forward(p, c * hv)[-1])) - ev.threshold

    if gap(0.0) >= 0:
        return 0.0
    hi = 1.0
    while gap(hi) < 0:
        hi *= 2.0
        if hi > 2.0**20:
            return float("nan")
    c = optimize.brentq(gap, 0.0, hi, xtol=1e-14, rtol=1e-14)
    return c * c * act


def _run_continuation(p: ActionProblem, x0: np.ndarray):
    scale = np.sqrt(p.cov.q / p.cell_widths[:, None])  # h = x * scale makes the action 1/2 |x|^2
    x = x0.copy()
    stages, iters = [], 0
    msg = ""
    for mu in p.mu_schedule:

        def fun(xflat):
            hv = xflat.reshape(p.n_cells, p.cov.K) * scale
            J, _, _, grad = _objective(p, hv, mu)
            return J, (grad * scale).ravel()

        res = optimize.minimize(
            fun, x.ravel(), jac=True, method="L-BFGS-B",
            options=dict(maxiter=p.max_iter, gtol=p.gtol, ftol=1e-15, maxcor=20),
        )
        x = res.x.reshape(p.n_cells, p.cov.K)
        iters += int(res.nit)
        msg = str(res.message)
        J, act, u, _ = _objective(p, x * scale, mu, with_grad=False)
        stages.append(
            dict(mu=mu, objective=J, action=act, violation=p.event.violation(u[-1]), iterations=int(res.nit), x=x.copy())
        )
    return scale, stages, iters, msg


def minimize_action(p: ActionProblem) -> MinimizerResult:
    """Penalty-continuation minimum action with one seeded random restart.

    Each stage minimizes ``action + mu P(u_h(T))`` by L-BFGS on the
    whitened control ``x = h / sqrt(q / cell_width)``, warm-started from the
    previous stage.  The returned control is the run with the lowest final
    penalized objective; ``converged`` is true when its constraint violation
    is below ``violation_tol`` (relative to the event scale).
    """
    starts = [np.zeros((p.n_cells, p.cov.K))]
    rng = np.random.default_rng(p.seed)
    for _ in range(p.restarts):
        starts.append(0.1 * rng.standard_normal((p.n_cells, p.cov.K)))
    best = None
    total_iters = 0
    for x0 in starts:
        scale, stages, iters, msg = _run_continuation(p, x0)
        total_iters += iters
        if best is None or stages[-1]["objective"] < best[1][-1]["objective"]:
            best = (scale, stages, msg)
    scale, stages, msg = best
    hv = stages[-1]["x"] * scale
    for st in stages:
        st["feasible_action"] = feasible_action(p, st.pop("x") * scale)
    h = p.control(hv)
    J, act, u, _ = _objective(p, hv, p.mu_schedule[-1], with_grad=False)
    viol = p.event.violation(u[-1])
    converged = viol <= p.violation_tol * p.event.scale
    if not converged:
        warnings.warn(f"minimum action did not reach the event: violation {viol:.3e}", RuntimeWarning)
    return MinimizerResult(h, act, viol, total_iters, bool(converged), J, u[-1], stages, msg)


def girsanov_weight(cov: CovarianceSpec, h, noise, dt: float, log: bool = False):
    """Likelihood ratio ``exp(-sum (h_k, dW_k)_0 - 1/2 sum |h_k|_0^2 dt)``.

    ``h`` is a :class:`ControlPath` aligned with the integrator grid or an
    array of per-step values; ``noise`` holds increments of shape
    ``(..., n_steps, K)``.
    """
    noise = np.asarray(noise, dtype=float)
    n_steps = noise.shape[-2]
    if isinstance(h, ControlPath):
        if not h.is_aligned(dt):
            raise ValueError("control grid is not aligned with the noise record")
        hs = h.on_steps(dt, n_steps)
    else:
        hs = np.asarray(h, dtype=float)
        if hs.shape != noise.shape[-2:]:
            raise ValueError(f"control steps {hs.shape} do not match noise record {noise.shape[-2:]}")
    if noise.shape[-1] != cov.K:
        raise ValueError("noise record has the wrong number of modes")
    lw = -np.sum(hs / cov.q * noise, axis=(-2, -1)) - 0.5 * dt * float(np.sum(hs**2 / cov.q))
    return lw if log else np.exp(lw)


@dataclass(frozen=True)
class MCResult:
    p_hat: float
    std_err: float
    n_hits: int
    n_samples: int
    eps: float
    tilted: bool
    upper_bound: float | None = None
    effective_hits: float = 0.0


def mc_probability(
    p: ActionProblem,
    eps: float,
    n_samples: int,
    tilt: ControlPath | None = None,
    seed: int = 0,
    workers: int | None = None,
) -> MCResult:
    """Estimate ``P(u^eps(T) in F)`` by plain or Girsanov-tilted Monte Carlo.

    With ``tilt = h`` each replicate solves the controlled equation with drift
    ``sigma h`` and noise ``sqrt(eps) sigma dW`` and carries the weight of the
    shift ``h / sqrt(eps)``.  With no hit, ``p_hat = 0`` and ``upper_bound``
    is the one-sided 95% Clopper-Pearson bound ``1 - 0.05^(1/n)``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    n_steps = p.n_steps
    cfg = IntegratorConfig(p.dt, eps, p.blowup_cap, n_steps)
    tilted = tilt is not None
    if tilted:
        scaled = tilt.scaled(1.0 / np.sqrt(eps))
    vals, hits = [], 0
    for part in iter_ensemble_chunks(
        p.model, p.sigma, p.cov, cfg, p.xi, p.T, n_samples, seed, h=tilt,
        record_noise=tilted, on_blowup="flag", workers=workers,
    ):
        ind = p.event.indicator(part.final) & ~part.blown
        hits += int(np.sum(ind))
        if tilted:
            w = girsanov_weight(p.cov, scaled, part.noise, p.dt)
            vals.append(np.where(ind, w, 0.0))
        else:
            vals.append(ind.astype(float))
    x = np.concatenate(vals)
    s2 = float(np.sum(x**2))
    # Kish effective sample size of the weighted hits
    ess = float(np.sum(x) ** 2 / s2) if s2 > 0 else 0.0
    p_hat = float(np.mean(x))
    se = float(np.std(x, ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0
    upper = None
    if hits == 0:
        upper = float(1.0 - 0.05 ** (1.0 / n_samples))
        warnings.warn(f"no hits in {n_samples} samples at eps={eps}; p < {upper:.3e} (95%)", RuntimeWarning)
    return MCResult(p_hat, se, hits, n_samples, float(eps), tilted, upper, ess)


@dataclass(frozen=True)
class RateRow:
    eps: float
    p_hat: float
    std_err: float
    n_hits: int
    effective_hits: float
    neg_eps_log_p: float
    I_star: float
    censored: bool


@dataclass(frozen=True)
class RateScan:
    rows: list
    I_star: float
    extrapolated_rate: float

    def table(self):
        return [(r.eps, r.p_hat, r.std_err, r.n_hits, r.effective_hits, r.neg_eps_log_p, r.I_star, r.censored) for r in self.rows]


def rate_scan(
    p: ActionProblem,
    eps_list,
    n_samples: int,
    seed: int = 0,
    minimizer: MinimizerResult | None = None,
    tilt: str | ControlPath | None = "auto",
    workers: int | None = None,
) -> RateScan:
    """Compare ``-eps log P(u^eps(T) in F)`` with the minimized action.

    ``tilt='auto'`` samples around the minimizing control; ``None`` uses
    plain Monte Carlo.  Rows without hits are censored: their rate column is
    ``-eps log`` of the zero-hit upper bound, a lower bound on the rate.
    ``extrapolated_rate`` is the intercept of a linear fit of the uncensored
    rates against ``eps``.
    """
    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly decreasing")
    if minimizer is None:
        minimizer = minimize_action(p)
    I_star = minimizer.action_value
    if isinstance(tilt, str):
        if tilt != "auto":
            raise ValueError("tilt must be 'auto', None or a ControlPath")
        tilt = minimizer.h_star
    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for i, eps in enumerate(eps_list):
            r = mc_probability(p, eps, n_samples, tilt=tilt, seed=seed + i, workers=workers)
            censored = r.n_hits == 0
            pv = r.upper_bound if censored else r.p_hat
            rate = -eps * np.log(pv) if pv > 0 else np.inf
            rows.append(RateRow(eps, r.p_hat, r.std_err, r.n_hits, r.effective_hits, float(rate), I_star, censored))
    ok = [r for r in rows if not r.censored and np.isfinite(r.neg_eps_log_p)]
    if len(ok) >= 2:
        extrap = float(np.polyfit([r.eps for r in ok], [r.neg_eps_log_p for r in ok], 1)[1])
    else:
        extrap = float("nan")
    return RateScan(rows, I_star, extrap)


def skeleton_config(p: ActionProblem) -> IntegratorConfig:
    return with_eps(p.cfg, 0.0)
