"""Galerkin time integration of the controlled stochastic equation

    du + [A u + B(u,u) + R~(t,u)] dt = sigma(t,u) h(t) dt + sqrt(eps) sigma(t,u) dW

with a scheme implicit in ``A`` (a diagonal solve), explicit in ``B`` and
``R~``, and Euler-Maruyama in the noise::

    (1 + dt a_k) u+_k = [u + dt(-B(u,u) - R~(t,u) + sigma h) + sqrt(eps) sigma dW]_k

Noise and control are frozen at the left endpoint of each step.

Ensembles advance a block of replicates at once.  Replicate ``i`` draws its
increments from ``SeedSequence(seed, spawn_key=(i,))``, so a path depends on
``(inputs, seed, i)`` only and not on how replicates are grouped.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import GelfandTriple, Trajectory
from .models import Model, pairing
from .noise import ControlPath, CovarianceSpec, SigmaSpec, lq_norm

NOISE_BLOCK = 256
WORKERS_ENV = "HYDROLDP_WORKERS"


class BlowUpError(RuntimeError):
    """The state left the ball ``|u| <= blowup_cap``."""

    def __init__(self, t: float, norm: float, step: int | None = None, replicate: int | None = None):
        where = f" at step {step}" if step is not None else ""
        who = f" (replicate {replicate})" if replicate is not None else ""
        super().__init__(f"blow-up{where}{who}: |u| = {norm:.3e} at t = {t:.6g}")
        self.t, self.norm, self.step, self.replicate = t, norm, step, replicate


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 1e-3
    eps: float = 0.0
    blowup_cap: float = 1e6
    save_stride: int = 1
    scheme: str = "semi_implicit"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.eps >= 0:
            raise ValueError("eps must be nonnegative")
        if not self.blowup_cap > 0:
            raise ValueError("blowup_cap must be positive")
        if int(self.save_stride) < 1:
            raise ValueError("save_stride must be >= 1")
        if self.scheme != "semi_implicit":
            raise ValueError("only the semi_implicit scheme is available")

    def n_steps(self, T: float) -> int:
        n = int(round(T / self.dt))
        if n < 1 or abs(n * self.dt - T) > 1e-9 * max(1.0, T):
            raise ValueError(f"T = {T} is not a positive multiple of dt = {self.dt}")
        return n


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for replicate ``index`` of an ensemble seeded by ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index),)))


def _drift_free_rhs(m: Model, s: SigmaSpec, dt: float, eps: float, t: float, u, dW, h_t):
    forcing = None
    if h_t is not None:
        forcing = dt * h_t
    if dW is not None and eps > 0:
        noise = np.sqrt(eps) * dW
        forcing = noise if forcing is None else forcing + noise
    rhs = u - dt * (m.apply_B(u, u) + m.apply_R(t, u))
    if forcing is not None:
        rhs = rhs + s.apply(t, u, forcing)
    return rhs


def step(m: Model, s: SigmaSpec, cov: CovarianceSpec, cfg: IntegratorConfig, t: float, u, dW=None, h_t=None) -> np.ndarray:
    """One semi-implicit step; ``u`` may carry leading batch axes."""
    u = m.check_state(u)
    if not np.max(np.sum(np.abs(u) ** 2, axis=-1)) <= cfg.blowup_cap**2:
        raise ValueError("input state already exceeds blowup_cap")
    rhs = _drift_free_rhs(m, s, cfg.dt, cfg.eps, t, u, dW, h_t)
    u_new = rhs / (1.0 + cfg.dt * m.weights)
    norm = np.sqrt(np.max(np.sum(np.abs(u_new) ** 2, axis=-1)))
    if not norm <= cfg.blowup_cap:
        raise BlowUpError(t + cfg.dt, float(norm))
    return u_new


@dataclass
class Ensemble:
    """Stacked replicate paths on a common saved grid.

    ``states`` has shape ``(n_reps, n_saved, n)``; ``noise`` (if recorded)
    has shape ``(n_reps, n_steps, K)``.  ``blown`` flags replicates that hit
    the blow-up cap; their state is frozen at the last admissible value.
    """

    times: np.ndarray
    states: np.ndarray
    indices: np.ndarray
    blown: np.ndarray
    seed: int | None
    dt: float
    noise: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.states.shape[0]

    @property
    def final(self) -> np.ndarray:
        return self.states[:, -1]

    def trajectory(self, i: int) -> Trajectory:
        noise = None if self.noise is None else self.noise[i]
        meta = dict(self.meta, replicate=int(self.indices[i]))
        return Trajectory(self.times, self.states[i], self.seed, meta, noise, self.dt)

    @classmethod
    def concatenate(cls, parts: Sequence["Ensemble"]) -> "Ensemble":
        first = parts[0]
        noise = None if first.noise is None else np.concatenate([p.noise for p in parts])
        return cls(
            first.times,
            np.concatenate([p.states for p in parts]),
            np.concatenate([p.indices for p in parts]),
            np.concatenate([p.blown for p in parts]),
            first.seed,
            first.dt,
            noise,
            dict(first.meta),
        )


def _integrate(m, s, cov, cfg, xi, T, h, seed, indices, record_noise=False, on_blowup="raise"):
    if s.n != m.n:
        raise ValueError(f"sigma has {s.n} rows but the model has {m.n} modes")
    if s.K != cov.K:
        raise ValueError(f"sigma has {s.K} columns but the covariance has {cov.K} modes")
    n_steps = cfg.n_steps(T)
    dt, eps = cfg.dt, cfg.eps
    stride = int(cfg.save_stride)
    save_idx = list(range(0, n_steps + 1, stride))
    if save_idx[-1] != n_steps:
        save_idx.append(n_steps)
    R = len(indices)
    u = np.array(np.broadcast_to(m.check_state(np.asarray(xi, dtype=m.dtype)), (R, m.n)))
    h_steps = None
    if h is not None:
        if h.K != cov.K:
            raise ValueError(f"control has {h.K} coordinates, covariance has {cov.K}")
        h_steps = h.on_steps(dt, n_steps)
    stochastic = eps > 0
    if stochastic and seed is None:
        raise ValueError("a seed is required when eps > 0")
    rngs = [replicate_rng(seed, i) for i in indices] if stochastic else []
    sqrt_qdt = np.sqrt(cov.q * dt)
    noise_rec = np.zeros((R, n_steps, cov.K)) if (record_noise and stochastic) else None
    states = np.empty((R, len(save_idx), m.n), dtype=m.dtype)
    states[:, 0] = u
    next_save = 1
    blown = np.zeros(R, dtype=bool)
    denom = 1.0 + dt * m.weights
    block = None
    for k in range(n_steps):
        t = k * dt
        dW = None
        if stochastic:
            j = k % NOISE_BLOCK
            if j == 0:
                nb = min(NOISE_BLOCK, n_steps - k)
                block = np.stack([rng.standard_normal((nb, cov.K)) for rng in rngs], axis=1) * sqrt_qdt
                if noise_rec is not None:
                    noise_rec[:, k : k + nb] = np.swapaxes(block, 0, 1)
            dW = block[j]
        h_t = None if h_steps is None else h_steps[k]
        u_new = _drift_free_rhs(m, s, dt, eps, t, u, dW, h_t) / denom
        norm2 = np.sum(np.abs(u_new) ** 2, axis=-1)
        bad = ~(norm2 <= cfg.blowup_cap**2)
        if np.any(bad & ~blown):
            if on_blowup == "raise":
                r = int(np.flatnonzero(bad & ~blown)[0])
                raise BlowUpError(t + dt, float(np.sqrt(norm2[r])), k + 1, int(indices[r]))
            blown |= bad
        if np.any(blown):
            u_new[blown] = u[blown]
        u = u_new
        if next_save < len(save_idx) and save_idx[next_save] == k + 1:
            states[:, next_save] = u
            next_save += 1
    times = np.array(save_idx, dtype=float) * dt
    meta = dict(model=m.kind, eps=eps, dt=dt, T=T, controlled=h is not None)
    return Ensemble(times, states, np.asarray(indices), blown, seed, dt, noise_rec, meta)


def simulate(
    m: Model,
    s: SigmaSpec,
    cov: CovarianceSpec,
    cfg: IntegratorConfig,
    xi,
    T: float,
    h: ControlPath | None = None,
    seed: int | None = None,
    record_noise: bool = False,
    replicate: int = 0,
) -> Trajectory:
    """Single path of the controlled equation; raises :class:`BlowUpError`.

    The path equals replicate ``replicate`` of :func:`simulate_ensemble`
    called with the same inputs and seed.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    ens = _integrate(m, s, cov, cfg, xi, T, h, seed, [replicate], record_noise, "raise")
    return ens.trajectory(0)


def _chunk_size(n_reps, n_saved, n, n_steps, K, record_noise):
    per_rep = n_saved * n + (n_steps * K if record_noise else 0) + NOISE_BLOCK * K
    return int(max(1, min(n_reps, 2048, 4_000_000 // max(1, per_rep))))


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1))


def iter_ensemble_chunks(
    m: Model,
    s: SigmaSpec,
    cov: CovarianceSpec,
    cfg: IntegratorConfig,
    xi,
    T: float,
    n_reps: int,
    seed: int,
    h: ControlPath | None = None,
    record_noise: bool = False,
    on_blowup: str = "flag",
    workers: int | None = None,
    chunk_size: int | None = None,
):
    """Yield the ensemble as consecutive chunks of replicates, in order.

    Lets reductions over many replicates (tail probabilities with recorded
    noise, say) run in bounded memory.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    if on_blowup not in ("flag", "raise"):
        raise ValueError("on_blowup must be 'flag' or 'raise'")
    n_steps = cfg.n_steps(T)
    n_saved = n_steps // cfg.save_stride + 2
    if chunk_size is None:
        chunk_size = _chunk_size(n_reps, n_saved, m.n, n_steps, cov.K, record_noise and cfg.eps > 0)
    chunks = [list(range(i, min(i + chunk_size, n_reps))) for i in range(0, n_reps, chunk_size)]
    workers = default_workers() if workers is None else workers
    args = [(m, s, cov, cfg, xi, T, h, seed, c, record_noise, on_blowup) for c in chunks]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(chunks))) as pool:
            yield from pool.map(_integrate_star, args)
    else:
        for a in args:
            yield _integrate(*a)


def simulate_ensemble(
    m: Model,
    s: SigmaSpec,
    cov: CovarianceSpec,
    cfg: IntegratorConfig,
    xi,
    T: float,
    n_reps: int,
    seed: int,
    h: ControlPath | None = None,
    record_noise: bool = False,
    on_blowup: str = "flag",
    workers: int | None = None,
    chunk_size: int | None = None,
) -> Ensemble:
    """``n_reps`` independent replicates, optionally over a process pool.

    Replicates are split into chunks whose size depends on the problem only,
    and chunks are concatenated in replicate order, so the result does not
    depend on ``workers``.
    """
    parts = list(iter_ensemble_chunks(m, s, cov, cfg, xi, T, n_reps, seed, h, record_noise, on_blowup, workers, chunk_size))
    return Ensemble.concatenate(parts)


def _integrate_star(a):
    return _integrate(*a)


def energy_residual(traj: Trajectory, m: Model, s: SigmaSpec, cov: CovarianceSpec, cfg: IntegratorConfig, h: ControlPath | None = None) -> np.ndarray:
    """Discrete defect of the Ito energy balance along a path.

    Entry ``k`` is ``|u(t_k)|^2 - |xi|^2`` minus the left-endpoint sum up to
    ``t_k`` of ``2 sqrt(eps) (sigma dW, u) - 2 ||u||^2 dt - 2 (R~ - sigma h, u) dt
    + eps |sigma|_{L_Q}^2 dt``.  ``B`` does not appear because
    ``<B(u,u),u> = 0``.  The path must be saved at every step.
    """
    dt = cfg.dt
    if not np.allclose(np.diff(traj.times), dt, rtol=1e-9, atol=0):
        raise ValueError("energy_residual needs a trajectory saved at every integrator step")
    u = traj.states[:-1]
    n_steps = u.shape[0]
    if n_steps == 0:
        return np.zeros(1)
    t = traj.times[:-1]
    eps = cfg.eps
    g = m.gelfand()
    inc = -2.0 * g.v_norm2(u) * dt
    r_term = np.array([pairing(m.apply_R(tk, uk), uk) for tk, uk in zip(t, u)])
    inc -= 2.0 * r_term * dt
    if h is not None:
        hs = h.on_steps(dt, n_steps)
        inc += 2.0 * np.array([pairing(s.apply(tk, uk, hk), uk) for tk, uk, hk in zip(t, u, hs)]) * dt
    if eps > 0:
        if traj.noise is None:
            raise ValueError("trajectory has no recorded noise increments (simulate with record_noise=True)")
        noise = traj.noise
        inc += 2.0 * np.sqrt(eps) * np.array([pairing(s.apply(tk, uk, dw), uk) for tk, uk, dw in zip(t, u, noise)])
        inc += eps * np.array([lq_norm(s, cov, tk, uk) ** 2 for tk, uk in zip(t, u)]) * dt
    energy = np.sum(np.abs(traj.states) ** 2, axis=-1)
    return energy - energy[0] - np.concatenate([[0.0], np.cumsum(inc)])


@dataclass(frozen=True)
class EnsembleStats:
    """Monte Carlo estimates of the a priori functionals.

    Per-replicate arrays hold ``sup |u|^4``, ``int ||u||^2`` and
    ``int ||u||_s^4``; ``mean`` and ``std_error`` map each name (and
    ``total``, their sum) to the sample mean and its standard error.
    """

    sup_h4: np.ndarray
    int_v2: np.ndarray
    int_interp4: np.ndarray
    mean: dict
    std_error: dict
    any_blown: bool


def _stats(x):
    x = np.asarray(x, dtype=float)
    se = float(np.std(x, ddof=1) / np.sqrt(x.size)) if x.size > 1 else float("nan")
    return float(np.mean(x)), se


def apriori_moments(ensemble: Ensemble | Sequence[Trajectory], g: GelfandTriple) -> EnsembleStats:
    """Estimate ``E sup|u|^4``, ``E int ||u||^2`` and ``E int ||u||_s^4``."""
    if isinstance(ensemble, Ensemble):
        times, states, blown = ensemble.times, ensemble.states, bool(np.any(ensemble.blown))
    else:
        trajs = list(ensemble)
        if not trajs:
            raise ValueError("empty ensemble")
        times = trajs[0].times
        states = np.stack([tr.states for tr in trajs])
        blown = any(tr.meta.get("blown", False) for tr in trajs)
    if states.shape[0] == 0:
        raise ValueError("empty ensemble")
    dts = np.diff(times)
    sup4 = np.max(g.h_norm2(states), axis=-1) ** 2
    iv2 = np.sum(g.v_norm2(states)[:, :-1] * dts, axis=-1)
    is4 = np.sum(g.interp_norm2(states)[:, :-1] ** 2 * dts, axis=-1)
    mean, se = {}, {}
    for name, x in (("sup_h4", sup4), ("int_v2", iv2), ("int_interp4", is4), ("total", sup4 + iv2 + is4)):
        mean[name], se[name] = _stats(x)
    return EnsembleStats(sup4, iv2, is4, mean, se, blown)


def step_function(times: np.ndarray, n: int, c: float) -> np.ndarray:
    """``psi_n(s) = min((k+1) L, T)`` for ``s in [k L, (k+1) L)``, ``L = c 2^-n``."""
    if not c > 0:
        raise ValueError("c must be positive")
    L = c * 2.0**-n
    T = times[-1]
    k = np.floor(times / L + 1e-9)
    return np.minimum((k + 1) * L, T)


def _states_at(times: np.ndarray, states: np.ndarray, tq: np.ndarray) -> np.ndarray:
    # exact on saved times, linear in time between them
    tol = 1e-9 * max(1.0, times[-1])
    j = np.clip(np.searchsorted(times, tq - tol), 0, times.size - 1)
    on_grid = np.abs(times[j] - tq) <= tol
    lo = np.maximum(j - 1, 0)
    span = np.where(on_grid, 1.0, times[j] - times[lo])
    w = np.where(on_grid, 1.0, (tq - times[lo]) / span)
    return w[:, None] * states[..., j, :] + (1.0 - w)[:, None] * states[..., lo, :]


def time_increment_statistic(ensemble: Ensemble, n: int, N: float, g: GelfandTriple, c: float | None = None) -> float:
    """Monte Carlo estimate of ``E[1_{G_N} int_0^T |u(s) - u(psi_n(s))|^2 ds]``.

    ``G_N`` keeps replicates with ``sup |u|^2 <= N`` and ``int ||u||^2 <= N``
    on the saved grid; ``c`` defaults to ``T`` (the dyadic step function).
    When ``psi_n(s)`` falls between saved times the path is interpolated
    linearly in time.
    """
    if not N > 0:
        raise ValueError("N must be positive")
    times, states = ensemble.times, ensemble.states
    T = times[-1]
    c = T if c is None else c
    dt_saved = float(np.max(np.diff(times)))
    if c * 2.0**-n < dt_saved * (1 - 1e-9):
        raise ValueError(f"grid incompatible with n = {n}: block length c 2^-n = {c * 2.0**-n:.3g} is below the saved step {dt_saved:.3g}")
    u_psi = _states_at(times, states, step_function(times, n, c))
    dts = np.diff(times)
    diff2 = np.sum(np.abs(states - u_psi) ** 2, axis=-1)
    integral = np.sum(diff2[:, :-1] * dts, axis=-1)
    sup = np.max(g.h_norm2(states), axis=-1)
    iv2 = np.sum(g.v_norm2(states)[:, :-1] * dts, axis=-1)
    in_G = (sup <= N) & (iv2 <= N) & ~ensemble.blown
    return float(np.mean(np.where(in_G, integral, 0.0)))


def localization_levels(ensemble: Ensemble, g: GelfandTriple) -> np.ndarray:
    """Per replicate ``max(sup |u|^2, int ||u||^2)``: the smallest ``N`` with the path in ``G_N``."""
    dts = np.diff(ensemble.times)
    sup = np.max(g.h_norm2(ensemble.states), axis=-1)
    iv2 = np.sum(g.v_norm2(ensemble.states)[:, :-1] * dts, axis=-1)
    return np.maximum(sup, iv2)


def with_eps(cfg: IntegratorConfig, eps: float) -> IntegratorConfig:
    return replace(cfg, eps=float(eps))
