"""Gelfand triple ``V ⊂ H ⊂ V'`` on a diagonal spectral basis, norms and paths.

Every model in the package has a self-adjoint positive ``A`` that is diagonal
in its Galerkin basis, so the triple is fully described by the eigenvalues
``a_k``.  For a coefficient vector ``c``::

    |u|      = (sum |c_k|^2)^(1/2)             H norm
    ||u||    = (sum a_k |c_k|^2)^(1/2)         V norm, |A^(1/2) u|
    ||u||_s  = (sum a_k^(2s) |c_k|^2)^(1/2)    interpolation norm, |A^s u|

Arrays of shape ``(..., n)`` are accepted everywhere; the norms reduce over the
last axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np


class DimensionError(ValueError):
    """Raised when a coefficient vector does not fit the basis it is used with."""

    def __init__(self, what: str, got: int, expected: int):
        super().__init__(f"{what}: got length {got}, expected at most {expected}")
        self.got = got
        self.expected = expected


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GelfandTriple:
    """Spectral weights of ``A`` plus the interpolation exponent ``s``.

    Parameters
    ----------
    weights : array_like
        Eigenvalues ``a_k > 0`` of ``A``.
    interp_exponent : float
        ``s`` in ``[0, 1/2]``; the intermediate space is ``Dom(A^s)``.
    a0 : float
        Constant of the interpolation inequality ``||v||_s^2 <= a0 |v| ||v||``.
    """

    weights: np.ndarray
    interp_exponent: float = 0.25
    a0: float = 1.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a nonempty 1-d sequence")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if np.any(w <= 0):
            raise ValueError("weights must be strictly positive (degenerate triple)")
        if not 0.0 <= self.interp_exponent <= 0.5:
            raise ValueError("interp_exponent must lie in [0, 1/2]")
        if not self.a0 > 0:
            raise ValueError("a0 must be positive")
        object.__setattr__(self, "weights", _readonly(w))

    @property
    def n(self) -> int:
        return self.weights.size

    def _check(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u)
        if u.shape[-1] > self.n:
            raise DimensionError("state vector", u.shape[-1], self.n)
        return u

    def h_norm2(self, u) -> np.ndarray:
        u = self._check(u)
        return np.sum(np.abs(u) ** 2, axis=-1)

    def v_norm2(self, u) -> np.ndarray:
        u = self._check(u)
        return np.sum(self.weights[: u.shape[-1]] * np.abs(u) ** 2, axis=-1)

    def interp_norm2(self, u) -> np.ndarray:
        u = self._check(u)
        w = self.weights[: u.shape[-1]] ** (2.0 * self.interp_exponent)
        return np.sum(w * np.abs(u) ** 2, axis=-1)


@dataclass(frozen=True)
class NormReport:
    h_norm: float
    v_norm: float
    interp_norm: float


def norms(u, g: GelfandTriple) -> NormReport:
    """H, V and interpolation norms of a single coefficient vector."""
    u = np.asarray(u)
    if u.ndim != 1:
        raise ValueError("norms expects a single 1-d coefficient vector")
    return NormReport(
        h_norm=float(np.sqrt(g.h_norm2(u))),
        v_norm=float(np.sqrt(g.v_norm2(u))),
        interp_norm=float(np.sqrt(g.interp_norm2(u))),
    )


@dataclass(frozen=True)
class InterpolationReport:
    max_ratio: float
    a0: float
    passed: bool


def check_interpolation(g: GelfandTriple, n_samples: int, seed: int) -> InterpolationReport:
    """Largest sampled value of ``||v||_s^2 / (|v| ||v||)``.

    Samples are standard Gaussian coefficient vectors plus every single-mode
    vector (the equality cases of Cauchy-Schwarz at ``s = 1/4``).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n_samples, g.n))
    v = np.concatenate([v, np.eye(g.n)])
    ratio = g.interp_norm2(v) / np.sqrt(g.h_norm2(v) * g.v_norm2(v))
    max_ratio = float(np.max(ratio))
    return InterpolationReport(max_ratio, g.a0, max_ratio <= g.a0 + 1e-12)


@dataclass
class Trajectory:
    """Sample path on a time grid.

    ``states[m]`` is the coefficient vector at ``times[m]``.  When the path was
    produced with ``record_noise=True`` the Wiener increments of every
    integrator step are kept in ``noise`` (shape ``(n_steps, K)``) together
    with the step size ``dt``.
    """

    times: np.ndarray
    states: np.ndarray
    seed: int | None = None
    meta: dict[str, Any] = field(default_factory=dict)
    noise: np.ndarray | None = None
    dt: float | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states)
        if self.times.ndim != 1 or self.times.size == 0:
            raise ValueError("times must be a nonempty 1-d array")
        if self.times[0] != 0.0:
            raise ValueError("times[0] must be 0")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if self.states.shape[0] != self.times.size:
            raise ValueError(
                f"{self.states.shape[0]} states for {self.times.size} times"
            )
        if not np.all(np.isfinite(self.states)):
            raise ValueError("trajectory contains non-finite states")

    def __len__(self):
        return self.times.size

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def x_norm(t: Trajectory, g: GelfandTriple) -> float:
    """Path-space norm ``(sup |u|^2 + int ||u||^2 dt)^(1/2)``.

    The integral is a left-endpoint Riemann sum on the trajectory's own grid.
    """
    return float(np.sqrt(_x_norm2(t.times, t.states, g)))


def _x_norm2(times: np.ndarray, states: np.ndarray, g: GelfandTriple) -> np.ndarray:
    # states has shape (..., n_times, n); reductions run over the time axis
    dts = np.diff(times)
    sup = np.max(g.h_norm2(states), axis=-1)
    integral = np.sum(g.v_norm2(states)[..., :-1] * dts, axis=-1)
    return sup + integral
