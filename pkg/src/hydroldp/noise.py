"""Trace-class Wiener noise, noise intensities and RKHS-valued controls.

The Wiener process is truncated to the ``K`` leading eigenmodes of its
covariance ``Q e_j = q_j e_j``, so an increment is the real ``K``-vector
``dW_j = sqrt(q_j) dB_j``.  Elements of the Cameron-Martin space
``H_0 = Q^(1/2) H`` use the same coordinates, hence
``|phi|_0^2 = sum phi_j^2 / q_j``.  A noise intensity ``sigma(t, u)`` is an
``(n, K)`` matrix whose column ``j`` is the state vector ``sigma e_j``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DimensionError, GelfandTriple


@dataclass(frozen=True)
class CovarianceSpec:
    """Eigenvalues ``q_j > 0`` of the covariance operator."""

    q: np.ndarray

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q, dtype=float))
        if q.ndim != 1 or q.size == 0:
            raise ValueError("q must be a nonempty 1-d sequence")
        if np.any(~np.isfinite(q)) or np.any(q <= 0):
            raise ValueError("covariance eigenvalues must be finite and positive")
        q = q.copy()
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @classmethod
    def power_law(cls, K: int, exponent: float = 2.0) -> "CovarianceSpec":
        """``q_j = j^-exponent``; the default spectrum is ``j^-2``."""
        return cls(np.arange(1, K + 1, dtype=float) ** -exponent)

    @property
    def K(self) -> int:
        return self.q.size

    @property
    def trace(self) -> float:
        return float(np.sum(self.q))

    def h0_norm2(self, phi) -> np.ndarray:
        phi = np.asarray(phi)
        if phi.shape[-1] > self.K:
            raise DimensionError("H_0 vector outside the span of Q^(1/2)", phi.shape[-1], self.K)
        return np.sum(phi**2 / self.q[: phi.shape[-1]], axis=-1)

    def sqrt_q_apply(self, psi) -> np.ndarray:
        """``Q^(1/2) psi`` in eigen-coordinates."""
        return np.sqrt(self.q) * np.asarray(psi)


def sample_wiener_increment(cov: CovarianceSpec, dt: float, rng: np.random.Generator, size=()) -> np.ndarray:
    """``dW = sum_j sqrt(q_j) dB_j e_j`` with independent ``dB_j ~ N(0, dt)``."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    size = tuple(np.atleast_1d(size)) if size != () else ()
    z = rng.standard_normal(size + (cov.K,))
    return np.sqrt(cov.q * dt) * z


@dataclass(frozen=True)
class Rho:
    """Bounded Lipschitz scalar shape ``rho(r) = clip(intercept + slope r, -cap, cap)``.

    ``kind='constant'`` ignores ``slope`` and returns ``intercept``.
    """

    kind: str = "constant"
    intercept: float = 1.0
    slope: float = 0.0
    cap: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "clipped_linear"):
            raise ValueError(f"unknown rho kind {self.kind!r}")
        if self.kind == "clipped_linear" and not self.cap > 0:
            raise ValueError("rho cap must be positive")

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        if self.kind == "constant":
            return np.full(r.shape, self.intercept)
        return np.clip(self.intercept + self.slope * r, -self.cap, self.cap)

    def derivative(self, r):
        r = np.asarray(r, dtype=float)
        if self.kind == "constant":
            return np.zeros(r.shape)
        inside = np.abs(self.intercept + self.slope * r) < self.cap
        return np.where(inside, self.slope, 0.0)

    @property
    def bound(self) -> float:
        return abs(self.intercept) if self.kind == "constant" else self.cap

    @property
    def lipschitz(self) -> float:
        return 0.0 if self.kind == "constant" else abs(self.slope)


SIGMA_KINDS = ("additive", "diagonal", "time_modulated")


@dataclass(frozen=True)
class SigmaSpec:
    """Noise intensity from the catalogue.

    ``additive``        ``sigma(t,u) = Phi``
    ``diagonal``        ``sigma(t,u) = diag(rho(|u_i|)) Phi``
    ``time_modulated``  ``sigma(t,u) = (1 + c_mod t^gamma) Phi``

    None of them depends on ``||u||``, so the gradient constants ``K2`` and
    ``L2`` are zero.  They are kept as fields so that a declared
    gradient-dependent intensity can be rejected by the large-deviation code.
    """

    kind: str
    phi: np.ndarray
    rho: Rho = field(default_factory=Rho)
    gamma: float = 1.0
    c_mod: float = 0.0
    K2: float = 0.0
    L2: float = 0.0

    def __post_init__(self):
        if self.kind not in SIGMA_KINDS:
            raise ValueError(f"unknown sigma kind {self.kind!r}; expected one of {SIGMA_KINDS}")
        phi = np.asarray(self.phi)
        if phi.ndim != 2:
            raise ValueError("phi must be an (n, K) column table")
        if not np.all(np.isfinite(phi)):
            raise ValueError("phi must be finite")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        phi = phi.copy()
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    @property
    def n(self) -> int:
        return self.phi.shape[0]

    @property
    def K(self) -> int:
        return self.phi.shape[1]

    @property
    def state_dependent(self) -> bool:
        return self.kind == "diagonal" and self.rho.kind != "constant"

    def row_factor(self, t: float, u) -> np.ndarray | float:
        """Scalar or per-row factor multiplying ``Phi``."""
        if self.kind == "additive":
            return 1.0
        if self.kind == "time_modulated":
            return 1.0 + self.c_mod * t**self.gamma
        return self.rho(np.abs(u))

    def matrix(self, t: float, u) -> np.ndarray:
        f = self.row_factor(t, u)
        if np.ndim(f) == 0:
            return f * self.phi
        return f[..., :, None] * self.phi

    def apply(self, t: float, u, psi) -> np.ndarray:
        """``sigma(t,u) psi`` for ``psi`` of shape ``(..., K)``."""
        psi = np.asarray(psi)
        if psi.shape[-1] != self.K:
            raise DimensionError("noise coordinate vector", psi.shape[-1], self.K)
        # elementwise product + reduction keeps each batch row bit-identical
        # to the same row evaluated alone
        out = np.sum(psi[..., None, :] * self.phi, axis=-1)
        return self.row_factor(t, u) * out

    def apply_transpose(self, t: float, u, lam) -> np.ndarray:
        """Real ``K``-vector ``g`` with ``<sigma(t,u) psi, lam> = g . psi``."""
        lam = np.asarray(lam)
        f = self.row_factor(t, u)
        w = f * np.conj(lam)
        return np.real(np.sum(w[..., :, None] * self.phi, axis=-2))

    def state_derivative_adjoint(self, t: float, u, psi, lam) -> np.ndarray:
        """Adjoint of ``du -> (d_u sigma(t,u) psi) du`` applied to ``lam``."""
        u = np.asarray(u)
        if not self.state_dependent:
            return np.zeros_like(u)
        r = np.abs(u)
        drho = self.rho.derivative(r)
        phipsi = np.sum(np.asarray(psi)[..., None, :] * self.phi, axis=-1)
        coef = drho * np.real(phipsi * np.conj(lam))
        unit = np.divide(u, r, out=np.zeros_like(u), where=r > 0)
        return coef * unit

    def row_weights(self, cov: CovarianceSpec) -> np.ndarray:
        """``r_i = sum_j q_j |Phi_ij|^2``."""
        self._check_cov(cov)
        return np.sum(cov.q * np.abs(self.phi) ** 2, axis=-1)

    def _check_cov(self, cov):
        if cov.K != self.K:
            raise DimensionError("covariance size vs sigma columns", cov.K, self.K)

    def declared_constants(self, cov: CovarianceSpec, T: float) -> dict:
        """Constants ``K0, K1, K2, L1, L2`` and the time-Hoelder constant."""
        r = self.row_weights(cov)
        # same reduction order as the sampled values, so additive sigma matches exactly
        phi_lq2 = float(lq_norm2_matrix(self.phi, cov))
        out = dict(K0=phi_lq2, K1=0.0, K2=self.K2, L1=0.0, L2=self.L2, C_holder=0.0, gamma=self.gamma)
        if self.kind == "diagonal":
            out["K0"] = self.rho.bound**2 * phi_lq2
            out["L1"] = self.rho.lipschitz**2 * float(np.max(r))
        elif self.kind == "time_modulated":
            out["K0"] = max(1.0, abs(1.0 + self.c_mod * T**self.gamma)) ** 2 * phi_lq2
            out["C_holder"] = abs(self.c_mod) * np.sqrt(phi_lq2)
        return out


def apply_sigma(s: SigmaSpec, t: float, u, psi) -> np.ndarray:
    return s.apply(t, u, psi)


def lq_norm2_matrix(S: np.ndarray, cov: CovarianceSpec) -> np.ndarray:
    """``|S|_{L_Q}^2 = sum_j q_j |S e_j|^2`` for matrices of shape ``(..., n, K)``."""
    return np.sum(cov.q * np.sum(np.abs(S) ** 2, axis=-2), axis=-1)


def lq_norm(s: SigmaSpec, cov: CovarianceSpec, t: float, u) -> np.ndarray:
    """Hilbert-Schmidt norm of ``sigma(t,u) Q^(1/2)``."""
    r = s.row_weights(cov)
    f = s.row_factor(t, u)
    return np.sqrt(np.sum(np.abs(f) ** 2 * r, axis=-1)) if np.ndim(f) else abs(f) * np.sqrt(np.sum(r))


@dataclass(frozen=True)
class ControlPath:
    """Piecewise-constant ``H_0``-valued control.

    ``values[c]`` holds on the cell ``[grid[c], grid[c+1])``.  ``budget`` is
    the energy bound ``M`` of ``S_M``; ``None`` means unconstrained.
    """

    grid: np.ndarray
    values: np.ndarray
    budget: float | None = None

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if grid.ndim != 1 or grid.size < 2:
            raise ValueError("control grid needs at least two points")
        if grid[0] != 0 or np.any(np.diff(grid) <= 0):
            raise ValueError("control grid must start at 0 and increase strictly")
        if values.shape[0] != grid.size - 1:
            raise ValueError(f"{values.shape[0]} control values for {grid.size - 1} cells")
        if not np.all(np.isfinite(values)):
            raise ValueError("control values must be finite")
        if self.budget is not None and not self.budget > 0:
            raise ValueError("budget must be positive")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, value, T: float, n_cells: int = 1, budget=None) -> "ControlPath":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(np.linspace(0.0, T, n_cells + 1), np.tile(value, (n_cells, 1)), budget)

    @classmethod
    def zeros(cls, T: float, n_cells: int, K: int, budget=None) -> "ControlPath":
        return cls(np.linspace(0.0, T, n_cells + 1), np.zeros((n_cells, K)), budget)

    @property
    def T(self) -> float:
        return float(self.grid[-1])

    @property
    def K(self) -> int:
        return self.values.shape[1]

    @property
    def n_cells(self) -> int:
        return self.values.shape[0]

    def scaled(self, c: float) -> "ControlPath":
        return ControlPath(self.grid, c * self.values, self.budget)

    def with_values(self, values) -> "ControlPath":
        return ControlPath(self.grid, values, self.budget)

    def __add__(self, other: "ControlPath") -> "ControlPath":
        if not np.array_equal(self.grid, other.grid):
            raise ValueError("controls live on different grids")
        return ControlPath(self.grid, self.values + other.values, self.budget)

    def cell_steps(self, dt: float, n_steps: int) -> np.ndarray:
        """Cell index of each integrator step ``[m dt, (m+1) dt)``."""
        if abs(self.T - n_steps * dt) > 1e-9 * max(1.0, self.T):
            raise ValueError(f"control horizon {self.T} differs from integration horizon {n_steps * dt}")
        t = np.arange(n_steps) * dt
        # nudge by a fraction of dt so grid points shared with the integrator map consistently
        return np.searchsorted(self.grid, t + 1e-9 * dt, side="right") - 1

    def is_aligned(self, dt: float) -> bool:
        ratio = self.grid / dt
        return bool(np.all(np.abs(ratio - np.round(ratio)) < 1e-8))

    def on_steps(self, dt: float, n_steps: int) -> np.ndarray:
        return self.values[self.cell_steps(dt, n_steps)]

    def save(self, path) -> Path:
        """Column text: one line per cell ``t_c h_1 ... h_K``, then a line with ``T``."""
        path = Path(path)
        with path.open("w") as fh:
            for t, row in zip(self.grid[:-1], self.values):
                fh.write(" ".join(repr(float(x)) for x in (t, *row)) + "\n")
            fh.write(repr(self.T) + "\n")
        return path

    @classmethod
    def load(cls, path, budget=None) -> "ControlPath":
        rows = []
        T = None
        with Path(path).open() as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                try:
                    vals = [float(x) for x in line.split()]
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from None
                if len(vals) == 1:
                    T = vals[0]
                    break
                rows.append(vals)
        if not rows:
            raise ValueError(f"{path}: no control cells")
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise ValueError(f"{path}: rows have differing numbers of columns")
        arr = np.array(rows)
        if T is None:
            raise ValueError(f"{path}: missing final line with the horizon T")
        return cls(np.append(arr[:, 0], T), arr[:, 1:], budget)


@dataclass(frozen=True)
class ControlEnergy:
    energy: float
    in_SM: bool


def control_energy(cov: CovarianceSpec, h: ControlPath) -> ControlEnergy:
    """``int_0^T |h(s)|_0^2 ds`` and membership in ``S_M``."""
    if h.K > cov.K:
        raise DimensionError("control has components outside the span of Q^(1/2)", h.K, cov.K)
    energy = float(np.sum(cov.h0_norm2(h.values) * np.diff(h.grid)))
    budget = np.inf if h.budget is None else h.budget
    return ControlEnergy(energy, energy <= budget)


@dataclass(frozen=True)
class SigmaReport:
    K0_hat: float
    K1_hat: float
    L1_hat: float
    holder_residual: float
    growth_excess: float
    declared: dict
    passed: bool


def check_sigma_conditions(
    s: SigmaSpec,
    cov: CovarianceSpec,
    g: GelfandTriple,
    n_samples: int,
    seed: int,
    T: float = 1.0,
    complex_state: bool | None = None,
) -> SigmaReport:
    """Sample growth, Lipschitz and time-Hoelder ratios of ``sigma``.

    States are Gaussian vectors with log-uniform amplitudes in
    ``[1e-2, 1e2]``; Lipschitz pairs use both small and large separations.
    The check passes when every empirical quantity is dominated by the
    declared constant.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if s.n != g.n:
        raise DimensionError("sigma rows vs Gelfand triple", s.n, g.n)
    s._check_cov(cov)
    rng = np.random.default_rng(seed)
    if complex_state is None:
        complex_state = np.iscomplexobj(s.phi)

    def draw(k):
        z = rng.standard_normal((k, s.n))
        if complex_state:
            z = (z + 1j * rng.standard_normal((k, s.n))) / np.sqrt(2)
        amp = 10.0 ** rng.uniform(-2, 2, size=(k, 1))
        return amp * z / np.sqrt(s.n)

    decl = s.declared_constants(cov, T)
    u = draw(n_samples)
    t = rng.uniform(0, T, size=n_samples)
    lq2 = np.array([lq_norm2_matrix(s.matrix(ti, ui), cov) for ti, ui in zip(t, u)])
    lq2_zero = np.array([lq_norm2_matrix(s.matrix(ti, np.zeros(s.n)), cov) for ti in np.append(t, [0.0, T])])
    u2 = np.sum(np.abs(u) ** 2, axis=-1)
    K0_hat = float(np.max(lq2_zero))
    growth_excess = float(np.max(lq2 - decl["K0"] - decl["K1"] * u2))
    K1_hat = float(max(0.0, np.max((lq2 - decl["K0"]) / u2)))

    sep = 10.0 ** rng.uniform(-4, 0, size=(n_samples, 1))
    v = u + sep * draw(n_samples)
    L1_ratios = []
    for ti, ui, vi in zip(t, u, v):
        d2 = np.sum(np.abs(ui - vi) ** 2)
        if d2 > 0:
            L1_ratios.append(lq_norm2_matrix(s.matrix(ti, ui) - s.matrix(ti, vi), cov) / d2)
    L1_hat = float(max(L1_ratios, default=0.0))

    t2 = rng.uniform(0, T, size=n_samples)
    vnorm = np.sqrt(g.v_norm2(u))
    hold = []
    for ti, tj, ui, vn in zip(t, t2, u, vnorm):
        if ti != tj:
            diff = np.sqrt(lq_norm2_matrix(s.matrix(ti, ui) - s.matrix(tj, ui), cov))
            hold.append(diff / ((1 + vn) * abs(ti - tj) ** s.gamma))
    holder = float(max(hold, default=0.0))

    tol = 1e-9
    passed = (
        decl["K2"] == 0
        and decl["L2"] == 0
        and K0_hat <= decl["K0"] * (1 + tol) + 1e-300
        and growth_excess <= tol * max(1.0, decl["K0"])
        and K1_hat <= decl["K1"] * (1 + tol) + tol
        and L1_hat <= decl["L1"] * (1 + tol) + tol
        and holder <= decl["C_holder"] * (1 + tol) + tol
    )
    return SigmaReport(K0_hat, K1_hat, L1_hat, holder, growth_excess, decl, bool(passed))


def additive_sigma(model, cov: CovarianceSpec, scale: float = 1.0) -> SigmaSpec:
    """Additive intensity whose columns are the model's first ``K`` noise directions."""
    return SigmaSpec("additive", scale * model.noise_basis(cov.K))
