"""Model zoo: linear operator ``A``, bilinear map ``B`` and bounded ``R~``.

All models share one calling convention.  A state is a coefficient array of
shape ``(..., n)`` (real for the dyadic and linear models, complex otherwise)
and every operator acts on the last axis, so ensembles are advanced in one
call.  ``A`` is diagonal with eigenvalues ``weights``.  ``B`` is the Galerkin
projection ``P_n B`` of the infinite-dimensional map: the inputs already live
in the truncated space and only the output is cut, which keeps the
antisymmetry ``<B(u1,u2),u3> = -<B(u1,u3),u2>`` exact on the truncation.

The pairing is the real inner product ``<u, v> = Re sum u_k conj(v_k)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from .core import DimensionError, GelfandTriple

MODEL_KINDS = ("goy", "sabra", "dyadic", "nse2d", "linear")


def pairing(u, v) -> np.ndarray:
    """Real inner product over the last axis."""
    return np.sum(np.real(np.asarray(u) * np.conj(v)), axis=-1)


@dataclass(frozen=True)
class RTilde:
    """Bounded linear feedback ``R~(t, u) = identity_coef * u + matrix @ u``.

    ``R0 = 0`` since the map is linear; ``lipschitz`` bounds ``R1``.
    """

    identity_coef: complex = 0.0
    matrix: np.ndarray | None = None

    @classmethod
    def rotation(cls, c0: float, n: int, complex_state: bool) -> "RTilde":
        """``c0 * J`` with ``J`` a rotation: ``i * u`` for complex states,
        ``(u_0, u_1) -> (-u_1, u_0)`` pairwise for real ones."""
        if complex_state:
            return cls(identity_coef=1j * c0)
        j = np.zeros((n, n))
        for k in range(0, n - 1, 2):
            j[k, k + 1] = -1.0
            j[k + 1, k] = 1.0
        return cls(matrix=c0 * j)

    @property
    def is_zero(self) -> bool:
        return self.identity_coef == 0 and self.matrix is None

    @property
    def R0(self) -> float:
        return 0.0

    @property
    def lipschitz(self) -> float:
        r1 = abs(self.identity_coef)
        if self.matrix is not None:
            r1 += float(np.linalg.norm(self.matrix, 2))
        return r1

    def shifted(self) -> "RTilde":
        return RTilde(self.identity_coef - 1.0, self.matrix)

    def apply(self, t: float, u: np.ndarray) -> np.ndarray:
        if self.is_zero:
            return np.zeros_like(u)
        out = self.identity_coef * u
        if self.matrix is not None:
            out = out + u @ self.matrix.T
        return out

    def apply_adjoint(self, t: float, lam: np.ndarray) -> np.ndarray:
        if self.is_zero:
            return np.zeros_like(lam)
        out = np.conj(self.identity_coef) * lam
        if self.matrix is not None:
            out = out + lam @ np.conj(self.matrix)
        return out


class Model:
    """Base class; subclasses define ``weights`` and the bilinear map."""

    kind = ""
    complex_state = True

    def __init__(self, n: int, shift: bool = False, r_tilde: RTilde | None = None):
        if int(n) < 1:
            raise ValueError("truncation n must be >= 1")
        self.n = int(n)
        self.shift = bool(shift)
        r = r_tilde if r_tilde is not None else RTilde()
        if not self.complex_state and np.iscomplexobj(np.asarray(r.identity_coef)) and np.imag(r.identity_coef) != 0:
            raise ValueError("complex R~ coefficient on a real-valued model")
        self.r_tilde = r.shifted() if self.shift else r

    # -- subclass hooks -------------------------------------------------
    def _base_weights(self) -> np.ndarray:
        raise NotImplementedError

    def _bilinear(self, u, v):
        raise NotImplementedError

    def _bilinear_adjoint_first(self, v, w):
        raise NotImplementedError

    # -- public API ------------------------------------------------------
    @property
    def dtype(self):
        return np.complex128 if self.complex_state else np.float64

    @property
    def weights(self) -> np.ndarray:
        w = self._base_weights()
        return w + 1.0 if self.shift else w

    def gelfand(self, s: float = 0.25, a0: float = 1.0) -> GelfandTriple:
        return GelfandTriple(self.weights, s, a0)

    def check_state(self, u, name="state") -> np.ndarray:
        u = np.asarray(u)
        if u.shape[-1] != self.n:
            raise DimensionError(f"{self.kind} {name}", u.shape[-1], self.n)
        return u

    def zeros(self, *batch) -> np.ndarray:
        return np.zeros(batch + (self.n,), dtype=self.dtype)

    def basis_vector(self, k: int) -> np.ndarray:
        e = self.zeros()
        e[k] = 1.0
        return e

    def random_state(self, rng: np.random.Generator, size=()) -> np.ndarray:
        """Independent standard Gaussian coefficients (admissible states only)."""
        size = tuple(np.atleast_1d(size)) if size != () else ()
        if self.complex_state:
            return (rng.standard_normal(size + (self.n,)) + 1j * rng.standard_normal(size + (self.n,))) / np.sqrt(2)
        return rng.standard_normal(size + (self.n,))

    def noise_basis(self, K: int) -> np.ndarray:
        """First ``K`` orthonormal directions of H, as an ``(n, K)`` column table."""
        if self.complex_state:
            if K > 2 * self.n:
                raise DimensionError("noise basis size", K, 2 * self.n)
            cols = self.zeros(K)
            for j in range(K):
                cols[j, j // 2] = 1.0 if j % 2 == 0 else 1j
            return cols.T.copy()
        if K > self.n:
            raise DimensionError("noise basis size", K, self.n)
        return np.eye(self.n, K)

    def apply_A(self, u) -> np.ndarray:
        u = self.check_state(u)
        return self.weights * u

    def apply_B(self, u, v) -> np.ndarray:
        u = self.check_state(u, "first argument")
        v = self.check_state(v, "second argument")
        return self._bilinear(u, v)

    def apply_B_adjoint_first(self, v, w) -> np.ndarray:
        """``G`` with ``<B(x, v), w> = <x, G>`` for every ``x``."""
        v = self.check_state(v)
        w = self.check_state(w)
        return self._bilinear_adjoint_first(v, w)

    def apply_R(self, t: float, u) -> np.ndarray:
        return self.r_tilde.apply(t, self.check_state(u))

    def trilinear(self, u1, u2, u3) -> np.ndarray:
        return pairing(self.apply_B(u1, u2), self.check_state(u3))

    def __repr__(self):
        return f"{type(self).__name__}(n={self.n})"


def _pad(u: np.ndarray, width: int = 2) -> np.ndarray:
    out = np.zeros(u.shape[:-1] + (u.shape[-1] + 2 * width,), dtype=u.dtype)
    out[..., width:-width] = u
    return out


class _ShellModel(Model):
    def __init__(self, n, nu=1.0, k0=1.0, mu=2.0, a=1.0, b=-0.5, shift=False, r_tilde=None):
        if not nu > 0:
            raise ValueError("nu must be positive")
        if not k0 > 0:
            raise ValueError("k0 must be positive")
        if not mu > 1:
            raise ValueError("mu must be > 1")
        super().__init__(n, shift, r_tilde)
        self.nu, self.k0, self.mu, self.a, self.b = float(nu), float(k0), float(mu), float(a), float(b)
        # k_n = k0 mu^n for shells n = 1..N
        self.k = self.k0 * self.mu ** np.arange(1, self.n + 1)

    def _base_weights(self):
        return self.nu * self.k**2

    def _slices(self, x):
        # padded index p = n + 1 for shell n; returns x_{n-2}, x_{n-1}, x_{n+1}, x_{n+2}
        X = _pad(x)
        N = self.n
        return X[..., 0:N], X[..., 1 : N + 1], X[..., 3 : N + 3], X[..., 4 : N + 4]


class GOY(_ShellModel):
    """GOY shell model, ``(Au)_n = nu k_n^2 u_n``."""

    kind = "goy"

    def _bilinear(self, u, v):
        a, b, k, mu = self.a, self.b, self.k, self.mu
        u2m, u1m, u1p, _ = self._slices(np.conj(u))
        v2m, v1m, v1p, v2p = self._slices(np.conj(v))
        return -1j * (
            a * k * mu * u1p * v2p
            + b * k * u1m * v1p
            - a * (k / mu) * u1m * v2m
            - b * (k / mu) * u2m * v1m
        )

    def _bilinear_adjoint_first(self, v, w):
        a, b, k, mu = self.a, self.b, self.k, self.mu
        _, v1m, v1p, v2p = self._slices(np.conj(v))
        _, w1m, w1p, w2p = self._slices(np.conj(w))
        return (
            -1j * a * k * v1p * w1m
            - 1j * b * k * mu * v2p * w1p
            + 1j * a * k * v1m * w1p
            + 1j * b * k * mu * v1p * w2p
        )


class Sabra(_ShellModel):
    """Sabra shell model; same ``A`` as GOY."""

    kind = "sabra"

    def _bilinear(self, u, v):
        a, b, k, mu = self.a, self.b, self.k, self.mu
        uc = np.conj(u)
        _, uc1m, uc1p, _ = self._slices(uc)
        u2m, u1m, _, _ = self._slices(u)
        v2m, v1m, v1p, v2p = self._slices(v)
        return -1j * (
            a * k * mu * uc1p * v2p
            + b * k * uc1m * v1p
            + a * (k / mu) * u1m * v2m
            + b * (k / mu) * u2m * v1m
        )

    def _bilinear_adjoint_first(self, v, w):
        a, b, k, mu = self.a, self.b, self.k, self.mu
        _, v1m, v1p, v2p = self._slices(v)
        _, w1m, w1p, w2p = self._slices(w)
        return (
            -1j * a * k * v1p * np.conj(w1m)
            - 1j * b * k * mu * v2p * np.conj(w1p)
            + 1j * a * k * np.conj(v1m) * w1p
            + 1j * b * k * mu * np.conj(v1p) * w2p
        )


class Dyadic(Model):
    """Real dyadic model, ``(Au)_n = nu lam^(2 alpha n) u_n`` and
    ``B(u,v)_n = -lam^n u_{n-1} v_{n-1} + lam^(n+1) u_n v_{n+1}``."""

    kind = "dyadic"
    complex_state = False

    def __init__(self, n, nu=1.0, lam=2.0, alpha=1.0, shift=False, r_tilde=None):
        if not nu > 0:
            raise ValueError("nu must be positive")
        if not lam > 1:
            raise ValueError("lam must be > 1")
        if not alpha >= 0.5:
            raise ValueError("alpha must be >= 1/2")
        super().__init__(n, shift, r_tilde)
        self.nu, self.lam, self.alpha = float(nu), float(lam), float(alpha)
        self.lam_n = self.lam ** np.arange(1, self.n + 1)

    def _base_weights(self):
        return self.nu * self.lam_n ** (2 * self.alpha)

    def _bilinear(self, u, v):
        U, V = _pad(u, 1), _pad(v, 1)
        N = self.n
        return -self.lam_n * U[..., 0:N] * V[..., 0:N] + self.lam_n * self.lam * u * V[..., 2 : N + 2]

    def _bilinear_adjoint_first(self, v, w):
        V, W = _pad(v, 1), _pad(w, 1)
        N = self.n
        c = self.lam_n * self.lam
        return -c * v * W[..., 2 : N + 2] + c * V[..., 2 : N + 2] * w


class LinearDiagonal(Model):
    """``B = 0`` with prescribed diagonal ``A``; the linear-Gaussian test bed."""

    kind = "linear"
    complex_state = False

    def __init__(self, weights, shift=False, r_tilde=None):
        w = np.atleast_1d(np.asarray(weights, dtype=float))
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        super().__init__(w.size, shift, r_tilde)
        self._w = w

    def _base_weights(self):
        return self._w.copy()

    def _bilinear(self, u, v):
        return np.zeros(np.broadcast_shapes(u.shape, v.shape), dtype=self.dtype)

    def _bilinear_adjoint_first(self, v, w):
        return np.zeros(np.broadcast_shapes(v.shape, w.shape), dtype=self.dtype)


class NSE2D(Model):
    """2D incompressible Navier-Stokes on the torus ``[0, 2pi)^2``, mean zero.

    Retained modes are ``k in Z^2`` with ``0 < |k| <= K``.  Each mode carries
    one complex scalar ``c_k`` and the velocity coefficient is
    ``u_k = i c_k k_perp / |k|`` with ``k_perp = (-k_y, k_x)``, so every state
    is divergence-free.  Real velocity fields correspond to
    ``c_{-k} = conj(c_k)``.  ``|u|^2 = sum |c_k|^2`` is the mean kinetic
    energy density ``(2 pi)^-2 int |u|^2 dx``.  Products are evaluated
    pseudo-spectrally on an ``M x M`` grid with ``M >= 3K + 1`` so retained
    modes of quadratic terms are alias-free.
    """

    kind = "nse2d"

    def __init__(self, K, nu=1.0, shift=False, r_tilde=None):
        K = int(K)
        if K < 1:
            raise ValueError("K must be >= 1")
        if not nu > 0:
            raise ValueError("nu must be positive")
        rng = np.arange(-K, K + 1)
        kx, ky = np.meshgrid(rng, rng, indexing="ij")
        kx, ky = kx.ravel(), ky.ravel()
        k2 = kx**2 + ky**2
        keep = (k2 > 0) & (k2 <= K * K)
        order = np.lexsort((ky[keep], kx[keep], k2[keep]))
        self.kx = kx[keep][order]
        self.ky = ky[keep][order]
        if r_tilde is not None and (r_tilde.matrix is not None or np.imag(r_tilde.identity_coef) != 0):
            # a Coriolis-type term c0 k x u is a gradient on the torus and vanishes after projection
            raise ValueError("nse2d accepts only a real multiple of the identity as R~")
        super().__init__(self.kx.size, shift, r_tilde)
        self.K = K
        self.nu = float(nu)
        self.kabs = np.sqrt(self.kx**2 + self.ky**2)
        lookup = {(x, y): i for i, (x, y) in enumerate(zip(self.kx, self.ky))}
        self.partner = np.array([lookup[(-x, -y)] for x, y in zip(self.kx, self.ky)])
        self.M = sfft.next_fast_len(3 * K + 1)
        # modes stored in the rfft half plane (ky >= 0); the rest follow by symmetry
        self.half = self.ky >= 0
        self._hx = np.mod(self.kx[self.half], self.M)
        self._hy = self.ky[self.half]
        # unit polarisation i k_perp/|k|
        self.ex = -1j * self.ky / self.kabs
        self.ey = 1j * self.kx / self.kabs

    def _base_weights(self):
        return self.nu * self.kabs**2

    def pair_residual(self, u) -> float:
        u = np.asarray(u)
        scale = max(1.0, float(np.max(np.abs(u)))) if u.size else 1.0
        return float(np.max(np.abs(u[..., self.partner] - np.conj(u)))) / scale

    def _check_real(self, u, name):
        if self.pair_residual(u) > 1e-10:
            raise ValueError(f"nse2d {name} violates the reality constraint c(-k) = conj(c(k))")

    def random_state(self, rng, size=()):
        c = super().random_state(rng, size)
        return (c + np.conj(c[..., self.partner])) / np.sqrt(2)

    def noise_basis(self, K):
        if K > self.n:
            raise DimensionError("noise basis size", K, self.n)
        cols = np.zeros((self.n, K), dtype=complex)
        pos = [i for i in range(self.n) if self.kx[i] > 0 or (self.kx[i] == 0 and self.ky[i] > 0)]
        for j in range(K):
            i = pos[j // 2]
            p = self.partner[i]
            if j % 2 == 0:
                cols[i, j] = cols[p, j] = 1 / np.sqrt(2)
            else:
                cols[i, j], cols[p, j] = 1j / np.sqrt(2), -1j / np.sqrt(2)
        return cols

    # -- velocity representation ----------------------------------------
    def to_velocity(self, c):
        c = self.check_state(c)
        return c * self.ex, c * self.ey

    def from_velocity(self, ux, uy, tol=1e-10):
        """Scalar coefficients of a velocity field given per retained mode.

        Raises ``ValueError`` if the field is not divergence-free.
        """
        ux, uy = np.asarray(ux), np.asarray(uy)
        self.check_state(ux)
        self.check_state(uy)
        div = np.abs(self.kx * ux + self.ky * uy) / self.kabs
        scale = max(1.0, float(np.max(np.abs(ux) + np.abs(uy))))
        if np.max(div) > tol * scale:
            raise ValueError(f"velocity field is not divergence-free (max |k.u|/|k| = {np.max(div):.3e})")
        return ux * np.conj(self.ex) + uy * np.conj(self.ey)

    def _to_grid(self, coef):
        # coef: (B, n) coefficients of one scalar field -> (B, M, M) real field
        Bn = coef.shape[0]
        F = np.zeros((Bn, self.M, self.M // 2 + 1), dtype=complex)
        F[:, self._hx, self._hy] = coef[:, self.half]
        return sfft.irfft2(F, s=(self.M, self.M), workers=1) * self.M**2

    def _from_grid(self, field):
        F = sfft.rfft2(field, workers=1) / self.M**2
        out = np.empty((field.shape[0], self.n), dtype=complex)
        out[:, self.half] = F[:, self._hx, self._hy]
        low = ~self.half
        out[:, low] = np.conj(out[:, self.partner[low]])
        return out

    def _project(self, wx_hat, wy_hat):
        return wx_hat * np.conj(self.ex) + wy_hat * np.conj(self.ey)

    def _prep(self, *args):
        shape = np.broadcast_shapes(*(a.shape for a in args))
        flat = [np.broadcast_to(a, shape).reshape(-1, self.n) for a in args]
        return shape, flat

    def _bilinear(self, u, v):
        self._check_real(u, "first argument")
        self._check_real(v, "second argument")
        shape, (u, v) = self._prep(u, v)
        ux, uy = self._to_grid(u * self.ex), self._to_grid(u * self.ey)
        vx, vy = v * self.ex, v * self.ey
        wx = ux * self._to_grid(1j * self.kx * vx) + uy * self._to_grid(1j * self.ky * vx)
        wy = ux * self._to_grid(1j * self.kx * vy) + uy * self._to_grid(1j * self.ky * vy)
        out = self._project(self._from_grid(wx), self._from_grid(wy))
        return out.reshape(shape)

    def _bilinear_adjoint_first(self, v, w):
        # <(x.grad) v, w> = <x, g> with g_j = sum_i w_i d_j v_i
        self._check_real(v, "first argument")
        self._check_real(w, "second argument")
        shape, (v, w) = self._prep(v, w)
        wx, wy = self._to_grid(w * self.ex), self._to_grid(w * self.ey)
        vx, vy = v * self.ex, v * self.ey
        gx = wx * self._to_grid(1j * self.kx * vx) + wy * self._to_grid(1j * self.kx * vy)
        gy = wx * self._to_grid(1j * self.ky * vx) + wy * self._to_grid(1j * self.ky * vy)
        out = self._project(self._from_grid(gx), self._from_grid(gy))
        return out.reshape(shape)


def make_model(kind: str, n: int, shift: bool = False, r_tilde: RTilde | None = None, **params) -> Model:
    """Construct a model from its kind name (``goy``, ``sabra``, ``dyadic``,
    ``nse2d`` or ``linear``)."""
    kind = kind.lower()
    if kind == "goy":
        return GOY(n, shift=shift, r_tilde=r_tilde, **params)
    if kind == "sabra":
        return Sabra(n, shift=shift, r_tilde=r_tilde, **params)
    if kind == "dyadic":
        return Dyadic(n, shift=shift, r_tilde=r_tilde, **params)
    if kind == "nse2d":
        return NSE2D(n, shift=shift, r_tilde=r_tilde, **params)
    if kind == "linear":
        weights = params.pop("weights")
        if params:
            raise TypeError(f"unexpected parameters for linear model: {sorted(params)}")
        w = np.atleast_1d(weights)
        if w.size == 1 and n > 1:
            w = np.full(n, float(w[0]))
        if w.size != n:
            raise DimensionError("linear weights", w.size, n)
        return LinearDiagonal(w, shift=shift, r_tilde=r_tilde)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


@dataclass(frozen=True)
class AntisymmetryReport:
    max_abs_residual: float
    max_rel_residual: float
    max_energy_residual: float
    passed: bool


def verify_antisymmetry(m: Model, n_samples: int, seed: int, tol: float = 1e-10) -> AntisymmetryReport:
    """Sample ``<B(u1,u2),u3> + <B(u1,u3),u2>`` over random unit triples.

    The relative residual divides by ``|B(u1,u2)||u3| + |B(u1,u3)||u2|``, an
    upper bound of both terms.  ``max_energy_residual`` is the relative size
    of ``<B(u,u),u>`` on the same samples.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    u = m.random_state(rng, (3, n_samples))
    u /= np.sqrt(np.sum(np.abs(u) ** 2, axis=-1, keepdims=True))
    u1, u2, u3 = u
    b12, b13 = m.apply_B(u1, u2), m.apply_B(u1, u3)
    t123, t132 = pairing(b12, u3), pairing(b13, u2)
    res = np.abs(t123 + t132)
    scale = np.linalg.norm(b12, axis=-1) * np.linalg.norm(u3, axis=-1) + np.linalg.norm(b13, axis=-1) * np.linalg.norm(u2, axis=-1)
    rel = res / np.where(scale > 0, scale, 1.0)
    b11 = m.apply_B(u1, u1)
    e_scale = np.linalg.norm(b11, axis=-1) * np.linalg.norm(u1, axis=-1)
    e_rel = np.abs(pairing(b11, u1)) / np.where(e_scale > 0, e_scale, 1.0)
    max_rel = float(np.max(rel))
    max_e = float(np.max(e_rel))
    return AntisymmetryReport(float(np.max(res)), max_rel, max_e, max_rel <= tol and max_e <= tol)


def _real_basis(m: Model) -> np.ndarray:
    """Orthonormal real basis of the admissible state space, as rows."""
    dim = 2 * m.n if m.complex_state and m.kind != "nse2d" else m.n
    return m.noise_basis(dim).T


def estimate_bound_constant(
    m: Model, n_samples: int, seed: int, s: float = 0.25, triples=None, method: str = "auto", refine: int = 3
) -> float:
    """Empirical ``C`` in ``|<B(u1,u2),u3>| <= C ||u1||_s ||u2|| ||u3||_s``.

    ``method="operator"`` samples ``u1`` only and takes the exact supremum
    over ``(u2, u3)``: the largest singular value of the weighted real matrix
    of ``B(u1, .)``; the ``refine`` best starts are then improved by
    alternating ascent in ``u1``.  ``method="sampling"`` maximizes over random triples.
    ``auto`` picks the operator route when the real state dimension is at
    most 256.  ``triples`` (three stacked arrays ``(n_samples, n)``) forces
    sampling over the given triples.  Zero denominators are skipped; ``nan``
    is returned if nothing is left.
    """
    g = m.gelfand(s)
    if triples is not None:
        u1, u2, u3 = (np.asarray(x) for x in zip(*triples)) if isinstance(triples, list) else (np.asarray(x) for x in triples)
        return _sampled_ratio(m, g, u1, u2, u3)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    E = _real_basis(m)
    if method == "auto":
        method = "operator" if E.shape[0] <= 256 else "sampling"
    if method == "sampling":
        u1, u2, u3 = m.random_state(rng, (3, n_samples))
        return _sampled_ratio(m, g, u1, u2, u3)
    if method != "operator":
        raise ValueError(f"unknown method {method!r}")
    w = g.v_norm2(E)
    ws = g.interp_norm2(E)

    def inner(u1):
        # exact sup over (u2, u3) for fixed u1, plus the maximizing pair
        cols = m.apply_B(np.broadcast_to(u1, E.shape), E)
        M = pairing(E[:, None, :], cols[None, :, :]) / np.sqrt(ws)[:, None] / np.sqrt(w)[None, :]
        U, S, Vt = np.linalg.svd(M)
        u2 = (Vt[0] / np.sqrt(w)) @ E
        u3 = (U[:, 0] / np.sqrt(ws)) @ E
        return S[0] / np.sqrt(g.interp_norm2(u1)), u2, u3

    starts = [u for u in m.random_state(rng, n_samples) if g.interp_norm2(u) > 0]
    if not starts:
        return float("nan")
    screened = sorted(((inner(u)[0], i) for i, u in enumerate(starts)), reverse=True)
    best = screened[0][0]
    # alternating ascent from the strongest starts: for fixed (u2, u3) the
    # best u1 is the weighted dual of the first-slot adjoint
    for _, i in screened[:refine]:
        u1 = starts[i]
        for _ in range(40):
            r, u2, u3 = inner(u1)
            best = max(best, r)
            G = m.apply_B_adjoint_first(u2, u3)
            coef = pairing(E, G) / ws
            nxt = coef @ E
            if not np.any(nxt):
                break
            u1 = nxt / np.sqrt(g.interp_norm2(nxt))
    return float(best)


def _sampled_ratio(m, g, u1, u2, u3) -> float:
    denom = np.sqrt(g.interp_norm2(u1) * g.v_norm2(u2) * g.interp_norm2(u3))
    ok = denom > 0
    if not np.any(ok):
        return float("nan")
    num = np.abs(m.trilinear(u1[ok], u2[ok], u3[ok]))
    return float(np.max(num / denom[ok]))
