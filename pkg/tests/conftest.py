import numpy as np
import pytest

from hydroldp import CovarianceSpec, SigmaSpec, make_model

# filled by test_acceptance; printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def linear1():
    """One mode, a = 1, q = 1, sigma = 1."""
    m = make_model("linear", 1, weights=1.0)
    cov = CovarianceSpec(np.array([1.0]))
    s = SigmaSpec("additive", np.ones((1, 1)))
    return m, s, cov


def zoo(nse_K=4):
    return [
        make_model("goy", 10),
        make_model("sabra", 10),
        make_model("dyadic", 8),
        make_model("nse2d", nse_K),
    ]


def linear_discrete_rate(a, q, dt, T, n_cells, z):
    """Exact minimum action of the discrete one-mode linear problem.

    ``u_N = sum_c h_c g_c`` with ``g_c = dt sum_{k in c} r^(N-k)`` and
    ``r = 1/(1 + a dt)``; minimizing ``1/2 sum h_c^2 w_c / q`` subject to
    ``u_N = z`` gives ``z^2 / (2 sum g_c^2 q / w_c)``.
    """
    N = int(round(T / dt))
    r = 1.0 / (1.0 + a * dt)
    edges = np.round(np.linspace(0, N, n_cells + 1)).astype(int)
    g = np.array([dt * np.sum(r ** (N - np.arange(lo, hi))) for lo, hi in zip(edges[:-1], edges[1:])])
    w = np.diff(edges) * dt
    return z * z / (2.0 * np.sum(g**2 * q / w))


def linear_discrete_variance(a, q, dt, T):
    """Variance of ``u_N`` for ``u_{k+1} = r (u_k + dW_k)`` started at zero."""
    N = int(round(T / dt))
    r = 1.0 / (1.0 + a * dt)
    return q * dt * float(np.sum(r ** (2 * np.arange(1, N + 1))))


def fd_relative_error(p, hv, mu, n_dirs=3, step=1e-5, seed=0):
    """Largest relative gap between adjoint and central-difference directional derivatives."""
    from hydroldp.ldp import _objective

    rng = np.random.default_rng(seed)
    grad = _objective(p, hv, mu)[3]
    worst = 0.0
    for _ in range(n_dirs):
        d = rng.standard_normal(hv.shape)
        fp = _objective(p, hv + step * d, mu, with_grad=False)[0]
        fm = _objective(p, hv - step * d, mu, with_grad=False)[0]
        fd = (fp - fm) / (2 * step)
        ad = float(np.sum(grad * d))
        worst = max(worst, abs(fd - ad) / max(abs(ad), 1e-300))
    return worst


# small configurations for every task, shared by the CLI and reproducibility tests
_LINEAR = """
seed = 5
[model]
kind = "linear"
n = 1
weights = 1.0
[noise]
K = 1
[integrator]
dt = 0.01
T = 1.0
"""

_DYADIC = """
seed = 5
[model]
kind = "dyadic"
n = 4
[noise]
K = 2
[integrator]
dt = 0.01
T = 0.5
[initial]
kind = "basis"
mode = 0
amplitude = 0.5
"""

TASK_CONFIGS = {
    "check-conditions": _DYADIC + '[task]\nname = "check-conditions"\nn_samples = 50\n',
    "simulate": _DYADIC.replace("T = 0.5", "T = 0.5\neps = 0.2\nsave_stride = 10")
    + '[task]\nname = "simulate"\nn_reps = 3\nrecord_noise = true\n',
    "skeleton": _DYADIC + '[task]\nname = "skeleton"\nh = [1.0, -0.5]\n',
    "action-min": _LINEAR + '[task]\nname = "action-min"\nn_cells = 5\n[task.event]\nkind = "halfspace"\ndirection = [1.0]\nthreshold = 0.5\n',
    "mc-ldp": _LINEAR
    + '[task]\nname = "mc-ldp"\nn_cells = 5\neps_list = [0.2, 0.1]\nn_samples = 300\n'
    + '[task.event]\nkind = "halfspace"\ndirection = [1.0]\nthreshold = 0.5\n',
    "increment-stat": _DYADIC.replace("T = 0.5", "T = 0.64\neps = 1.0")
    + '[task]\nname = "increment-stat"\nn_reps = 20\nlevels = [2, 3, 4]\n',
    "weak-scan": _DYADIC + '[task]\nname = "weak-scan"\neps_list = [0.2, 0.1]\nn_reps = 10\n',
}
