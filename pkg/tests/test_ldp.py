import warnings

import numpy as np
import pytest
from scipy.stats import norm

from hydroldp import (
    ActionProblem, ControlPath, CovarianceSpec, Event, SigmaSpec, action, discrete_adjoint_gradient,
    girsanov_weight, mc_probability, minimize_action, rate_scan, sample_wiener_increment,
)
from hydroldp.ldp import feasible_action, penalized_objective
from hydroldp.models import Dyadic, make_model
from hydroldp.noise import Rho, additive_sigma

from conftest import fd_relative_error, linear_discrete_rate, linear_discrete_variance, zoo


def _linear_problem(linear1, dt=1e-2, n_cells=10, z=1.0, **kw):
    m, s, cov = linear1
    return ActionProblem(m, s, cov, [0.0], 1.0, Event.halfspace([1.0], z), dt=dt, n_cells=n_cells, **kw)


def test_action_of_constant_control():
    cov = CovarianceSpec([0.5, 2.0])
    h = ControlPath.constant([1.0, 2.0], T=2.0)
    # 1/2 * 2 * (1/0.5 + 4/2)
    assert action(cov, h) == pytest.approx(4.0)


def test_action_scales_quadratically():
    cov = CovarianceSpec.power_law(3)
    h = ControlPath(np.array([0.0, 0.2, 1.0]), np.array([[1.0, 2.0, 3.0], [-1.0, 0.0, 0.5]]))
    for c in (0.0, -1.5, 7.0):
        assert action(cov, h.scaled(c)) == pytest.approx(c * c * action(cov, h), rel=1e-13)


@pytest.mark.parametrize("m", zoo(), ids=repr)
def test_adjoint_gradient_matches_finite_differences(m):
    cov = CovarianceSpec.power_law(3)
    s = additive_sigma(m, cov)
    xi = 0.3 * m.noise_basis(1)[:, 0]
    ev = Event.halfspace(m.noise_basis(2)[:, 1], 2.0)
    p = ActionProblem(m, s, cov, xi, 0.2, ev, dt=2e-3, n_cells=8)
    hv = np.random.default_rng(1).standard_normal((8, 3))
    assert fd_relative_error(p, hv, 50.0) <= 1e-5


@pytest.mark.parametrize("kind", ["diagonal", "time_modulated"])
def test_adjoint_gradient_state_and_time_dependent_sigma(kind):
    m = Dyadic(5)
    cov = CovarianceSpec.power_law(3)
    phi = m.noise_basis(3)
    s = SigmaSpec(kind, phi, rho=Rho("clipped_linear", 0.5, 0.8, 2.0), c_mod=0.7, gamma=0.5)
    p = ActionProblem(m, s, cov, 0.2 * m.basis_vector(0), 0.3, Event.point(0.5 * m.basis_vector(1)), dt=1e-3, n_cells=6)
    hv = np.random.default_rng(2).standard_normal((6, 3))
    assert fd_relative_error(p, hv, 30.0) <= 1e-5


def test_gradient_without_penalty_is_action_gradient(linear1):
    p = _linear_problem(linear1)
    h = p.control(np.arange(10.0))
    g = discrete_adjoint_gradient(p, h, mu=0.0)
    assert np.allclose(g, h.values * p.cell_widths[:, None] / linear1[2].q)
    assert penalized_objective(p, h, 0.0) == pytest.approx(action(linear1[2], h))


def test_gradient_rejects_foreign_grid(linear1):
    p = _linear_problem(linear1)
    with pytest.raises(ValueError):
        discrete_adjoint_gradient(p, ControlPath.zeros(1.0, 5, 1))


def test_minimizer_matches_discrete_linear_oracle(linear1):
    p = _linear_problem(linear1, mu_schedule=(10.0, 1e3, 1e5, 1e7))
    res = minimize_action(p)
    assert res.converged
    assert res.action_value == pytest.approx(linear_discrete_rate(1.0, 1.0, 1e-2, 1.0, 10, 1.0), rel=1e-5)


def test_minimizer_close_to_continuous_rate(linear1):
    # G(T) = q (1 - e^{-2aT}) / (2a) with a = q = T = 1
    p = _linear_problem(linear1, dt=2e-3, n_cells=20, z=0.8)
    res = minimize_action(p)
    exact = 0.64 / (1 - np.exp(-2.0))
    assert res.action_value == pytest.approx(exact, rel=5e-3)


def test_minimizer_stages_monotone(linear1):
    res = minimize_action(_linear_problem(linear1))
    fa = [st["feasible_action"] for st in res.stages]
    viol = [st["violation"] for st in res.stages]
    assert all(b <= a * (1 + 1e-9) for a, b in zip(fa, fa[1:]))
    assert all(b <= a + 1e-15 for a, b in zip(viol, viol[1:]))
    assert res.iterations >= len(res.stages)


def test_free_event_has_zero_rate(linear1):
    m, s, cov = linear1
    p = ActionProblem(m, s, cov, [0.3], 1.0, Event("free"), dt=1e-2, n_cells=5)
    res = minimize_action(p)
    assert res.action_value == 0.0 and np.all(res.h_star.values == 0)


def test_reachable_without_control_has_zero_rate(linear1):
    m, s, cov = linear1
    p = ActionProblem(m, s, cov, [2.0], 1.0, Event.halfspace([1.0], 0.5), dt=1e-2, n_cells=5)
    assert minimize_action(p).action_value == pytest.approx(0.0, abs=1e-12)


def test_rate_scales_with_threshold_squared(linear1):
    a = minimize_action(_linear_problem(linear1, z=1.0)).action_value
    b = minimize_action(_linear_problem(linear1, z=2.0)).action_value
    assert b == pytest.approx(4 * a, rel=1e-3)


def test_nonconvergence_warns(linear1):
    p = _linear_problem(linear1, mu_schedule=(1.0,), max_iter=1, restarts=0)
    with pytest.warns(RuntimeWarning, match="did not reach"):
        res = minimize_action(p)
    assert not res.converged


def test_feasible_action_is_upper_bound(linear1):
    p = _linear_problem(linear1)
    hv = np.ones((10, 1))
    assert feasible_action(p, hv) >= linear_discrete_rate(1.0, 1.0, 1e-2, 1.0, 10, 1.0) * (1 - 1e-12)


def test_problem_validation(linear1):
    m, s, cov = linear1
    ev = Event.halfspace([1.0], 1.0)
    with pytest.raises(ValueError, match="mu_schedule"):
        ActionProblem(m, s, cov, [0.0], 1.0, ev, dt=1e-2, mu_schedule=(10.0, 5.0))
    with pytest.raises(ValueError, match="n_cells"):
        ActionProblem(m, s, cov, [0.0], 1.0, ev, dt=1e-1, n_cells=32)
    with pytest.raises(ValueError, match="K2"):
        ActionProblem(m, SigmaSpec("additive", np.ones((1, 1)), K2=1.0), cov, [0.0], 1.0, ev, dt=1e-2)


def test_event_validation():
    with pytest.raises(ValueError):
        Event("halfspace")
    with pytest.raises(ValueError):
        Event("cone", direction=np.ones(1))


def test_girsanov_zero_control_weight_one():
    cov = CovarianceSpec([1.0, 0.5])
    noise = np.random.default_rng(0).standard_normal((4, 10, 2))
    assert np.array_equal(girsanov_weight(cov, np.zeros((10, 2)), noise, 0.1), np.ones(4))


def test_girsanov_hand_exponent():
    cov = CovarianceSpec([2.0])
    lw = girsanov_weight(cov, np.array([[1.0], [1.0]]), np.array([[0.1], [-0.3]]), 0.5, log=True)
    # -(0.1 - 0.3)/2 - 0.5 * 0.5 * (1/2 + 1/2)
    assert lw == pytest.approx(-0.15, rel=1e-14)


def test_girsanov_weight_has_unit_mean():
    cov = CovarianceSpec([1.0, 0.25])
    dt, n_steps, R = 0.05, 20, 40_000
    h = ControlPath(np.array([0.0, 0.5, 1.0]), np.array([[1.0, -0.5], [0.5, 0.25]]))
    noise = sample_wiener_increment(cov, dt, np.random.default_rng(11), size=(R, n_steps))
    w = girsanov_weight(cov, h, noise, dt)
    assert abs(w.mean() - 1.0) <= 4 * w.std() / np.sqrt(R)


def test_girsanov_rejects_misaligned_control():
    cov = CovarianceSpec([1.0])
    h = ControlPath(np.array([0.0, 0.33, 1.0]), np.zeros((2, 1)))
    with pytest.raises(ValueError, match="aligned"):
        girsanov_weight(cov, h, np.zeros((10, 1)), 0.1)


def test_whole_space_probability_one(linear1):
    m, s, cov = linear1
    p = ActionProblem(m, s, cov, [0.0], 1.0, Event("free"), dt=0.1, n_cells=1)
    r = mc_probability(p, 0.5, 50, seed=0)
    assert r.p_hat == 1.0 and r.std_err == 0.0 and r.n_hits == 50


def test_plain_mc_matches_gaussian_tail(linear1):
    p = _linear_problem(linear1, z=0.5)
    eps = 0.1
    exact = norm.sf(0.5 / np.sqrt(eps * linear_discrete_variance(1.0, 1.0, 1e-2, 1.0)))
    r = mc_probability(p, eps, 20_000, seed=3)
    assert abs(r.p_hat - exact) <= 3 * r.std_err
    assert not r.tilted and r.effective_hits == pytest.approx(r.n_hits)


def test_tilted_mc_matches_gaussian_tail(linear1):
    p = _linear_problem(linear1)
    eps = 0.05
    exact = norm.sf(1.0 / np.sqrt(eps * linear_discrete_variance(1.0, 1.0, 1e-2, 1.0)))
    h = minimize_action(p).h_star
    r = mc_probability(p, eps, 4000, tilt=h, seed=4)
    assert r.tilted and r.effective_hits >= 100
    assert abs(r.p_hat - exact) <= 3 * r.std_err


def test_mc_deterministic_given_seed(linear1):
    p = _linear_problem(linear1, z=0.3)
    a = mc_probability(p, 0.2, 500, seed=9)
    b = mc_probability(p, 0.2, 500, seed=9, workers=2)
    assert a == b


def test_zero_hits_reports_upper_bound(linear1):
    p = _linear_problem(linear1, z=10.0)
    with pytest.warns(RuntimeWarning, match="no hits"):
        r = mc_probability(p, 0.01, 100, seed=0)
    assert r.p_hat == 0.0 and r.n_hits == 0
    assert r.upper_bound == pytest.approx(1 - 0.05 ** (1 / 100))


def test_mc_rejects_nonpositive_eps(linear1):
    with pytest.raises(ValueError):
        mc_probability(_linear_problem(linear1), 0.0, 10)


def test_rate_scan_rows(linear1):
    p = _linear_problem(linear1, z=0.6)
    mini = minimize_action(p)
    scan = rate_scan(p, [0.2, 0.1], 2000, seed=1, minimizer=mini)
    assert all(r.I_star == mini.action_value for r in scan.rows)
    assert not any(r.censored for r in scan.rows)
    for r in scan.rows:
        assert r.neg_eps_log_p == pytest.approx(-r.eps * np.log(r.p_hat))
    assert np.isfinite(scan.extrapolated_rate)


def test_rate_scan_censored_row(linear1):
    p = _linear_problem(linear1, z=3.0)
    mini = minimize_action(p)
    scan = rate_scan(p, [0.01], 50, minimizer=mini, tilt=None)
    row = scan.rows[0]
    assert row.censored and row.n_hits == 0
    assert row.neg_eps_log_p == pytest.approx(-0.01 * np.log(1 - 0.05 ** (1 / 50)))
    assert np.isnan(scan.extrapolated_rate)


def test_rate_scan_rejects_unsorted_eps(linear1):
    with pytest.raises(ValueError):
        rate_scan(_linear_problem(linear1), [0.1, 0.2], 10)


def test_exact_linear_rate_sequence_monotone_toward_rate(linear1):
    # the Gaussian tail itself: -eps log P decreases to z^2 / (2 var) as eps -> 0
    G = linear_discrete_variance(1.0, 1.0, 1e-2, 1.0)
    I = 1.0 / (2 * G)
    eps = np.array([0.4, 0.2, 0.1, 0.05, 0.02, 0.01])
    rates = -eps * norm.logsf(1.0 / np.sqrt(eps * G))
    assert np.all(np.diff(rates) < 0) and np.all(rates > I)
    assert rates[-1] == pytest.approx(I, rel=0.05)
