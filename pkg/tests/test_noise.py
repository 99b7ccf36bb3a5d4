import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hydroldp import ControlPath, CovarianceSpec, DimensionError, GelfandTriple, SigmaSpec
from hydroldp import check_sigma_conditions, control_energy, lq_norm, sample_wiener_increment
from hydroldp.models import Dyadic, make_model
from hydroldp.noise import Rho, additive_sigma, apply_sigma


@pytest.mark.parametrize("dt", [0.01, 0.0025])
def test_wiener_increment_variance(dt):
    cov = CovarianceSpec([1.0, 0.25])
    rng = np.random.default_rng(7)
    dW = sample_wiener_increment(cov, dt, rng, size=100_000)
    var = dW.var(axis=0)
    # standard error of a Gaussian sample variance is var sqrt(2/N)
    se = cov.q * dt * np.sqrt(2 / 1e5)
    assert np.all(np.abs(var - cov.q * dt) <= 3 * se)
    assert np.all(np.abs(dW.mean(axis=0)) <= 3 * np.sqrt(cov.q * dt / 1e5))


def test_wiener_increment_zero_dt_is_zero():
    dW = sample_wiener_increment(CovarianceSpec([1.0, 2.0]), 0.0, np.random.default_rng(0), size=5)
    assert dW.shape == (5, 2) and np.all(dW == 0)


def test_wiener_increment_rejects_negative_dt():
    with pytest.raises(ValueError):
        sample_wiener_increment(CovarianceSpec([1.0]), -1e-3, np.random.default_rng(0))


def test_increments_on_disjoint_intervals_uncorrelated():
    cov = CovarianceSpec([1.0])
    rng = np.random.default_rng(3)
    a = sample_wiener_increment(cov, 0.01, rng, size=50_000)[:, 0]
    b = sample_wiener_increment(cov, 0.02, rng, size=50_000)[:, 0]
    assert abs(np.corrcoef(a, b)[0, 1]) < 3 / np.sqrt(50_000)


@pytest.mark.parametrize("q", [[0.0], [-1.0], [1.0, np.nan], []])
def test_covariance_rejects_bad_spectrum(q):
    with pytest.raises(ValueError):
        CovarianceSpec(q)


def test_power_law_default():
    assert np.allclose(CovarianceSpec.power_law(3).q, [1.0, 0.25, 1 / 9])


def test_time_modulated_apply():
    phi = np.array([[1.0, 0.0], [2.0, 1.0]])
    s = SigmaSpec("time_modulated", phi, c_mod=1.0, gamma=0.5)
    psi = np.array([1.0, -1.0])
    # 1 + 4^(1/2) = 3
    assert np.allclose(apply_sigma(s, 4.0, np.zeros(2), psi), 3 * phi @ psi)


def test_additive_apply_ignores_state_and_time():
    phi = np.array([[1.0], [0.5]])
    s = SigmaSpec("additive", phi)
    assert np.array_equal(s.apply(0.0, np.zeros(2), [2.0]), s.apply(7.0, np.ones(2) * 40, [2.0]))


def test_diagonal_rows_scaled_by_rho():
    rho = Rho("clipped_linear", intercept=0.5, slope=1.0, cap=1.0)
    s = SigmaSpec("diagonal", np.eye(3), rho=rho)
    u = np.array([0.0, 0.25, 3.0])
    assert np.allclose(s.apply(0.0, u, np.ones(3)), [0.5, 0.75, 1.0])


def test_apply_dimension_mismatch():
    s = SigmaSpec("additive", np.eye(2))
    with pytest.raises(DimensionError):
        s.apply(0.0, np.zeros(2), np.ones(3))


def test_sigma_rejects_bad_gamma_and_kind():
    with pytest.raises(ValueError):
        SigmaSpec("time_modulated", np.eye(2), gamma=1.5)
    with pytest.raises(ValueError):
        SigmaSpec("multiplicative", np.eye(2))


def test_lq_norm_identity_two_modes():
    s = SigmaSpec("additive", np.eye(2))
    assert lq_norm(s, CovarianceSpec([1.0, 1.0]), 0.0, np.zeros(2)) == pytest.approx(np.sqrt(2))


def test_lq_norm_zero_sigma():
    s = SigmaSpec("additive", np.zeros((3, 2)))
    assert lq_norm(s, CovarianceSpec([1.0, 2.0]), 0.0, np.zeros(3)) == 0.0


@settings(max_examples=50, deadline=None)
@given(c=st.floats(-20, 20).filter(lambda x: x == 0 or abs(x) > 1e-100))
def test_lq_norm_homogeneous(c):
    rng = np.random.default_rng(0)
    phi = rng.standard_normal((4, 3))
    cov = CovarianceSpec([1.0, 0.5, 0.1])
    base = lq_norm(SigmaSpec("additive", phi), cov, 0.0, np.zeros(4))
    assert lq_norm(SigmaSpec("additive", c * phi), cov, 0.0, np.zeros(4)) == pytest.approx(abs(c) * base, rel=1e-12, abs=1e-300)


def test_lq_norm_uses_covariance_weights():
    phi = np.array([[1.0, 1.0]])
    assert lq_norm(SigmaSpec("additive", phi), CovarianceSpec([4.0, 0.25]), 0.0, np.zeros(1)) == pytest.approx(np.sqrt(4.25))


def test_control_energy_unit_control():
    h = ControlPath.constant([1.0, 1.0], T=1.0)
    assert control_energy(CovarianceSpec([1.0, 1.0]), h).energy == pytest.approx(2.0)


def test_control_energy_divides_by_q():
    h = ControlPath.constant([1.0], T=2.0, n_cells=4)
    assert control_energy(CovarianceSpec([0.25]), h).energy == pytest.approx(8.0)


@settings(max_examples=50, deadline=None)
@given(c=st.floats(-1e3, 1e3).filter(lambda x: x == 0 or abs(x) > 1e-100))
def test_control_energy_quadratic(c):
    cov = CovarianceSpec([1.0, 0.3])
    h = ControlPath(np.array([0.0, 0.3, 1.0]), np.array([[1.0, -2.0], [0.5, 0.25]]))
    assert control_energy(cov, h.scaled(c)).energy == pytest.approx(c * c * control_energy(cov, h).energy, rel=1e-12, abs=1e-300)


def test_control_energy_budget_membership():
    cov = CovarianceSpec([1.0])
    h = ControlPath.constant([1.0], T=1.0, budget=0.5)
    e = control_energy(cov, h)
    assert e.energy == pytest.approx(1.0) and not e.in_SM
    assert control_energy(cov, ControlPath.constant([1.0], 1.0, budget=2.0)).in_SM


def test_control_outside_rkhs_span_rejected():
    with pytest.raises(DimensionError):
        control_energy(CovarianceSpec([1.0]), ControlPath.constant([1.0, 1.0], 1.0))


def test_rkhs_pairing_duality():
    # (Q^(1/2) psi) has H_0 norm equal to |psi|
    rng = np.random.default_rng(5)
    cov = CovarianceSpec.power_law(6)
    psi = rng.standard_normal(6)
    assert cov.h0_norm2(cov.sqrt_q_apply(psi)) == pytest.approx(np.sum(psi**2), rel=1e-13)


def test_check_sigma_additive_reports_zero_constants():
    m = Dyadic(6)
    cov = CovarianceSpec.power_law(4)
    rep = check_sigma_conditions(additive_sigma(m, cov), cov, m.gelfand(), 300, seed=1)
    assert rep.passed
    assert (rep.K1_hat, rep.L1_hat, rep.holder_residual) == (0.0, 0.0, 0.0)
    assert rep.declared["K1"] == rep.declared["L1"] == rep.declared["K2"] == rep.declared["L2"] == 0.0


def test_check_sigma_flags_understated_constants():
    # a diagonal intensity whose declared Lipschitz bound is too small must fail
    class Lying(SigmaSpec):
        def declared_constants(self, cov, T):
            d = super().declared_constants(cov, T)
            d["L1"] = 0.0
            return d

    rho = Rho("clipped_linear", intercept=0.0, slope=2.0, cap=1.0)
    s = Lying("diagonal", np.eye(3), rho=rho)
    cov = CovarianceSpec.power_law(3)
    assert not check_sigma_conditions(s, cov, GelfandTriple([1.0, 2.0, 3.0]), 200, seed=0).passed


def test_check_sigma_rejects_gradient_dependence():
    s = SigmaSpec("additive", np.eye(2), K2=1.0)
    cov = CovarianceSpec([1.0, 1.0])
    assert not check_sigma_conditions(s, cov, GelfandTriple([1.0, 1.0]), 20, seed=0).passed


def test_control_path_save_load_round_trip(tmp_path):
    h = ControlPath(np.array([0.0, 0.1, 0.35, 1.0]), np.array([[1.0, -0.5], [1 / 3, 2.0], [0.0, 1e-17]]))
    back = ControlPath.load(h.save(tmp_path / "h.txt"))
    assert np.array_equal(back.grid, h.grid) and np.array_equal(back.values, h.values)


def test_control_path_load_errors(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("0.0 1.0\n0.5 oops\n1.0\n")
    with pytest.raises(ValueError, match=":2:"):
        ControlPath.load(p)
    p.write_text("0.0 1.0\n0.5 2.0\n")
    with pytest.raises(ValueError, match="horizon"):
        ControlPath.load(p)


def test_control_path_cell_mapping_on_nonuniform_grid():
    h = ControlPath(np.array([0.0, 0.003, 0.01]), np.array([[1.0], [2.0]]))
    steps = h.on_steps(1e-3, 10)[:, 0]
    assert np.array_equal(steps, [1, 1, 1, 2, 2, 2, 2, 2, 2, 2])


def test_control_path_horizon_mismatch():
    with pytest.raises(ValueError, match="horizon"):
        ControlPath.constant([1.0], T=1.0).on_steps(1e-3, 500)


def test_additive_sigma_for_nse_columns_are_real_modes():
    m = make_model("nse2d", 3)
    cov = CovarianceSpec.power_law(4)
    s = additive_sigma(m, cov)
    for j in range(4):
        assert m.pair_residual(s.phi[:, j]) < 1e-14
