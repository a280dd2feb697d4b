import numpy as np
import pytest

from ddcsense import dp
from ddcsense.errors import ContractError
from ddcsense.estimate import ccp_frequency_estimate, nfxp_estimate
from ddcsense.zurcher import (CounterfactualSpec, ZurcherConfig, analytic_derivative_bank,
                              build_transitions, counterfactual_welfare, estimate_transition_probs,
                              flow_utility, simulate_panel)

from oracles import derivative_bank_errors, random_bank_point


def test_transitions_rows():
    q0, q1 = build_transitions(ZurcherConfig(num_states=4, phi1=0.3, phi2=0.1))
    np.testing.assert_allclose(q0[0], [0.6, 0.3, 0.1, 0.0])
    np.testing.assert_allclose(q0[2], [0, 0, 0.7, 0.3])
    np.testing.assert_allclose(q0[3], [0, 0, 0, 1])
    np.testing.assert_array_equal(q1[1], [1, 0, 0, 0])
    assert np.linalg.matrix_rank(q1) == 1


def test_config_validation():
    with pytest.raises(ContractError):
        ZurcherConfig(phi1=0.7, phi2=0.5)
    with pytest.raises(ContractError):
        ZurcherConfig(num_states=2)


def test_config_roundtrip(tmp_path):
    cfg = ZurcherConfig(num_states=12, phi1=0.25, phi2=0.05, mc=0.011, rc=9.5, beta=0.975)
    path = tmp_path / "model.cfg"
    cfg.write(path)
    assert ZurcherConfig.read(path) == cfg


def test_flow_utility_examples():
    cfg = ZurcherConfig(num_states=90)
    assert flow_utility(cfg, (0.01, 8.0), 0, 90) == pytest.approx(7.1)
    assert all(flow_utility(cfg, (0.3, 2.0), 1, x) == 0.0 for x in range(1, 91))
    assert flow_utility(cfg, (0.0, 3.0), 0, 1) == flow_utility(cfg, (0.0, 3.0), 0, 90) == 3.0


def test_one_period_finite_dependence_identity():
    for x in (3, 10, 90):
        q0, q1 = build_transitions(ZurcherConfig(num_states=x))
        np.testing.assert_array_equal(q0 @ q1, q1 @ q1)


@pytest.mark.parametrize("seed", range(5))
def test_derivative_bank_matches_fd(seed):
    cfg = ZurcherConfig(num_states=10)
    errs = derivative_bank_errors(cfg, *random_bank_point(np.random.default_rng(seed), cfg))
    assert max(errs.values()) <= 1e-6, errs


def test_derivative_bank_zero_cases():
    cfg = ZurcherConfig(num_states=6)
    counts = np.ones((6, 2))
    # huge replacement advantage makes p(x) = 1 numerically
    bank = analytic_derivative_bank(cfg, np.array([0.0, -800.0]), np.zeros(6), counts=counts)
    np.testing.assert_array_equal(bank.F_t, 0.0)
    bank0 = analytic_derivative_bank(cfg, np.array([0.05, 5.0]), np.ones(6), counts=counts, beta=0.0)
    np.testing.assert_array_equal(bank0.F_v, 0.0)


def test_derivative_bank_shape_contract():
    with pytest.raises(ContractError):
        analytic_derivative_bank(ZurcherConfig(num_states=6), np.zeros(3), np.zeros(6),
                                 counts=np.ones((6, 2)))


def test_simulation_deterministic_and_monotone():
    cfg = ZurcherConfig()
    a = simulate_panel(cfg, 50, 40, seed=9)
    b = simulate_panel(cfg, 50, 40, seed=9)
    np.testing.assert_array_equal(a.state, b.state)
    np.testing.assert_array_equal(a.action, b.action)
    big = simulate_panel(cfg, 500, 400, seed=1)
    counts = big.counts(cfg.num_states, 2)
    freq = counts[:, 1] / np.maximum(counts.sum(axis=1), 1)
    high = counts[10:].sum(axis=0)
    assert high[1] / high.sum() > freq[0]


def test_frequency_ccps_converge_to_model():
    # every state is visited often enough for a 0.01 sup-norm bound
    cfg = ZurcherConfig(num_states=5, mc=0.5, rc=2.5)
    data = simulate_panel(cfg, 2000, 500, seed=3)
    assert data.counts(5, 2).sum(axis=1).min() > 10_000
    m = cfg.model()
    p = dp.ccp_from_values(m, cfg.theta, dp.solve_value_function(m, cfg.theta))
    p_hat = ccp_frequency_estimate(data, cfg.num_states)
    assert np.max(np.abs(p_hat - p)) < 0.01


def test_transition_probs_recovered():
    cfg = ZurcherConfig()
    data = simulate_panel(cfg, 200, 200, seed=4)
    phi1, phi2 = estimate_transition_probs(data, cfg.num_states)
    assert phi1 == pytest.approx(0.35, abs=0.02) and phi2 == pytest.approx(0.10, abs=0.02)


def test_mle_error_shrinks_with_sample_size():
    cfg = ZurcherConfig()
    errs = []
    for units in (20, 500):
        data = simulate_panel(cfg, units, 200, seed=11)
        sol = nfxp_estimate(cfg.model(), data)
        errs.append(np.max(np.abs(sol.theta_hat - cfg.theta) / cfg.theta))
    assert errs[1] < errs[0]


def test_welfare_examples():
    cfg = ZurcherConfig(num_states=10, mc=0.1, rc=5.0)
    m = cfg.model()
    assert counterfactual_welfare(m, cfg.theta, CounterfactualSpec.identity()) == pytest.approx(0, abs=1e-10)
    assert counterfactual_welfare(m, cfg.theta, CounterfactualSpec.scale_maintenance(0.9)) > 0
    m0 = m.with_beta(0.0)
    spec = CounterfactualSpec.scale_maintenance(0.9)
    u, u_cf = m0.utility(cfg.theta), m0.utility(spec.apply(cfg.theta))
    expected = np.mean(np.log(np.exp(u_cf).sum(axis=1)) - np.log(np.exp(u).sum(axis=1)))
    assert counterfactual_welfare(m0, cfg.theta, spec) == pytest.approx(expected, abs=1e-12)


def test_counterfactual_spec_contract():
    with pytest.raises(ContractError):
        CounterfactualSpec(np.eye(3), np.zeros(2))
    with pytest.raises(ContractError):
        CounterfactualSpec.identity(3).apply(np.zeros(2))
