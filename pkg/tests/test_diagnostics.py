import math

import numpy as np
import pytest

from cvpo import estep
from cvpo.diagnostics import (
    DiagnosticsConfig,
    cost_bound,
    delta_c,
    elbo_estimate,
    lambert_w,
    robustness_margin,
    tabular_elbo,
    two_step_kl_bound,
)
from helpers import random_particles


def test_elbo_uniform_weights_is_mean_reward():
    rng = np.random.default_rng(0)
    ps = random_particles(rng, 4, 5)
    W = np.full((4, 5), 0.2)
    assert elbo_estimate(ps, W, alpha=0.7) == pytest.approx(float(ps.qr.mean()), abs=1e-12)


def test_elbo_alpha_zero_is_weighted_reward():
    rng = np.random.default_rng(1)
    ps = random_particles(rng, 3, 6)
    W = rng.dirichlet(np.ones(6), size=3)
    assert elbo_estimate(ps, W, alpha=0.0) == float(ps.state_weights @ (W * ps.qr).sum(1))


def test_elbo_penalizes_divergence():
    rng = np.random.default_rng(2)
    ps = random_particles(rng, 3, 4)
    W = rng.dirichlet(np.ones(4), size=3)
    kl = (W * (np.log(W) - ps.log_base)).sum(1)
    expected = float(ps.state_weights @ ((W * ps.qr).sum(1) - 0.3 * kl))
    assert elbo_estimate(ps, W, alpha=0.3) == pytest.approx(expected, abs=1e-12)


def test_elbo_accepts_weight_objects():
    rng = np.random.default_rng(3)
    ps = random_particles(rng, 2, 3)
    res = estep.run_estep(ps, float(ps.qc.max()) + 1.0, 0.1)
    assert elbo_estimate(ps, res.weights) == elbo_estimate(ps, res.weights.W)


def test_tabular_elbo_matches_symbolic_sum():
    rng = np.random.default_rng(4)
    q = rng.dirichlet(np.ones(3), size=4)
    pi = rng.dirichlet(np.ones(3), size=4)
    Q = rng.normal(size=(4, 3))
    rho = rng.dirichlet(np.ones(4))
    expected = 0.0
    for s in range(4):
        for a in range(3):
            expected += rho[s] * q[s, a] * (Q[s, a] - 0.5 * math.log(q[s, a] / pi[s, a]))
    assert tabular_elbo(np.log(q), np.log(pi), Q, rho, 0.5) == pytest.approx(expected, abs=1e-10)


def test_diagnostics_config_rejects_nonpositive_alpha():
    with pytest.raises(ValueError):
        DiagnosticsConfig(alpha=0.0)
    assert DiagnosticsConfig().alpha is None


def test_cost_bound_examples():
    assert cost_bound(1.0, 0.99, 0.001, 0.05) == pytest.approx(1 + (0.01 + 0.99 * math.sqrt(0.002)) * 0.05 / 1e-4)
    assert cost_bound(1.0, 0.99, 0.001, 0.05) == pytest.approx(28.14, abs=5e-3)
    assert cost_bound(0.4, 0.9, 0.01, 0.0) == 0.4
    assert cost_bound(0.4, 0.9, 0.0, 0.2) == pytest.approx(0.4 + 0.2 / 0.1)


def test_cost_bound_rejects_bad_inputs():
    with pytest.raises(ValueError):
        cost_bound(1.0, 1.0, 0.1, 0.1)
    with pytest.raises(ValueError):
        cost_bound(1.0, 0.9, -0.1, 0.1)


def test_delta_c_zero_for_unchanged_policy():
    rng = np.random.default_rng(5)
    pi = rng.dirichlet(np.ones(4), size=6)
    Q = rng.uniform(size=(6, 4))
    assert delta_c(pi, Q, pi) == pytest.approx(0.0, abs=1e-15)
    other = rng.dirichlet(np.ones(4), size=6)
    gap = np.abs((other * (Q - (pi * Q).sum(1, keepdims=True))).sum(1))
    assert delta_c(other, Q, pi) == pytest.approx(gap.max())
    assert delta_c(other, Q, pi, states=[0, 1]) == pytest.approx(gap[:2].max())


def test_robustness_margin_examples():
    ok, m = robustness_margin(0.0011, 0.1, 1)
    assert ok and m == pytest.approx(0.0989)
    ok, m = robustness_margin(0.0011, 0.1, 2)
    assert ok and m == pytest.approx(0.0114)
    ok, m = robustness_margin(0.1, 0.1, 1)
    assert not ok and m == 0.0
    with pytest.raises(ValueError):
        robustness_margin(0.001, 0.1, 3)


def test_lambert_w_examples():
    assert lambert_w(0, -math.exp(-1)) == pytest.approx(-1.0, abs=1e-10)
    assert lambert_w(-1, -math.exp(-1)) == pytest.approx(-1.0, abs=1e-10)
    assert lambert_w(0, 0.0) == 0.0
    w = lambert_w(0, 1.0)
    assert w == pytest.approx(0.567143, abs=1e-6)
    assert abs(w * math.exp(w) - 1.0) <= 1e-12


@pytest.mark.parametrize("x", [-0.36, -0.3, -0.1, -1e-3, 1e-6, 0.5, 2.0, 10.0, 1e3])
def test_lambert_w_residual_principal(x):
    w = lambert_w(0, x)
    assert w >= -1.0
    assert abs(w * math.exp(w) - x) <= 1e-12 * max(1.0, abs(x))


@pytest.mark.parametrize("x", [-0.3678, -0.3, -0.1, -1e-3, -1e-8])
def test_lambert_w_residual_lower_branch(x):
    w = lambert_w(-1, x)
    assert w <= -1.0
    assert abs(w * math.exp(w) - x) <= 1e-12


def test_lambert_w_domain_errors():
    with pytest.raises(ValueError):
        lambert_w(0, -0.5)
    with pytest.raises(ValueError):
        lambert_w(-1, 0.1)
    with pytest.raises(ValueError):
        lambert_w(1, 0.1)


def test_two_step_kl_bound_examples():
    assert two_step_kl_bound(0.0) == 0.0
    assert 0.85 <= two_step_kl_bound(1e-4) / 8e-4 <= 1.15
    vals = [two_step_kl_bound(e) for e in np.linspace(0, 0.01, 20)]
    assert all(a < b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        two_step_kl_bound(-1e-3)
