import numpy as np
import pytest

from cvpo.envs import TabularCMDP, TabularHazardGrid
from cvpo.oracle import (
    InfeasibleError,
    bellman_residual,
    brute_force_estep,
    exact_policy_eval,
    solve_constrained_lp,
    value_iteration,
)


def single_state(r, c, gamma=0.0):
    r = np.asarray(r, float)[None]
    c = np.asarray(c, float)[None]
    A = r.shape[1]
    return TabularCMDP(np.ones((1, A, 1)), r, c, np.ones(1), gamma)


def test_lp_single_state_mixture():
    sol = solve_constrained_lp(single_state([1, 0], [1, 0]), 0.5)
    assert sol.policy[0, 0] == pytest.approx(0.5, abs=1e-9)
    assert sol.J_r == pytest.approx(0.5, abs=1e-9)


def test_lp_unconstrained_matches_value_iteration():
    mdp = TabularHazardGrid(gamma=0.9, p_slip=0.1).to_tabular()
    sol = solve_constrained_lp(mdp, np.inf)
    V, _ = value_iteration(mdp)
    assert sol.J_r == pytest.approx(float(mdp.rho0 @ V), abs=1e-8)


def test_lp_zero_budget_two_states():
    # state 0: safe action stays (r 0.1), risky action jumps to state 1 (r 1, c 1); state 1 absorbing
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = 1
    P[0, 1, 1] = 1
    P[1, :, 1] = 1
    r = np.array([[0.1, 1.0], [0.0, 0.0]])
    c = np.array([[0.0, 1.0], [0.0, 0.0]])
    mdp = TabularCMDP(P, r, c, np.array([1.0, 0.0]), 0.5)
    sol = solve_constrained_lp(mdp, 0.0)
    # enumerate deterministic zero-cost policies: only "always safe" qualifies
    assert sol.J_r == pytest.approx(0.1 / (1 - 0.5), abs=1e-9)
    assert sol.J_c <= 1e-8


def test_lp_infeasible():
    with pytest.raises(InfeasibleError) as err:
        solve_constrained_lp(single_state([1, 0], [1, 0.5]), 0.1)
    assert err.value.min_value == pytest.approx(0.5)


def test_lp_dominates_sample_policies():
    mdp = TabularHazardGrid(gamma=0.9).to_tabular()
    eps1 = 0.95
    sol = solve_constrained_lp(mdp, eps1)
    assert sol.J_c <= eps1 + 1e-8
    rng = np.random.default_rng(0)
    for _ in range(50):
        pi = rng.dirichlet(np.ones(4), size=mdp.num_states)
        J_r, J_c = exact_policy_eval(mdp, pi).returns(mdp.rho0)
        if J_c <= eps1:
            assert J_r <= sol.J_r + 1e-6


def test_policy_eval_gamma_zero():
    mdp = TabularHazardGrid(gamma=0.0).to_tabular()
    pi = np.full((mdp.num_states, 4), 0.25)
    q = exact_policy_eval(mdp, pi)
    np.testing.assert_array_equal(q.Q_r, mdp.r)


def test_policy_eval_constant_reward():
    S, A = 3, 2
    rng = np.random.default_rng(1)
    P = rng.dirichlet(np.ones(S), size=(S, A))
    mdp = TabularCMDP(P, np.ones((S, A)), np.zeros((S, A)), np.full(S, 1 / 3), 0.99)
    q = exact_policy_eval(mdp, np.full((S, A), 0.5))
    np.testing.assert_allclose(q.Q_r, 100.0, atol=1e-9)


def test_policy_eval_monte_carlo():
    S, A, gamma = 3, 2, 0.5
    rng = np.random.default_rng(2)
    P = np.zeros((S, A, S))
    for s in range(S):
        P[s, 0, (s + 1) % S] = 1.0
        P[s, 1, s] = 1.0
    r = rng.uniform(size=(S, A))
    mdp = TabularCMDP(P, r, np.zeros((S, A)), np.array([1.0, 0, 0]), gamma)
    pi = np.full((S, A), 0.5)
    exact = exact_policy_eval(mdp, pi).returns(mdp.rho0)[0]
    n, H = 200_000, 40
    s = np.zeros(n, dtype=int)
    ret = np.zeros(n)
    for t in range(H):
        a = rng.integers(0, 2, size=n)
        ret += gamma**t * r[s, a]
        s = np.where(a == 0, (s + 1) % S, s)
    se = ret.std() / np.sqrt(n)
    assert abs(ret.mean() - exact) <= 3 * se + gamma**H / (1 - gamma)


def test_bellman_residual_small():
    mdp = TabularHazardGrid(gamma=0.99, p_slip=0.2).to_tabular()
    pi = np.random.default_rng(3).dirichlet(np.ones(4), size=mdp.num_states)
    assert bellman_residual(mdp, pi, exact_policy_eval(mdp, pi)) <= 1e-10


def test_brute_force_constant_reward_returns_old():
    pi = np.array([0.2, 0.3, 0.5])
    res = brute_force_estep(pi, [1.0, 1.0, 1.0], [0.0, 1.0, 2.0], 5.0, 0.1)
    np.testing.assert_allclose(res.q, pi)


def test_brute_force_zero_trust_region():
    pi = np.array([0.5, 0.5])
    ok = brute_force_estep(pi, [1.0, 0.0], [1.0, 0.0], 0.6, 0.0)
    assert ok.feasible and np.allclose(ok.q, pi)
    bad = brute_force_estep(pi, [1.0, 0.0], [1.0, 0.0], 0.4, 0.0)
    assert not bad.feasible


def test_brute_force_constraints_hold():
    rng = np.random.default_rng(4)
    for _ in range(10):
        A = rng.integers(2, 6)
        pi = rng.dirichlet(np.ones(A))
        Qr, Qc = rng.normal(size=A), rng.uniform(size=A)
        eps1 = float(pi @ Qc)
        res = brute_force_estep(pi, Qr, Qc, eps1, 0.05)
        assert res.feasible
        q = res.q
        assert abs(q.sum() - 1) <= 1e-8 and q.min() >= 0
        assert q @ Qc <= eps1 + 1e-8
        kl = float(np.sum(np.where(q > 0, q * np.log(np.where(q > 0, q, 1) / pi), 0)))
        assert kl <= 0.05 + 1e-8


def test_batch_barrier_agrees_with_slsqp():
    rng = np.random.default_rng(5)
    for _ in range(4):
        B, A = 3, int(rng.integers(2, 5))
        pi = rng.dirichlet(np.ones(A), size=B)
        Qr, Qc = rng.normal(size=(B, A)), rng.uniform(size=(B, A))
        eps1 = 0.9 * float((pi * Qc).sum(1).mean())
        a = brute_force_estep(pi, Qr, Qc, eps1, 0.1)
        b = brute_force_estep(pi, Qr, Qc, eps1, 0.1, method="slsqp")
        assert a.feasible == b.feasible
        if a.feasible:
            assert a.objective == pytest.approx(b.objective, abs=1e-7)
            np.testing.assert_allclose(a.q, b.q, atol=1e-4)
            assert a.info["cost"] <= eps1 + 1e-9 and a.info["kl"] <= 0.1 + 1e-9


def test_batch_barrier_detects_infeasible():
    pi = np.full((2, 3), 1 / 3)
    Qc = np.array([[2.0, 3.0, 2.5], [4.0, 2.2, 3.0]])
    res = brute_force_estep(pi, np.zeros((2, 3)), Qc, 1.0, 1e-3)
    assert not res.feasible and res.min_cost > 1.0
