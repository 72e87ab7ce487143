import numpy as np
import pytest

from cvpo.envs import TabularCMDP, TabularHazardGrid
from cvpo.oracle import exact_policy_eval, solve_constrained_lp
from cvpo.tabular import run_tabular_cvpo


@pytest.fixture(scope="module")
def grid_run():
    mdp = TabularHazardGrid(gamma=0.9).to_tabular()
    return mdp, run_tabular_cvpo(mdp, 0.95, iterations=150)


def test_reaches_lp_optimum(grid_run):
    mdp, run = grid_run
    lp = solve_constrained_lp(mdp, 0.95)
    J_r, J_c = exact_policy_eval(mdp, run.policy.probs).returns(mdp.rho0)
    assert J_r >= 0.95 * lp.J_r
    assert J_c <= 1.05 * 0.95


def test_surrogate_chain_and_cost_bound_hold(grid_run):
    _, run = grid_run
    checked, bad = run.elbo_checks()
    assert checked > 50 and bad == 0
    checked, bad = run.cost_bound_checks()
    assert checked > 0 and bad == 0


def test_mstep_kl_within_budget(grid_run):
    _, run = grid_run
    assert np.all(run.column("mstep_kl") <= 0.01 + 1e-9)


def test_starts_infeasible_and_recovers(grid_run):
    _, run = grid_run
    J_c = run.column("J_c")
    assert J_c[0] > 0.95
    assert np.all(J_c[-20:] <= 0.95 * 1.05)


def test_unconstrained_budget_matches_value_iteration():
    mdp = TabularHazardGrid(gamma=0.9).to_tabular()
    lp = solve_constrained_lp(mdp, np.inf)
    run = run_tabular_cvpo(mdp, 1e3, iterations=150)
    assert run.iterations[-1].J_r == pytest.approx(lp.J_r, rel=1e-3)
    assert np.all(run.column("lam") <= 1e-6)


def test_callback_sees_every_iteration():
    P = np.zeros((2, 2, 2))
    P[:, 0, 0] = 1
    P[:, 1, 1] = 1
    mdp = TabularCMDP(P, np.array([[0.0, 1.0], [0.0, 1.0]]), np.array([[0.0, 1.0], [0.0, 1.0]]),
                      np.array([1.0, 0.0]), 0.5)
    seen = []
    run = run_tabular_cvpo(mdp, 1.0, iterations=7, callback=seen.append)
    assert len(seen) == 7 and seen == run.iterations
