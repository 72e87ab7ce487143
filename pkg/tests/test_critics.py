import numpy as np
import pytest
import torch

from cvpo.critics import CriticPair, critic_target_pairs, polyak, td_update
from cvpo.envs import TabularCMDP, TabularHazardGrid
from cvpo.oracle import exact_policy_eval
from cvpo.policy import GaussianPolicy


def tabular_batch(mdp, terminal_state=None):
    """Every (s, a) pair of a deterministic MDP as one batch of one-hot transitions."""
    S, A = mdp.num_states, mdp.num_actions
    ss, aa = (x.ravel() for x in np.meshgrid(np.arange(S), np.arange(A), indexing="ij"))
    if terminal_state is not None:
        keep = ss != terminal_state
        ss, aa = ss[keep], aa[keep]
    s2 = mdp.P[ss, aa].argmax(axis=1)
    eye = np.eye(S)
    return dict(state=eye[ss], action=aa, next_state=eye[s2], reward=mdp.r[ss, aa], cost=mdp.c[ss, aa],
                terminal=(s2 == terminal_state) if terminal_state is not None else np.zeros(len(ss), bool))


def run_tabular_td(mdp, pi, gamma, iters, terminal_state=None, rho=0.0):
    batch = tabular_batch(mdp, terminal_state)
    n = len(batch["reward"])
    # lr = n/2 turns one SGD step on a bias-free table into an exact backup
    cr = CriticPair(mdp.num_states, num_actions=mdp.num_actions, hidden=(), lr=n / 2, optimizer="sgd")
    probs = pi[batch["next_state"].argmax(1)]
    for _ in range(iters):
        td_update(cr, batch, probs, gamma)
        polyak(critic_target_pairs(cr), rho)
    return cr.values(np.eye(mdp.num_states))


def test_gamma_zero_regresses_onto_reward():
    cr = CriticPair(3, act_dim=1, hidden=(16,), lr=1e-2, seed=0)
    pi = GaussianPolicy(3, 1, seed=0)
    batch = dict(state=np.ones((1, 3)), action=np.array([[0.2]]), next_state=np.zeros((1, 3)),
                 reward=np.array([1.0]), cost=np.array([0.0]), terminal=np.array([False]))
    for _ in range(3000):
        td_update(cr, batch, pi, 0.0, n_next=2, rng=np.random.default_rng(0))
    qr, qc = cr.values(batch["state"], batch["action"])
    assert abs(qr[0] - 1.0) < 1e-3
    assert qc[0] >= 0.0


def test_two_state_chain_fixed_point():
    P = np.zeros((2, 2, 2))
    P[0, :, 1] = 1
    P[1, :, 0] = 1
    r = np.array([[1.0, 0.0], [0.0, 2.0]])
    c = np.array([[0.0, 1.0], [1.0, 0.0]])
    mdp = TabularCMDP(P, r, c, np.array([1.0, 0.0]), 0.9)
    pi = np.array([[0.3, 0.7], [0.6, 0.4]])
    qr, qc = run_tabular_td(mdp, pi, 0.9, 400)
    ex = exact_policy_eval(mdp, pi)
    assert np.max(np.abs(qr - ex.Q_r)) < 1e-4
    assert np.max(np.abs(qc - ex.Q_c)) < 1e-4


def test_grid_fixed_point_at_high_discount():
    env = TabularHazardGrid(gamma=0.99)
    mdp = env.to_tabular()
    pi = np.full((mdp.num_states, 4), 0.25)
    g = env.index(env.goal)
    qr, qc = run_tabular_td(mdp, pi, 0.99, 1500, terminal_state=g)
    ex = exact_policy_eval(mdp, pi)
    live = np.arange(mdp.num_states) != g
    assert np.max(np.abs(qr - ex.Q_r)[live]) <= 1e-3
    assert np.max(np.abs(qc - ex.Q_c)[live]) <= 1e-3


def test_cost_free_environment():
    env = TabularHazardGrid(hazards=(), gamma=0.9)
    mdp = env.to_tabular()
    pi = np.full((mdp.num_states, 4), 0.25)
    batch = tabular_batch(mdp)
    cr = CriticPair(mdp.num_states, num_actions=4, hidden=(8,), lr=1e-2, seed=0)
    losses = []
    for _ in range(300):
        losses.append(td_update(cr, batch, pi[batch["next_state"].argmax(1)], 0.9)[1])
        polyak(critic_target_pairs(cr), 0.5)
    assert losses[-1] < 1e-6
    _, qc = cr.values(np.eye(mdp.num_states))
    assert np.all(qc >= 0) and qc.max() < 1e-2


def test_terminal_transition_uses_immediate_reward():
    cr = CriticPair(2, num_actions=2, hidden=(), lr=0.5, optimizer="sgd")
    with torch.no_grad():
        cr.qr_targ[0].weight.fill_(100.0)
    batch = dict(state=np.eye(2)[[0]], action=np.array([1]), next_state=np.eye(2)[[1]],
                 reward=np.array([1.0]), cost=np.array([0.0]), terminal=np.array([True]))
    td_update(cr, batch, np.array([[0.5, 0.5]]), 0.9)
    qr, _ = cr.values(np.eye(2)[[0]], np.array([1]))
    assert qr[0] == pytest.approx(1.0)


def test_qc_never_negative():
    cr = CriticPair(3, act_dim=2, hidden=(8,), seed=4)
    with torch.no_grad():
        cr.qc[-1].bias.fill_(-5.0)
    _, qc = cr.values(np.random.default_rng(0).normal(size=(20, 3)), np.zeros((20, 2)))
    assert np.all(qc >= 0)


def scalar_pair(target, online):
    t, o = torch.nn.Linear(1, 1, bias=False), torch.nn.Linear(1, 1, bias=False)
    with torch.no_grad():
        t.weight.fill_(target)
        o.weight.fill_(online)
    return t, o


@pytest.mark.parametrize("rho, expected", [(1.0, 0.0), (0.0, 1.0), (0.995, 0.005)])
def test_polyak_examples(rho, expected):
    t, o = scalar_pair(0.0, 1.0)
    polyak([(t, o)], rho)
    assert float(t.weight.detach()) == pytest.approx(expected, abs=1e-15)


def test_polyak_twice_equals_rho_squared():
    t1, o1 = scalar_pair(0.3, 1.7)
    t2, o2 = scalar_pair(0.3, 1.7)
    polyak([(t1, o1)], 0.9)
    polyak([(t1, o1)], 0.9)
    polyak([(t2, o2)], 0.81)
    assert float(t1.weight.detach()) == pytest.approx(float(t2.weight.detach()), abs=1e-14)


def test_polyak_rejects_bad_weight():
    t, o = scalar_pair(0.0, 1.0)
    with pytest.raises(ValueError):
        polyak([(t, o)], 1.5)
