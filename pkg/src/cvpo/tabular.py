"""CVPO with exact critics on a finite CMDP.

Every state is a particle block holding all actions, weighted by the current
policy's normalized discounted occupancy. Because the E-step's safety
constraint is written in critic units, the episode-level threshold is mapped
through the performance-difference identity

    J_c(q) - J_c(pi) ~= (rho_pi . (E_q Q_c - V_c)) / (1 - gamma)

so that ``J_c(q) <= eps1`` to first order becomes
``rho_pi . E_q Q_c <= rho_pi . V_c + (1 - gamma)(eps1 - J_c(pi))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import estep
from .diagnostics import cost_bound, delta_c, tabular_elbo
from .envs.tabular_mdp import TabularCMDP
from .mstep import exact_tabular_mstep
from .oracle import discounted_state_occupancy, exact_policy_eval
from .policy import TabularPolicy


@dataclass
class TabularIteration:
    J_r: float
    J_c: float
    eta: float
    lam: float
    status: str
    slater_ok: bool
    fallback: bool
    eps1_eff: float
    # surrogate of this iteration at (previous q, pi_i), (q_i, pi_i), (q_i, pi_{i+1})
    elbo_prev_q: float | None
    elbo_estep: float
    elbo_mstep: float
    witness_ok: bool
    delta_c: float
    cost_bound: float | None
    J_c_next: float
    mstep_kl: float


@dataclass
class TabularRun:
    iterations: list[TabularIteration] = field(default_factory=list)
    policy: TabularPolicy | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(it, name) for it in self.iterations], dtype=float)

    def elbo_checks(self, tol: float = 1e-8) -> tuple[int, int]:
        """(checked, violations) of the surrogate chain on certified consecutive iterations."""
        checked = bad = 0
        for k in range(1, len(self.iterations)):
            prev, it = self.iterations[k - 1], self.iterations[k]
            if not (prev.slater_ok and it.slater_ok and not prev.fallback and not it.fallback
                    and it.witness_ok and it.elbo_prev_q is not None):
                continue
            checked += 1
            if it.elbo_prev_q > it.elbo_estep + tol or it.elbo_estep > it.elbo_mstep + tol:
                bad += 1
        return checked, bad

    def cost_bound_checks(self) -> tuple[int, int]:
        checked = bad = 0
        for it in self.iterations:
            if it.cost_bound is None:
                continue
            checked += 1
            if it.J_c_next > it.cost_bound:
                bad += 1
        return checked, bad


def _rho_kl(rho, log_p, log_q) -> float:
    p = np.exp(log_p)
    with np.errstate(invalid="ignore"):
        return float(rho @ np.where(p > 0, p * (log_p - log_q), 0.0).sum(1))


def run_tabular_cvpo(mdp: TabularCMDP, eps1: float, eps2: float = 0.1, eps_m: float = 0.01,
                     iterations: int = 500, policy: TabularPolicy | None = None,
                     callback=None) -> TabularRun:
    S, A = mdp.num_states, mdp.num_actions
    pi = policy if policy is not None else TabularPolicy.uniform(S, A)
    run = TabularRun()
    prev_log_q = None
    prev_init = None
    g = mdp.gamma
    for _ in range(iterations):
        probs = pi.probs
        q = exact_policy_eval(mdp, probs)
        J_r, J_c = q.returns(mdp.rho0)
        rho = discounted_state_occupancy(mdp, probs)
        rho = np.maximum(rho, 0.0)
        ps = estep.ParticleSet(q.Q_r, q.Q_c, states=np.arange(S), actions=np.tile(np.arange(A), (S, 1)),
                               log_base=pi.log_probs, state_weights=rho)
        eps1_eff = float(rho @ q.V_c + (1 - g) * (eps1 - J_c))
        res = estep.run_estep(ps, eps1_eff, eps2, init=prev_init)
        if not res.fallback:
            prev_init = (res.dual.eta, res.dual.lam)
        log_q = res.weights.log_W
        alpha = res.dual.eta
        log_pi = pi.log_probs
        elbo_e = tabular_elbo(log_q, log_pi, q.Q_r, rho, alpha)
        elbo_prev = witness = None
        if prev_log_q is not None:
            q_prev = np.exp(prev_log_q)
            elbo_prev = tabular_elbo(prev_log_q, log_pi, q.Q_r, rho, alpha)
            witness = float(rho @ (q_prev * q.Q_c).sum(1)) <= eps1_eff
        pi_next = exact_tabular_mstep(pi, log_q, eps_m, rho)
        elbo_m = tabular_elbo(log_q, pi_next.log_probs, q.Q_r, rho, alpha)
        q_next = exact_policy_eval(mdp, pi_next.probs)
        J_c_next = q_next.returns(mdp.rho0)[1]
        dc = delta_c(pi_next.probs, q.Q_c, probs)
        kl_m = _rho_kl(rho, pi.log_probs, pi_next.log_probs)
        bound = cost_bound(eps1, g, eps_m, dc) if J_c <= eps1 else None
        it = TabularIteration(J_r, J_c, res.dual.eta, res.dual.lam, res.dual.status, res.slater_ok,
                              res.fallback, eps1_eff, elbo_prev, elbo_e, elbo_m, bool(witness),
                              dc, bound, J_c_next, kl_m)
        run.iterations.append(it)
        if callback is not None:
            callback(it)
        prev_log_q = log_q
        pi = pi_next
    run.policy = pi
    return run
