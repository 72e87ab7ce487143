"""KL-constrained weighted maximum likelihood (policy improvement step)."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .estep import ParticleSet, VariationalWeights
from .policy import LOG_2PI, CategoricalPolicy, GaussianPolicy, TabularPolicy, gaussian_log_prob, kl_parts


@dataclass(frozen=True)
class MStepState:
    beta_mu: float = 0.0
    beta_sigma: float = 0.0
    alpha_mu: float = 1.0
    alpha_sigma: float = 100.0
    alpha_theta: float = 0.002
    eps_mu: float = 1e-3
    eps_sigma: float = 1e-4
    M: int = 6

    def __post_init__(self):
        if self.beta_mu < 0 or self.beta_sigma < 0:
            raise ValueError("duals must be nonnegative")
        if self.eps_mu <= 0 or self.eps_sigma <= 0:
            raise ValueError("KL thresholds must be positive")

    @property
    def eps(self) -> float:
        return self.eps_mu + self.eps_sigma


def kl_dual_step(state: MStepState, c_mu: float, c_sigma: float) -> MStepState:
    """Projected gradient step on the two KL multipliers."""
    if c_mu < 0 or c_sigma < 0:
        raise ValueError("KL parts must be nonnegative")
    b_mu = max(0.0, state.beta_mu - state.alpha_mu * (state.eps_mu - c_mu))
    b_sigma = max(0.0, state.beta_sigma - state.alpha_sigma * (state.eps_sigma - c_sigma))
    return replace(state, beta_mu=b_mu, beta_sigma=b_sigma)


def _rho(ps: ParticleSet) -> torch.Tensor:
    return torch.as_tensor(ps.state_weights)


def weighted_mle_loss(policy, ps: ParticleSet, W: VariationalWeights) -> torch.Tensor:
    """Negative ``E_rho sum_k W[b,k] log pi(a_k | s_b)``; differentiable in the policy parameters."""
    W_t = torch.as_tensor(np.asarray(W.W if isinstance(W, VariationalWeights) else W, dtype=float))
    B, K = W_t.shape
    if isinstance(policy, GaussianPolicy):
        mu, std = policy(ps.states)
        a = torch.as_tensor(np.asarray(ps.actions, dtype=float))
        logp = gaussian_log_prob(mu[:, None, :], std[:, None, :], a)
    else:
        logp_all = policy(ps.states)
        idx = torch.as_tensor(np.asarray(ps.actions), dtype=torch.long).reshape(B, K)
        logp = logp_all.gather(1, idx)
    return -(_rho(ps) * (W_t * logp).sum(1)).sum()


def _moment_log_lik(s1, s2, mu, std):
    """``sum_k W_k log N(a_k; mu, std)`` from the weighted moments ``s1 = sum W a``, ``s2 = sum W a^2``."""
    sq = s2 - 2 * mu * s1 + mu * mu
    return (-0.5 * sq / (std * std) - torch.log(std) - 0.5 * LOG_2PI).sum(-1)


def _gaussian_terms(policy: GaussianPolicy, ps, mu_old, std_old, cache):
    """(fit, C_mu, C_sigma) at the current parameters, all differentiable."""
    mu, std = policy(ps.states)
    mu_t, std_t, s1, s2 = cache
    rho = _rho(ps)
    # the weights of each row sum to one, so the particle sum reduces to two moments
    fit = (rho * (_moment_log_lik(s1, s2, mu, std_t) + _moment_log_lik(s1, s2, mu_t, std))).sum()
    c_mu, c_sigma = kl_parts(mu_old, std_old, mu, std)
    return fit, (rho * c_mu).sum(), (rho * c_sigma).sum()


def _gaussian_cache(policy: GaussianPolicy, ps, W_t):
    mu_t, std_t = policy.target_params(ps.states)
    a = torch.as_tensor(np.asarray(ps.actions, dtype=float))
    W_n = W_t / W_t.sum(1, keepdim=True)
    s1 = (W_n[:, :, None] * a).sum(1)
    s2 = (W_n[:, :, None] * a * a).sum(1)
    return mu_t, std_t, s1, s2


def _categorical_terms(policy: CategoricalPolicy, ps, W_t, logp_old):
    logp_all = policy(ps.states)
    B, K = W_t.shape
    idx = torch.as_tensor(np.asarray(ps.actions), dtype=torch.long).reshape(B, K)
    rho = _rho(ps)
    fit = (rho * (W_t * logp_all.gather(1, idx)).sum(1)).sum()
    kl = (rho * (torch.exp(logp_old) * (logp_old - logp_all)).sum(1)).sum()
    return fit, kl, torch.zeros(())


def _lagrangian_loss(terms, state: MStepState, gaussian: bool):
    fit, c_mu, c_sigma = terms
    if gaussian:
        return -(fit + state.beta_mu * (state.eps_mu - c_mu) + state.beta_sigma * (state.eps_sigma - c_sigma))
    # one multiplier on the whole KL for categorical policies
    return -(fit + state.beta_mu * (state.eps - c_mu))


@dataclass
class MStepReport:
    state: MStepState
    c_mu: float
    c_sigma: float
    loss: float


def policy_update(policy, ps: ParticleSet, W: VariationalWeights, state: MStepState,
                  M: int | None = None, optimizer: torch.optim.Optimizer | None = None,
                  old=None) -> MStepReport:
    """``M`` rounds of (dual step, parameter step) on the KL-constrained Lagrangian.

    ``old`` is the reference policy evaluated on ``ps.states``: ``(mu, std)``
    for Gaussians, log-probabilities for categorical policies. It defaults to
    the policy's current output. Without ``optimizer`` a plain gradient step
    of size ``alpha_theta`` is taken.
    """
    M = state.M if M is None else M
    W_t = torch.as_tensor(np.asarray(W.W if isinstance(W, VariationalWeights) else W, dtype=float))
    gaussian = isinstance(policy, GaussianPolicy)
    if old is None:
        with torch.no_grad():
            old = policy(ps.states) if gaussian else policy(ps.states)
    params = [p for p in policy.parameters() if p.requires_grad]

    cache = _gaussian_cache(policy, ps, W_t) if gaussian else None
    logp_old = None if gaussian else torch.as_tensor(old)

    def terms():
        if gaussian:
            return _gaussian_terms(policy, ps, old[0], old[1], cache)
        return _categorical_terms(policy, ps, W_t, logp_old)

    loss = torch.zeros(())
    for _ in range(M):
        # the Lagrangian is linear in the multipliers, so one forward pass serves
        # both the dual step and the parameter step
        t = terms()
        c_mu, c_sigma = max(float(t[1].detach()), 0.0), max(float(t[2].detach()), 0.0)
        if gaussian:
            state = kl_dual_step(state, c_mu, c_sigma)
        else:
            st = kl_dual_step(replace(state, eps_mu=state.eps), c_mu, 0.0)
            state = replace(state, beta_mu=st.beta_mu)
        loss = _lagrangian_loss(t, state, gaussian)
        grads = torch.autograd.grad(loss, params)
        if not all(torch.all(torch.isfinite(g)) for g in grads):
            raise FloatingPointError("non-finite policy gradient in the M-step")
        if optimizer is None:
            with torch.no_grad():
                for p, g in zip(params, grads):
                    p.sub_(state.alpha_theta * g)
        else:
            optimizer.zero_grad()
            for p, g in zip(params, grads):
                p.grad = g.clone()
            optimizer.step()
    with torch.no_grad():
        _, c_mu, c_sigma = terms()
    return MStepReport(state, float(c_mu), float(c_sigma), float(loss.detach()))


# -- exact tabular projection ----------------------------------------------------


def _weighted_kl(rho, log_p, log_q) -> float:
    p = np.exp(log_p)
    with np.errstate(invalid="ignore"):
        terms = np.where(p > 0, p * (log_p - log_q), 0.0)
    return float(rho @ terms.sum(axis=1))


def exact_tabular_mstep(pi_old: TabularPolicy, log_q, eps: float, state_weights=None,
                        tol: float = 1e-13) -> TabularPolicy:
    """Exact maximizer of ``E_rho E_q log pi`` over ``E_rho KL(pi_old || pi) <= eps``.

    Stationarity gives ``pi = (q + beta*pi_old) / (1 + beta)`` in every state
    with one shared multiplier, so the solution is the mixture
    ``(1 - t) pi_old + t q`` with ``t`` found by bisection on the KL budget.
    """
    log_old = pi_old.log_probs
    log_q = np.asarray(log_q, dtype=float)
    log_q = log_q - np.logaddexp.reduce(log_q, axis=1, keepdims=True)
    S = log_old.shape[0]
    rho = np.full(S, 1.0 / S) if state_weights is None else np.asarray(state_weights, dtype=float)
    rho = rho / rho.sum()

    def mix(t):
        if t <= 0:
            return log_old
        if t >= 1:
            return log_q
        return np.logaddexp(math.log1p(-t) + log_old, math.log(t) + log_q)

    if eps <= 0:
        return TabularPolicy(log_old)
    if math.isinf(eps) or _weighted_kl(rho, log_old, log_q) <= eps:
        return TabularPolicy(log_q)
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _weighted_kl(rho, log_old, mix(mid)) <= eps:
            lo = mid
        else:
            hi = mid
    return TabularPolicy(mix(lo))
