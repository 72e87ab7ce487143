"""Primal-dual baseline: actor ascends Q_r - lam*Q_c, lam follows a PID controller."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .critics import CriticPair
from .policy import CategoricalPolicy, GaussianPolicy, TabularPolicy, _as_tensor


@dataclass(frozen=True)
class PidState:
    kp: float = 1.0
    ki: float = 0.1
    kd: float = 0.0
    integral: float = 0.0
    prev_error: float = 0.0
    lam: float = 0.0
    i_max: float = 1e3

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("multiplier must be nonnegative")


def pid_update(pid: PidState, j_c_estimate: float, eps1: float) -> PidState:
    e = float(j_c_estimate) - float(eps1)
    if not np.isfinite(e):
        raise ValueError("PID inputs must be finite")
    integral = min(max(pid.integral + e, 0.0), pid.i_max)
    lam = max(0.0, pid.kp * e + pid.ki * integral + pid.kd * (e - pid.prev_error))
    return replace(pid, integral=integral, prev_error=e, lam=lam)


def pd_actor_step(policy, critics: CriticPair, states, lam: float, optimizer: torch.optim.Optimizer,
                  rng: np.random.Generator | None = None) -> float:
    """One ascent step on E_s E_{a~pi}[Q_r - lam Q_c]; returns the actor loss.

    Gaussian actions are reparameterized (``a = mu + std * noise``) so gradients flow
    through the critics; categorical policies use the exact expectation over actions.
    """
    s = _as_tensor(np.asarray(states, dtype=float))
    for p in list(critics.qr.parameters()) + list(critics.qc.parameters()):
        p.requires_grad_(False)
    try:
        if isinstance(policy, GaussianPolicy):
            mu, std = policy(s)
            noise = torch.as_tensor(rng.standard_normal(tuple(mu.shape)))
            a = mu + std * noise
            qr = critics._raw(critics.qr, s, a)
            qc = critics._raw(critics.qc, s, a)
            loss = -(qr - lam * qc).mean()
        else:
            logp = policy(s)
            qr = critics.qr(s)
            qc = torch.clamp(critics.qc(s), min=0.0)
            loss = -(torch.exp(logp) * (qr - lam * qc)).sum(1).mean()
        if not torch.isfinite(loss):
            raise FloatingPointError("non-finite actor loss")
        optimizer.zero_grad()
        loss.backward()
        for p in policy.parameters():
            if p.grad is not None and not torch.all(torch.isfinite(p.grad)):
                raise FloatingPointError("non-finite actor gradient")
        optimizer.step()
    finally:
        for p in list(critics.qr.parameters()) + list(critics.qc.parameters()):
            p.requires_grad_(True)
    return float(loss.detach())


def tabular_pd_step(logits: np.ndarray, Q_r: np.ndarray, Q_c: np.ndarray, lam: float, lr: float,
                    rho=None) -> np.ndarray:
    """Exact softmax policy-gradient step on E_rho E_pi[Q_r - lam Q_c] for a logits table."""
    pi = TabularPolicy(logits).probs
    adv = Q_r - lam * Q_c
    adv = adv - (pi * adv).sum(1, keepdims=True)
    w = np.ones(len(pi)) if rho is None else np.asarray(rho, dtype=float)
    return logits + lr * w[:, None] * pi * adv
