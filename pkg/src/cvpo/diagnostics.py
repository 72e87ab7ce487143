"""Computable versions of the theoretical quantities: ELBO, worst-case cost bound,
robustness margins and the two-step KL bound."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .estep import ParticleSet, VariationalWeights

INV_E = math.exp(-1.0)


@dataclass(frozen=True)
class DiagnosticsConfig:
    alpha: float | None = None  # None: use the epoch's eta*
    delta_c_states: int = 256

    def __post_init__(self):
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")


def _row_kl(W: np.ndarray, log_p: np.ndarray, log_W: np.ndarray | None = None) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        if log_W is None:
            log_W = np.log(W)
        return np.where(W > 0, W * (log_W - log_p), 0.0).sum(axis=1)


def elbo_estimate(ps: ParticleSet, W, log_density=None, alpha: float = 1.0) -> float:
    """``E_rho[ sum_k W Qr - alpha * KL(W || particle density of pi_theta) ]``.

    ``log_density`` holds log pi_theta at the particles; the particle density of
    pi_theta is the base mass re-weighted by ``pi_theta / pi_sampling``. ``None``
    means pi_theta is the sampling policy.
    """
    W = np.asarray(W.W if isinstance(W, VariationalWeights) else W, dtype=float)
    z = ps.log_base.copy()
    if log_density is not None:
        z = z + np.asarray(log_density, dtype=float) - ps.logp_old
    z = z - np.logaddexp.reduce(z, axis=1, keepdims=True)
    reward = (W * ps.qr).sum(axis=1)
    if alpha == 0:
        return float(ps.state_weights @ reward)
    return float(ps.state_weights @ (reward - alpha * _row_kl(W, z)))


def tabular_elbo(log_q, log_pi, Q_r, rho, alpha: float) -> float:
    """Exact ``sum_s rho(s) [E_q Q_r - alpha KL(q(.|s) || pi(.|s))]`` from log-probability tables."""
    log_q, log_pi = np.asarray(log_q, dtype=float), np.asarray(log_pi, dtype=float)
    q = np.exp(log_q)
    return float(np.asarray(rho) @ ((q * Q_r).sum(1) - alpha * _row_kl(q, log_pi, log_q)))


def cost_bound(eps1: float, gamma: float, eps: float, delta_c: float) -> float:
    """Worst-case discounted cost of the next policy after a KL-``eps`` update."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if eps < 0 or delta_c < 0:
        raise ValueError("eps and delta_c must be nonnegative")
    return eps1 + ((1 - gamma) + math.sqrt(2 * eps) * gamma) * delta_c / (1 - gamma) ** 2


def delta_c(pi_new, Q_c_old, pi_old, states=None) -> float:
    """``max_s |E_{a~pi_new} A_c(s, a)|`` with ``A_c = Q_c - E_{pi_old} Q_c``."""
    pi_new, pi_old, Q = (np.asarray(v, dtype=float) for v in (pi_new, pi_old, Q_c_old))
    adv = Q - (pi_old * Q).sum(1, keepdims=True)
    gap = np.abs((pi_new * adv).sum(1))
    if states is not None:
        gap = gap[np.asarray(states)]
    return float(gap.max())


def robustness_margin(eps_mstep: float, eps2: float, n: int = 1) -> tuple[bool, float]:
    if n not in (1, 2):
        raise ValueError("only one- and two-step robustness are available")
    if eps_mstep <= 0 or eps2 <= 0:
        raise ValueError("thresholds must be positive")
    margin = eps2 - eps_mstep if n == 1 else eps2 / 8 - eps_mstep
    return margin > 0, margin


def lambert_w(branch: int, x: float) -> float:
    """Real Lambert W on branches 0 and -1 by Halley iteration."""
    if branch not in (0, -1):
        raise ValueError("branch must be 0 or -1")
    x = float(x)
    if x < -INV_E:
        # -1/e is not representable; allow the rounding gap
        if x < -INV_E * (1 + 4 * np.finfo(float).eps):
            raise ValueError(f"x = {x} is below -1/e")
        x = -INV_E
    if branch == -1 and x >= 0:
        raise ValueError("branch -1 is defined on [-1/e, 0)")
    if x == 0:
        return 0.0
    q = max(math.e * x + 1.0, 0.0)
    if q == 0.0:
        return -1.0
    p = math.sqrt(2.0 * q)
    sign = 1.0 if branch == 0 else -1.0
    if q < 0.5:
        w = -1.0 + sign * p - p * p / 3.0 + sign * 11.0 / 72.0 * p**3
    elif branch == 0:
        w = math.log1p(x) if x < math.e else math.log(x) - math.log(math.log(x))
    else:
        L = math.log(-x)
        w = L - math.log(-L)
    for _ in range(100):
        ew = math.exp(w)
        f = w * ew - x
        if w == -1.0:
            break
        w_new = w - f / (ew * (w + 1.0) - (w + 2.0) * f / (2.0 * w + 2.0))
        if branch == 0:
            w_new = max(w_new, -1.0)
        else:
            w_new = min(w_new, -1.0)
        if abs(w_new - w) <= 1e-16 * max(1.0, abs(w)):
            w = w_new
            break
        w = w_new
    return w


def two_step_kl_bound(eps: float) -> float:
    """Upper bound on KL between policies two KL-``eps`` steps apart."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if eps == 0:
        return 0.0
    z = -math.exp(-1.0 - 2.0 * eps)
    w0, wm = lambert_w(0, z), lambert_w(-1, z)
    root = math.sqrt(2 * eps / -w0) + math.sqrt(2 * eps)
    return 2 * eps + 0.5 * ((wm + 1.0) ** 2 - wm * root**2)
