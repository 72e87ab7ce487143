"""Random E-step instances shared by the test modules."""

import math

import numpy as np

from cvpo import estep


def random_particles(rng, B=None, K=None, discrete_base=False, scale=1.0):
    B = B or int(rng.integers(1, 9))
    K = K or int(rng.integers(2, 9))
    qr = rng.normal(size=(B, K)) * scale
    qc = rng.uniform(0.0, 1.0, size=(B, K)) * scale
    log_base = np.log(rng.dirichlet(np.ones(K), size=B)) if discrete_base else None
    return estep.ParticleSet(qr, qc, log_base=log_base)


def feasible_eps1(rng, ps, eps2, margin=(0.2, 0.8)):
    """A cost threshold strictly between the least reachable cost and the base policy's cost."""
    lo = estep.min_feasible_cost(ps, eps2)
    base = float(ps.state_weights @ (np.exp(ps.log_base) * ps.qc).sum(1))
    return lo + rng.uniform(*margin) * (base - lo)


def tv(p, q, rho):
    return float(rho @ (0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=1)))


def dual_grid(ps, etas, lams, eps1, eps2):
    """Dual values on the outer product ``etas x lams`` (vectorized, shifted log-sum-exp)."""
    etas = np.asarray(etas, dtype=float)[:, None, None, None]
    out = np.empty((etas.shape[0], len(lams)))
    for j, lam in enumerate(lams):
        z = (ps.qr - lam * ps.qc)[None] / etas[..., 0] + ps.log_base[None]
        m = z.max(axis=-1, keepdims=True)
        lse = (m[..., 0] + np.log(np.exp(z - m).sum(-1)))
        out[:, j] = lam * eps1 + etas[:, 0, 0, 0] * (eps2 + lse @ ps.state_weights)
    return out


def dual_pairs(ps, etas, lams, eps1, eps2):
    """Dual values at paired points ``(etas[i], lams[i])``."""
    etas, lams = np.asarray(etas, dtype=float), np.asarray(lams, dtype=float)
    z = (ps.qr[None] - lams[:, None, None] * ps.qc[None]) / etas[:, None, None] + ps.log_base[None]
    m = z.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(z - m).sum(-1))
    return lams * eps1 + etas * (eps2 + lse @ ps.state_weights)


LAMBDA_GRID = np.concatenate([[0.0], np.geomspace(1e-6, estep.LAM_MAX, 399)])


def lambda_profile(ps, etas, eps1, eps2, iters=90):
    """``min_lambda g(eta, lambda)`` for every eta: a lambda grid brackets the minimum,
    then golden-section search (g is convex in lambda) narrows all brackets at once."""
    etas = np.asarray(etas, dtype=float)
    ls = LAMBDA_GRID
    vals = dual_grid(ps, etas, ls, eps1, eps2)
    j = np.argmin(vals, axis=1)
    a, b = ls[np.maximum(j - 1, 0)], ls[np.minimum(j + 1, len(ls) - 1)]
    r = (math.sqrt(5) - 1) / 2
    c, d = b - r * (b - a), a + r * (b - a)
    fc, fd = dual_pairs(ps, etas, c, eps1, eps2), dual_pairs(ps, etas, d, eps1, eps2)
    for _ in range(iters):
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        c, d = b - r * (b - a), a + r * (b - a)
        fc, fd = dual_pairs(ps, etas, c, eps1, eps2), dual_pairs(ps, etas, d, eps1, eps2)
    lam = np.where(fc < fd, c, d)
    v = np.minimum(fc, fd)
    grid_best = vals[np.arange(len(etas)), j]
    better = grid_best < v
    return np.where(better, grid_best, v), np.where(better, ls[j], lam)


def refined_grid_min(ps, eps1, eps2, n=400, rounds=8, zoom=21):
    """Exhaustive log-eta grid, each point minimized over lambda, then local zooms in eta."""
    u_lo, u_hi = np.log(estep.ETA_FLOOR), np.log(estep.ETA_MAX)
    us = np.linspace(u_lo, u_hi, n)
    vals, lams = lambda_profile(ps, np.exp(us), eps1, eps2)
    i = int(np.argmin(vals))
    v, u, l = vals[i], us[i], lams[i]
    du = us[1] - us[0]
    for _ in range(rounds):
        uu = np.clip(np.linspace(u - du, u + du, zoom), u_lo, u_hi)
        vv, ll = lambda_profile(ps, np.exp(uu), eps1, eps2)
        k = int(np.argmin(vv))
        if vv[k] < v:
            v, u, l = vv[k], uu[k], ll[k]
        du /= 5
    return float(v), float(np.exp(u)), float(l)
