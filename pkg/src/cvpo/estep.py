"""Constrained E-step on particles.

For a batch of states with ``K`` particles each, the optimal feasible
re-weighting of the old policy is

    q(a_k | s_b)  ∝  p_bk * exp((Qr[b,k] - lam * Qc[b,k]) / eta)

where ``p_bk`` is the particle's base mass under the old policy (``1/K`` for
sampled particles, ``pi_old(a|s)`` when the particles enumerate a finite
action set) and ``(eta, lam)`` minimize the convex dual

    g(eta, lam) = lam*eps1 + eta*eps2 + eta * sum_b rho_b log sum_k p_bk exp((Qr - lam Qc) / eta).

Derivatives are reported in ``(lam, eta)`` order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

ETA_FLOOR = 1e-4
ETA_MAX = 1e4
LAM_MAX = 1e3

OPTIMAL = "optimal"
BOUNDARY_LAMBDA_ZERO = "boundary_lambda_zero"
INFEASIBLE = "infeasible_detected"
MAX_ITER = "max_iter"


class InfeasibleDualError(RuntimeError):
    pass


@dataclass
class ParticleSet:
    qr: np.ndarray
    qc: np.ndarray
    states: np.ndarray | None = None
    actions: np.ndarray | None = None
    log_base: np.ndarray | None = None
    state_weights: np.ndarray | None = None
    # log density of each particle under the sampling policy; defaults to log_base
    logp_old: np.ndarray | None = None

    def __post_init__(self):
        self.qr = np.atleast_2d(np.asarray(self.qr, dtype=float))
        self.qc = np.atleast_2d(np.asarray(self.qc, dtype=float))
        if self.qr.shape != self.qc.shape:
            raise ValueError("Qr and Qc must have the same shape")
        B, K = self.qr.shape
        if K < 2:
            raise ValueError("need at least two particles per state")
        if not (np.all(np.isfinite(self.qr)) and np.all(np.isfinite(self.qc))):
            raise ValueError("critic values must be finite")
        if self.log_base is None:
            self.log_base = np.full((B, K), -math.log(K))
        else:
            lb = np.asarray(self.log_base, dtype=float).reshape(B, K)
            self.log_base = lb - _logsumexp(lb)[:, None]
        if self.state_weights is None:
            self.state_weights = np.full(B, 1.0 / B)
        else:
            w = np.asarray(self.state_weights, dtype=float).reshape(B)
            if np.any(w < 0) or w.sum() <= 0:
                raise ValueError("state weights must be nonnegative with positive mass")
            self.state_weights = w / w.sum()
        if self.logp_old is None:
            self.logp_old = self.log_base

    @property
    def shape(self) -> tuple[int, int]:
        return self.qr.shape


@dataclass
class DualSolution:
    eta: float
    lam: float
    value: float
    grad_norm: float
    status: str
    iterations: int = 0
    history: list = field(default_factory=list, repr=False)


@dataclass
class VariationalWeights:
    W: np.ndarray
    # exact log-weights when available; tiny weights may underflow in W
    log_W: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        if not np.all(np.isfinite(self.W)):
            raise ValueError("weights must be finite")
        if self.log_W is None:
            with np.errstate(divide="ignore"):
                self.log_W = np.log(self.W)


def _logsumexp(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1)
    return m + np.log(np.exp(z - m[..., None]).sum(axis=-1))


def _tilt(ps: ParticleSet, eta: float, lam: float, with_log: bool = False):
    """Row-normalized tilted weights and per-row log normalizers."""
    return _tilt_adv(ps, ps.qr - lam * ps.qc, eta, with_log)


def _tilt_adv(ps: ParticleSet, adv: np.ndarray, eta: float, with_log: bool = False):
    z = ps.log_base + adv / eta
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    log_z = m + np.log(s)
    if with_log:
        return e / s, log_z[:, 0], adv, z - log_z
    return e / s, log_z[:, 0], adv


def _check_eta(eta: float) -> None:
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")


def dual_value(ps: ParticleSet, eta: float, lam: float, eps1: float, eps2: float) -> float:
    _check_eta(eta)
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    _, log_z, _ = _tilt(ps, eta, lam)
    return float(lam * eps1 + eta * eps2 + eta * (ps.state_weights @ log_z))


def _centered_moments(w: np.ndarray, x: np.ndarray, y: np.ndarray):
    # shift by the first particle so that constant rows give exact zeros
    dx = x - x[:, :1]
    dy = y - y[:, :1]
    mx = (w * dx).sum(axis=1, keepdims=True)
    my = (w * dy).sum(axis=1, keepdims=True)
    cx, cy = dx - mx, dy - my
    return (w * cx * cx).sum(axis=1), (w * cy * cy).sum(axis=1), (w * cx * cy).sum(axis=1)


def dual_derivatives(ps: ParticleSet, eta: float, lam: float, eps1: float, eps2: float):
    """Analytic gradient and Hessian of ``g`` with respect to ``(lam, eta)``."""
    _check_eta(eta)
    if eta < ETA_FLOOR * (1 - 1e-12):
        raise ValueError(f"eta below the floor {ETA_FLOOR}")
    w, log_z, adv = _tilt(ps, eta, lam)
    rho = ps.state_weights
    mean_c = (w * ps.qc).sum(axis=1)
    # KL(w || base) = sum w log(w / base) = E_w[adv]/eta - log Z
    kl = (w * adv).sum(axis=1) / eta - log_z
    grad = np.array([eps1 - rho @ mean_c, eps2 - rho @ kl])
    var_c, var_a, cov_ca = _centered_moments(w, ps.qc, adv)
    H = np.empty((2, 2))
    H[0, 0] = rho @ var_c / eta
    H[1, 1] = rho @ var_a / eta**3
    H[0, 1] = H[1, 0] = rho @ cov_ca / eta**2
    return grad, H


def _projected_grad(grad, eta, lam, eta_floor, eta_max, lam_max):
    pg = grad.copy()
    if lam <= 0 and pg[0] > 0:
        pg[0] = 0.0
    if lam >= lam_max and pg[0] < 0:
        pg[0] = 0.0
    if eta <= eta_floor and pg[1] > 0:
        pg[1] = 0.0
    if eta >= eta_max and pg[1] < 0:
        pg[1] = 0.0
    return pg


def _initial_eta(ps: ParticleSet, eps2: float) -> float:
    spread = float(ps.state_weights @ ps.qr.std(axis=1))
    return float(np.clip(spread / math.sqrt(2 * max(eps2, 1e-12)), 1e-2, 1e2)) if spread > 0 else 1.0


def _line_search(f, proj_grad, u, lam, fx, gu, pg, d, u_box, lam_max):
    """Backtracking Armijo search along ``d`` (ordered ``(lam, u)``) with box projection."""
    # cap the step as a whole so it stays a descent direction
    scale = min(1.0, 5.0 / max(abs(d[1]), 1e-300), lam_max / max(abs(d[0]), 1e-300))
    d = d * scale
    t = 1.0
    noise = 1e-13 * max(1.0, abs(fx))
    for _ in range(80):
        u_new = float(np.clip(u + t * d[1], *u_box))
        lam_new = float(np.clip(lam + t * d[0], 0.0, lam_max))
        step = np.array([lam_new - lam, u_new - u])
        if not step.any():
            break
        f_new = f(u_new, lam_new)
        if f_new <= fx + 1e-4 * (gu @ step):
            return True, u_new, lam_new, f_new
        if abs(gu @ step) <= noise:
            # decrease below round-off in g: judge the step by the gradient instead
            if np.linalg.norm(proj_grad(u_new, lam_new)[2]) < np.linalg.norm(pg):
                return True, u_new, lam_new, f_new
        t *= 0.5
    return False, u, lam, fx


def solve_dual(ps: ParticleSet, eps1: float, eps2: float, tol: float = 1e-8, max_iter: int = 200,
               eta_floor: float = ETA_FLOOR, eta_max: float = ETA_MAX, lam_max: float = LAM_MAX,
               init: tuple[float, float] | None = None) -> DualSolution:
    """Minimize ``g`` over the box by projected Newton in ``(log eta, lam)``.

    Directions come from the (regularized) Hessian on the free variables and
    fall back to steepest descent when that is not a descent direction; steps
    are projected onto the box and backtracked on ``g``.
    """
    if not (np.all(np.isfinite(ps.qr)) and np.all(np.isfinite(ps.qc))):
        raise ValueError("critic values must be finite")
    u_lo, u_hi = math.log(eta_floor), math.log(eta_max)
    if init is None:
        eta, lam = _initial_eta(ps, eps2), 0.0
    else:
        eta, lam = init
    u = float(np.clip(math.log(eta), u_lo, u_hi))
    lam = float(np.clip(lam, 0.0, lam_max))

    def eta_of(u_):
        # snap to the exact bounds so the projected gradient sees them
        return eta_floor if u_ <= u_lo else eta_max if u_ >= u_hi else math.exp(u_)

    def f(u_, lam_):
        return dual_value(ps, eta_of(u_), lam_, eps1, eps2)

    def proj_grad(u_, lam_):
        eta_ = eta_of(u_)
        g_, H_ = dual_derivatives(ps, eta_, lam_, eps1, eps2)
        return g_, H_, _projected_grad(g_, eta_, lam_, eta_floor, eta_max, lam_max)

    fx = f(u, lam)
    status = MAX_ITER
    it = 0
    g, H, pg = proj_grad(u, lam)
    for it in range(1, max_iter + 1):
        if np.linalg.norm(pg) <= tol:
            status = OPTIMAL
            break
        eta = eta_of(u)
        # chain rule to (u, lam) with u = log eta
        gu = np.array([g[0], eta * g[1]])
        Hu = np.array([[H[0, 0], eta * H[0, 1]],
                       [eta * H[0, 1], eta**2 * H[1, 1] + eta * g[1]]])
        free = np.array([pg[0] != 0.0, pg[1] != 0.0])
        d = np.zeros(2)
        Hf = Hu[np.ix_(free, free)]
        gf = gu[free]
        evals = np.linalg.eigvalsh(Hf)
        shift = max(0.0, -evals.min()) + 1e-12 * (1.0 + np.abs(evals).max())
        try:
            d[free] = -np.linalg.solve(Hf + shift * np.eye(len(gf)), gf)
        except np.linalg.LinAlgError:
            d[free] = -gf
        if gu @ d >= 0:
            d = np.where(free, -gu, 0.0)
        accepted, u_new, lam_new, f_new = _line_search(f, proj_grad, u, lam, fx, gu, pg, d, (u_lo, u_hi), lam_max)
        if not accepted and np.any(d != np.where(free, -gu, 0.0)):
            # nearly singular curvature can make the Newton step useless; retry downhill
            accepted, u_new, lam_new, f_new = _line_search(f, proj_grad, u, lam, fx, gu, pg,
                                                           np.where(free, -gu, 0.0), (u_lo, u_hi), lam_max)
        if not accepted:
            break
        u, lam, fx = u_new, lam_new, f_new
        g, H, pg = proj_grad(u, lam)
    eta = eta_of(u)
    if np.linalg.norm(pg) <= tol:
        status = OPTIMAL
    if lam >= lam_max * (1 - 1e-9):
        status = INFEASIBLE
    elif status == OPTIMAL and lam == 0.0:
        status = BOUNDARY_LAMBDA_ZERO
    return DualSolution(eta=eta, lam=lam, value=fx, grad_norm=float(np.linalg.norm(pg)),
                        status=status, iterations=it)


def variational_weights(ps: ParticleSet, sol: DualSolution) -> VariationalWeights:
    if sol.status not in (OPTIMAL, BOUNDARY_LAMBDA_ZERO):
        raise InfeasibleDualError(f"refusing to build weights from a dual with status {sol.status!r}")
    w, _, _, log_w = _tilt(ps, sol.eta, sol.lam, with_log=True)
    return VariationalWeights(w, log_w)


def _cost_tilt_kl(ps: ParticleSet, eta: float) -> float:
    w, log_z, adv = _tilt_adv(ps, -ps.qc, eta)
    kl = (w * adv).sum(axis=1) / eta - log_z
    return float(ps.state_weights @ kl)


@dataclass
class CostCertificate:
    min_cost: float
    eta: float
    W: np.ndarray
    log_W: np.ndarray


def min_feasible_cost_certificate(ps: ParticleSet, eps2: float) -> CostCertificate:
    """Least expected cost reachable inside the KL ball, with its minimizing weights.

    Solves the one-dimensional dual of ``min E_rho E_q Qc  s.t.  E_rho KL(q||p) <= eps2``:
    the stationarity condition ``KL(eta) = eps2`` is monotone in ``eta`` and is
    bracketed by bisection in ``log eta``.
    """
    rho = ps.state_weights
    qc = ps.qc
    row_min = qc.min(axis=1)
    at_min = qc == row_min[:, None]
    # KL of the limiting point mass on each row's cheapest particles
    log_mass = np.logaddexp.reduce(np.where(at_min, ps.log_base, -np.inf), axis=1)
    limit_kl = float(rho[rho > 0] @ -log_mass[rho > 0])
    if limit_kl <= eps2 and np.all(np.isfinite(log_mass)):
        log_W = np.where(at_min, ps.log_base - log_mass[:, None], -np.inf)
        return CostCertificate(float(rho @ row_min), 0.0, np.exp(log_W), log_W)
    lo, hi = math.log(1e-12), math.log(1e12)
    gap = lambda u: _cost_tilt_kl(ps, math.exp(u)) - eps2
    if gap(lo) > 0 and gap(hi) <= 0:
        # the root is bracketed; keep the feasible side of the returned point
        hi = brentq(gap, lo, hi, xtol=1e-13, rtol=4 * np.finfo(float).eps)
        while gap(hi) > 0:
            hi += 1e-12
    elif gap(lo) <= 0:
        hi = lo
    eta = math.exp(hi)
    w, _, _, log_w = _tilt_adv(ps, -qc, eta, with_log=True)
    return CostCertificate(float(rho @ (w * qc).sum(axis=1)), eta, w, log_w)


def min_feasible_cost(ps: ParticleSet, eps2: float) -> float:
    return min_feasible_cost_certificate(ps, eps2).min_cost


def slater_holds(ps: ParticleSet, eps1: float, eps2: float) -> bool:
    return min_feasible_cost(ps, eps2) < eps1


def fallback_weights(ps: ParticleSet, eps2: float) -> VariationalWeights:
    """Cost-minimizing weights inside the KL ball, used when the dual is infeasible."""
    cert = min_feasible_cost_certificate(ps, eps2)
    return VariationalWeights(cert.W, cert.log_W)


@dataclass
class EStepResult:
    weights: VariationalWeights
    dual: DualSolution
    slater_ok: bool
    min_cost: float
    fallback: bool


def run_estep(ps: ParticleSet, eps1: float, eps2: float, **solver_kw) -> EStepResult:
    """Solve the dual, build weights, and fall back to cost reduction if infeasible."""
    cert = min_feasible_cost_certificate(ps, eps2)
    sol = solve_dual(ps, eps1, eps2, **solver_kw)
    slater_ok = cert.min_cost < eps1
    if sol.status in (OPTIMAL, BOUNDARY_LAMBDA_ZERO):
        return EStepResult(variational_weights(ps, sol), sol, slater_ok, cert.min_cost, False)
    if sol.status == MAX_ITER and slater_ok:
        w, _, _, log_w = _tilt(ps, sol.eta, sol.lam, with_log=True)
        return EStepResult(VariationalWeights(w, log_w), sol, slater_ok, cert.min_cost, False)
    return EStepResult(VariationalWeights(cert.W, cert.log_W), sol, slater_ok, cert.min_cost, True)
