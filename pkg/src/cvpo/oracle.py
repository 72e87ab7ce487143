"""Ground-truth solvers for finite CMDPs and for the E-step primal.

Nothing here uses the closed-form variational solution; these routines are
the independent references the rest of the package is checked against.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linprog, minimize

from .envs.tabular_mdp import TabularCMDP


class InfeasibleError(ValueError):
    """Raised with the smallest attainable constraint value as certificate."""

    def __init__(self, message: str, min_value: float):
        super().__init__(message)
        self.min_value = min_value


@dataclass
class ExactQ:
    Q_r: np.ndarray
    Q_c: np.ndarray
    V_r: np.ndarray
    V_c: np.ndarray

    def returns(self, rho0: np.ndarray) -> tuple[float, float]:
        return float(rho0 @ self.V_r), float(rho0 @ self.V_c)


@dataclass
class LPSolution:
    policy: np.ndarray
    J_r: float
    J_c: float
    occupancy: np.ndarray
    cost_dual: float

    def to_json(self) -> dict:
        return {
            "policy": self.policy.tolist(),
            "J_r": self.J_r,
            "J_c": self.J_c,
            "occupancy": self.occupancy.tolist(),
            "cost_dual": self.cost_dual,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def _check_policy(mdp: TabularCMDP, policy: np.ndarray) -> np.ndarray:
    policy = np.asarray(policy, dtype=float)
    if policy.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError(f"policy shape {policy.shape} does not match the CMDP")
    if np.any(policy < 0) or not np.allclose(policy.sum(axis=1), 1.0, atol=1e-10):
        raise ValueError("policy rows must be distributions")
    return policy


def exact_policy_eval(mdp: TabularCMDP, policy: np.ndarray) -> ExactQ:
    """Solve ``(I - gamma P_pi) V = r_pi`` for reward and cost at once."""
    policy = _check_policy(mdp, policy)
    S = mdp.num_states
    P_pi = mdp.state_transition(policy)
    rhs = np.stack([(policy * mdp.r).sum(axis=1), (policy * mdp.c).sum(axis=1)], axis=1)
    V = np.linalg.solve(np.eye(S) - mdp.gamma * P_pi, rhs)
    # one Newton-style refinement brings the residual to round-off
    resid = rhs - (V - mdp.gamma * P_pi @ V)
    V = V + np.linalg.solve(np.eye(S) - mdp.gamma * P_pi, resid)
    EV = mdp.P @ V  # (S, A, 2)
    Q_r = mdp.r + mdp.gamma * EV[..., 0]
    Q_c = mdp.c + mdp.gamma * EV[..., 1]
    return ExactQ(Q_r, Q_c, V[:, 0], V[:, 1])


def bellman_residual(mdp: TabularCMDP, policy: np.ndarray, q: ExactQ) -> float:
    policy = _check_policy(mdp, policy)
    res = []
    for Q, signal in ((q.Q_r, mdp.r), (q.Q_c, mdp.c)):
        V = (policy * Q).sum(axis=1)
        res.append(np.max(np.abs(Q - signal - mdp.gamma * mdp.P @ V)))
    return float(max(res))


def discounted_state_occupancy(mdp: TabularCMDP, policy: np.ndarray) -> np.ndarray:
    """Normalized discounted visitation ``(1 - gamma) sum_t gamma^t Pr(s_t = s)``."""
    policy = _check_policy(mdp, policy)
    P_pi = mdp.state_transition(policy)
    d = np.linalg.solve(np.eye(mdp.num_states) - mdp.gamma * P_pi.T, mdp.rho0)
    return (1.0 - mdp.gamma) * d


def value_iteration(mdp: TabularCMDP, signal: np.ndarray | None = None, tol: float = 1e-13,
                    max_iter: int = 100_000) -> tuple[np.ndarray, np.ndarray]:
    """Optimal ``(V, Q)`` for the unconstrained problem with reward ``signal``."""
    r = mdp.r if signal is None else signal
    V = np.zeros(mdp.num_states)
    for _ in range(max_iter):
        Q = r + mdp.gamma * mdp.P @ V
        V_new = Q.max(axis=1)
        if np.max(np.abs(V_new - V)) < tol:
            V = V_new
            break
        V = V_new
    return V, r + mdp.gamma * mdp.P @ V


def expected_episode_totals(mdp: TabularCMDP, policy: np.ndarray, T: int) -> tuple[float, float]:
    """Exact expected undiscounted reward and cost over a ``T``-step episode."""
    policy = _check_policy(mdp, policy)
    m = np.zeros((mdp.num_states, 2))
    signal = np.stack([mdp.r, mdp.c], axis=-1)
    for _ in range(T):
        m = np.einsum("sa,sak->sk", policy, signal + mdp.P @ m)
    return float(mdp.rho0 @ m[:, 0]), float(mdp.rho0 @ m[:, 1])


def solve_constrained_lp(mdp: TabularCMDP, eps1: float) -> LPSolution:
    """Exact CMDP optimum via the discounted occupancy-measure LP.

    Occupancies sum to ``1/(1 - gamma)`` so ``d . c`` is the discounted cost
    return from ``rho0``, in the same units as ``eps1``.
    """
    if eps1 < 0:
        raise ValueError("eps1 must be nonnegative")
    S, A = mdp.num_states, mdp.num_actions
    # flow: sum_a d(s2,a) - gamma sum_{s,a} P(s2|s,a) d(s,a) = rho0(s2)
    A_eq = np.zeros((S, S * A))
    for s2 in range(S):
        A_eq[s2, s2 * A:(s2 + 1) * A] += 1.0
    A_eq -= mdp.gamma * mdp.P.reshape(S * A, S).T
    bounds = [(0, None)] * (S * A)
    cost_row = mdp.c.reshape(1, -1)
    constrained = np.isfinite(eps1)
    res = linprog(
        -mdp.r.reshape(-1),
        A_ub=cost_row if constrained else None,
        b_ub=[eps1] if constrained else None,
        A_eq=A_eq,
        b_eq=mdp.rho0,
        bounds=bounds,
        method="highs",
    )
    if res.status == 2:
        floor = linprog(mdp.c.reshape(-1), A_eq=A_eq, b_eq=mdp.rho0, bounds=bounds, method="highs")
        raise InfeasibleError(
            f"no policy achieves discounted cost <= {eps1}; minimum is {floor.fun:.6g}", float(floor.fun)
        )
    if res.status != 0:
        raise RuntimeError(f"LP solver failed: {res.message}")
    d = np.maximum(res.x.reshape(S, A), 0.0)
    mass = d.sum(axis=1, keepdims=True)
    policy = np.where(mass > 1e-12, d / np.where(mass > 0, mass, 1.0), 1.0 / A)
    policy /= policy.sum(axis=1, keepdims=True)
    q = exact_policy_eval(mdp, policy)
    J_r, J_c = q.returns(mdp.rho0)
    cost_dual = float(-res.ineqlin.marginals[0]) if constrained else 0.0
    return LPSolution(policy, J_r, J_c, d, cost_dual)


# -- brute-force E-step ------------------------------------------------------


@dataclass
class EStepPrimal:
    q: np.ndarray | None
    objective: float
    feasible: bool
    min_cost: float
    info: dict = field(default_factory=dict)


def _simplex_grid(n: int, resolution: int) -> np.ndarray:
    pts = []
    for bars in itertools.combinations(range(resolution + n - 1), n - 1):
        prev, counts = -1, []
        for b in bars:
            counts.append(b - prev - 1)
            prev = b
        counts.append(resolution + n - 2 - prev)
        pts.append(counts)
    return np.asarray(pts, dtype=float) / resolution


def _kl_rows(q, p, logp):
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * (np.log(np.where(q > 0, q, 1.0)) - logp), 0.0)
    return terms.sum(axis=-1)


def _barrier_path(obj, R, logp, E, eps2, x0, cost=None, eps1=None, gap=1e-12):
    """Minimize ``obj . x`` over ``{E x = 1, x > 0, sum R x log(x/p) <= eps2, cost . x <= eps1}``.

    Primal log-barrier path following with equality-constrained Newton steps;
    ``x0`` must be strictly feasible. The KL Hessian is diagonal and the two
    inequality rows add a rank-two term, so each step is a small dense solve
    after diagonal scaling.
    """
    x = x0.copy()
    with_cost = cost is not None
    m = x.size + 1 + int(with_cost)

    def slack(x_):
        s2 = eps2 - R @ (x_ * (np.log(x_) - logp))
        s1 = eps1 - cost @ x_ if with_cost else 1.0
        return s1, s2

    def phi(x_, t):
        if np.any(x_ <= 0):
            return np.inf
        s1, s2 = slack(x_)
        if s1 <= 0 or s2 <= 0:
            return np.inf
        return t * (obj @ x_) - math.log(s2) - math.log(s1) - np.log(x_).sum()

    t = 1.0 / max(np.abs(obj).max(), 1e-12)
    k = E.shape[0]
    while True:
        for _ in range(200):
            s1, s2 = slack(x)
            gkl = R * (np.log(x) - logp + 1.0)
            grad = t * obj + gkl / s2 - 1.0 / x
            U = [gkl / s2]
            if with_cost:
                grad = grad + cost / s1
                U.append(cost / s1)
            hd = R / (x * s2) + 1.0 / x**2
            d = 1.0 / np.sqrt(hd)
            DU = np.stack(U, axis=1) * d[:, None]
            ED = E * d[None, :]
            K = np.zeros((x.size + k, x.size + k))
            K[:x.size, :x.size] = np.eye(x.size) + DU @ DU.T
            K[:x.size, x.size:] = ED.T
            K[x.size:, :x.size] = ED
            rhs = np.concatenate([-grad * d, np.zeros(k)])
            dx = d * np.linalg.solve(K, rhs)[:x.size]
            dec = -(grad @ dx)
            if dec <= 1e-16 * max(1.0, abs(t * (obj @ x))):
                break
            f0, step = phi(x, t), 1.0
            while step > 1e-20 and not phi(x + step * dx, t) <= f0 - 0.25 * step * dec:
                step *= 0.5
            if step <= 1e-20:
                break
            x = x + step * dx
            # keep the simplex rows exact against round-off, unless that leaves the interior
            xr = (x.reshape(k, -1) / x.reshape(k, -1).sum(axis=1, keepdims=True)).reshape(-1)
            if np.isfinite(phi(xr, t)):
                x = xr
        if m / t <= gap:
            return x
        t *= 20.0


def _batch_primal(pi_old, Qr, Qc, rho, eps1, eps2) -> EStepPrimal:
    B, A = Qr.shape
    R = np.repeat(rho, A)
    logp = np.log(pi_old).reshape(-1)
    E = np.kron(np.eye(B), np.ones(A))
    p0 = pi_old.reshape(-1)
    cost = R * Qc.reshape(-1)
    # phase one: the least cost inside the KL ball decides feasibility
    x_min = _barrier_path(cost, R, logp, E, eps2, p0)
    min_cost = float(cost @ x_min)
    if min_cost > eps1 + 1e-10:
        return EStepPrimal(None, float("nan"), False, min_cost, {"reason": "no feasible q in the KL ball"})
    if min_cost >= eps1:
        q = x_min
    else:
        # start on the segment to pi_old, halfway between the least cost and the threshold
        c0 = float(cost @ p0)
        a = 0.0 if c0 < eps1 else (c0 - 0.5 * (eps1 + min_cost)) / (c0 - min_cost)
        x0 = (1 - a) * p0 + a * x_min
        q = _barrier_path(-R * Qr.reshape(-1), R, logp, E, eps2, x0, cost=cost, eps1=eps1)
    q = q.reshape(B, A)
    info = {"kl": float(rho @ _kl_rows(q, pi_old, np.log(pi_old))), "cost": float(cost @ q.reshape(-1))}
    return EStepPrimal(q, float(rho @ (q * Qr).sum(axis=1)), True, min_cost, info)


def brute_force_estep(pi_old, Q_r, Q_c, eps1: float, eps2: float, state_weights=None,
                      seed: int = 0, grid_resolution: int | None = None, n_seeds: int = 64,
                      method: str = "barrier") -> EStepPrimal:
    """Maximize ``E_rho E_q Q_r`` s.t. ``E_rho E_q Q_c <= eps1``, ``E_rho KL(q||pi_old) <= eps2``.

    One state (1-D inputs): the best feasible point of an exhaustive simplex
    grid is refined with SLSQP on the primal. A batch (``B x A``) is solved by
    a primal log-barrier method, ``method="slsqp"`` instead refines Dirichlet
    draws with SLSQP (slow beyond a few dozen variables). In both cases
    feasibility is decided by separately minimizing the cost inside the KL ball.
    """
    pi_old = np.atleast_2d(np.asarray(pi_old, dtype=float))
    Qr = np.atleast_2d(np.asarray(Q_r, dtype=float))
    Qc = np.atleast_2d(np.asarray(Q_c, dtype=float))
    single = np.ndim(Q_r) == 1
    B, A = Qr.shape
    if A > 8:
        raise ValueError("brute force is limited to |A| <= 8")
    if method not in ("barrier", "slsqp"):
        raise ValueError(f"unknown method {method!r}")
    if np.any(pi_old <= 0):
        raise ValueError("pi_old must be strictly positive")
    pi_old = pi_old / pi_old.sum(axis=1, keepdims=True)
    logp = np.log(pi_old)
    rho = np.full(B, 1.0 / B) if state_weights is None else np.asarray(state_weights, float) / np.sum(state_weights)
    floor = 1e-300

    def kl(qf):
        q = qf.reshape(B, A)
        return float(rho @ _kl_rows(q, pi_old, logp))

    def kl_grad(qf):
        q = np.maximum(qf.reshape(B, A), floor)
        return (rho[:, None] * (np.log(q) - logp + 1.0)).reshape(-1)

    def lin(M):
        return lambda qf: float(rho @ (qf.reshape(B, A) * M).sum(axis=1))

    def lin_grad(M):
        return (rho[:, None] * M).reshape(-1)

    row_sums = np.kron(np.eye(B), np.ones(A))
    simplex = [{"type": "eq", "fun": lambda qf: qf.reshape(B, A).sum(axis=1) - 1.0, "jac": lambda qf: row_sums}]
    kl_con = {"type": "ineq", "fun": lambda qf: eps2 - kl(qf), "jac": lambda qf: -kl_grad(qf)}
    cost_con = {"type": "ineq", "fun": lambda qf: eps1 - lin(Qc)(qf), "jac": lambda qf: -lin_grad(Qc)}
    bounds = [(0.0, 1.0)] * (B * A)
    opts = {"ftol": 1e-15, "maxiter": 2000}

    def refine(x0, objective_matrix, constraints):
        res = minimize(lambda x: -lin(objective_matrix)(x), x0, jac=lambda x: -lin_grad(objective_matrix),
                       bounds=bounds, constraints=constraints, method="SLSQP", options=opts)
        x = np.clip(res.x, 0.0, None).reshape(B, A)
        return x / x.sum(axis=1, keepdims=True)

    def candidates():
        rng = np.random.default_rng(seed)
        cands = [pi_old]
        if single:
            res = grid_resolution or {1: 1, 2: 2000, 3: 300, 4: 80, 5: 40, 6: 24}.get(A, 14)
            cands += list(_simplex_grid(A, res)[:, None, :])
        else:
            for t in np.linspace(0.05, 1.0, n_seeds):
                cands.append((1 - t) * pi_old + t * rng.dirichlet(np.ones(A), size=B))
        return np.asarray(cands)

    if eps2 <= 0:
        cost = lin(Qc)(pi_old.reshape(-1))
        if cost > eps1:
            return EStepPrimal(None, float("nan"), False, cost, {"reason": "degenerate trust region"})
        q = pi_old[0] if single else pi_old
        return EStepPrimal(q, lin(Qr)(pi_old.reshape(-1)), True, cost, {"kl": 0.0, "cost": cost})

    if not single and method == "barrier":
        return _batch_primal(pi_old, Qr, Qc, rho, eps1, eps2)

    cands = candidates()
    kls = (_kl_rows(cands, pi_old[None], logp[None]) * rho).sum(axis=1)
    costs = ((cands * Qc[None]).sum(axis=2) * rho).sum(axis=1)
    rewards = ((cands * Qr[None]).sum(axis=2) * rho).sum(axis=1)

    # minimal attainable cost in the trust region decides feasibility
    inside = kls <= eps2
    start = cands[np.flatnonzero(inside)[np.argmin(costs[inside])]] if inside.any() else pi_old
    q_min = refine(start.reshape(-1), -Qc, simplex + [kl_con])
    min_cost = lin(Qc)(q_min.reshape(-1))
    if min_cost > eps1 + 1e-10 or kl(q_min.reshape(-1)) > eps2 + 1e-8:
        return EStepPrimal(None, float("nan"), False, min_cost, {"reason": "no feasible q in the KL ball"})

    feasible = inside & (costs <= eps1)
    if feasible.any():
        start = cands[np.flatnonzero(feasible)[np.argmax(rewards[feasible])]]
    else:
        start = q_min
    q = refine(start.reshape(-1), Qr, simplex + [kl_con, cost_con])
    # Q_r constant in every row: any feasible point is optimal, prefer pi_old
    if np.all(np.ptp(Qr, axis=1) == 0) and lin(Qc)(pi_old.reshape(-1)) <= eps1:
        q = pi_old.copy()
    obj = lin(Qr)(q.reshape(-1))
    info = {"kl": kl(q.reshape(-1)), "cost": lin(Qc)(q.reshape(-1))}
    return EStepPrimal(q[0] if single else q, obj, True, min_cost, info)
