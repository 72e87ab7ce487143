"""Small hazard gridworld that can be solved exactly."""

from __future__ import annotations

import numpy as np

from ..cmdp_core import CmdpSpec
from .tabular_mdp import TabularCMDP

# up, right, down, left
MOVES = ((0, 1), (1, 0), (0, -1), (-1, 0))


class StepAfterTerminal(RuntimeError):
    pass


class TabularHazardGrid:
    """Agent walks from ``start`` to ``goal``; entering a hazard cell costs 1.

    With probability ``p_slip`` the executed move is drawn uniformly from the
    four directions. Moving into a wall leaves the agent in place. Reaching
    the goal pays 1 and ends the episode; so does hitting ``episode_limit``.
    """

    def __init__(
        self,
        width: int = 5,
        height: int = 5,
        hazards=((1, 1), (2, 1), (3, 1), (1, 2), (2, 2), (3, 2)),
        goal=(2, 4),
        start=(2, 0),
        p_slip: float = 0.0,
        gamma: float = 0.99,
        episode_limit: int = 50,
        episodic_cost_limit: float = 1.0,
    ):
        if not (1 <= width <= 8 and 1 <= height <= 8):
            raise ValueError("grid dimensions are limited to 8x8")
        if not 0.0 <= p_slip < 1.0:
            raise ValueError("p_slip must lie in [0, 1)")
        self.width = width
        self.height = height
        self.hazards = frozenset(tuple(h) for h in hazards)
        self.goal = tuple(goal)
        self.start = tuple(start)
        for cell in (*self.hazards, self.goal, self.start):
            if not self._inside(cell):
                raise ValueError(f"cell {cell} is outside the grid")
        if self.goal in self.hazards or self.start == self.goal:
            raise ValueError("goal must be a free cell distinct from start")
        self.p_slip = p_slip
        self.spec = CmdpSpec(
            state_dim=width * height,
            gamma=gamma,
            episode_limit=episode_limit,
            episodic_cost_limit=episodic_cost_limit,
            num_actions=4,
            discrete_states=True,
        )
        self._rng = np.random.default_rng(0)
        self._cell = self.start
        self._t = 0
        self._done = True

    # -- geometry ------------------------------------------------------------

    def _inside(self, cell) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def index(self, cell) -> int:
        return cell[1] * self.width + cell[0]

    def cell(self, index: int) -> tuple[int, int]:
        return (index % self.width, index // self.width)

    def _move(self, cell, direction: int):
        dx, dy = MOVES[direction]
        nxt = (cell[0] + dx, cell[1] + dy)
        return nxt if self._inside(nxt) else cell

    @property
    def num_states(self) -> int:
        return self.width * self.height

    @property
    def obs_dim(self) -> int:
        return self.num_states

    def featurize(self, state) -> np.ndarray:
        x = np.zeros(self.num_states)
        x[int(state)] = 1.0
        return x

    # -- episode API ---------------------------------------------------------

    def reset(self, seed: int | None = None) -> int:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self._cell = self.start
        self._t = 0
        self._done = False
        return self.index(self._cell)

    @property
    def timed_out(self) -> bool:
        return self._t >= self.spec.episode_limit and self._cell != self.goal

    def step(self, action) -> tuple[int, float, float, bool]:
        if self._done:
            raise StepAfterTerminal("step() called on a finished episode; call reset()")
        a = int(np.asarray(action).reshape(-1)[0])
        if not 0 <= a < 4:
            raise ValueError(f"invalid grid action {action}")
        if self.p_slip > 0 and self._rng.random() < self.p_slip:
            a = int(self._rng.integers(4))
        self._cell = self._move(self._cell, a)
        self._t += 1
        reward = 1.0 if self._cell == self.goal else 0.0
        cost = 1.0 if self._cell in self.hazards else 0.0
        self._done = self._cell == self.goal or self._t >= self.spec.episode_limit
        return self.index(self._cell), reward, cost, self._done

    # -- exact model -----------------------------------------------------------

    def to_tabular(self) -> TabularCMDP:
        S, A = self.num_states, 4
        P = np.zeros((S, A, S))
        g = self.index(self.goal)
        for s in range(S):
            cell = self.cell(s)
            for a in range(A):
                if s == g:
                    P[s, a, s] = 1.0
                    continue
                P[s, a, self.index(self._move(cell, a))] += 1.0 - self.p_slip
                for b in range(A):
                    P[s, a, self.index(self._move(cell, b))] += self.p_slip / A
        reward_next = np.zeros(S)
        reward_next[g] = 1.0
        cost_next = np.array([1.0 if self.cell(s) in self.hazards else 0.0 for s in range(S)])
        r = P @ reward_next
        c = P @ cost_next
        r[g] = 0.0
        c[g] = 0.0
        rho0 = np.zeros(S)
        rho0[self.index(self.start)] = 1.0
        return TabularCMDP(P, r, c, rho0, self.spec.gamma)
