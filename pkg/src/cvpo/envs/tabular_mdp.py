from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TabularCMDP:
    """Finite CMDP with expected one-step reward and cost tables.

    ``P[s, a, s2]`` is the transition kernel. Terminal states are modelled as
    zero-reward, zero-cost absorbing states so discounted sums stay finite.
    """

    P: np.ndarray
    r: np.ndarray
    c: np.ndarray
    rho0: np.ndarray
    gamma: float

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        self.rho0 = np.asarray(self.rho0, dtype=float)
        S, A, S2 = self.P.shape
        if S != S2 or self.r.shape != (S, A) or self.c.shape != (S, A) or self.rho0.shape != (S,):
            raise ValueError("inconsistent CMDP table shapes")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if np.any(self.P < 0) or not np.allclose(self.P.sum(axis=2), 1.0, atol=1e-12):
            raise ValueError("transition rows must be distributions")
        if np.any(self.c < 0):
            raise ValueError("costs must be nonnegative")

    @property
    def num_states(self) -> int:
        return self.P.shape[0]

    @property
    def num_actions(self) -> int:
        return self.P.shape[1]

    def state_transition(self, policy: np.ndarray) -> np.ndarray:
        """Markov chain ``P_pi[s, s2]`` under a stochastic policy table."""
        return np.einsum("sa,sat->st", policy, self.P)
