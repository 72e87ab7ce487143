"""CMDP records, replay storage and the episodic-to-discounted cost threshold."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class CmdpSpec:
    """Static description of a constrained MDP.

    ``action_low``/``action_high`` describe a box action space; ``num_actions``
    a finite one. Exactly one of the two must be given.
    """

    state_dim: int
    gamma: float
    episode_limit: int
    episodic_cost_limit: float
    action_low: tuple[float, ...] | None = None
    action_high: tuple[float, ...] | None = None
    num_actions: int | None = None
    # tabular environments observe a state index instead of a vector
    discrete_states: bool = False

    def __post_init__(self):
        if self.state_dim < 1:
            raise ValueError("state_dim must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.episode_limit < 1:
            raise ValueError("episode_limit must be >= 1")
        if self.episodic_cost_limit < 0:
            raise ValueError("episodic_cost_limit must be nonnegative")
        box = self.action_low is not None or self.action_high is not None
        if box == (self.num_actions is not None):
            raise ValueError("give either box bounds or num_actions")
        if box:
            low = np.asarray(self.action_low, dtype=float)
            high = np.asarray(self.action_high, dtype=float)
            if low.shape != high.shape or low.ndim != 1:
                raise ValueError("box bounds must be 1-D and of equal length")
            if not (np.all(np.isfinite(low)) and np.all(np.isfinite(high))):
                raise ValueError("box bounds must be finite")
            if np.any(low >= high):
                raise ValueError("box bounds need low < high")
        elif self.num_actions < 1:
            raise ValueError("num_actions must be positive")

    @property
    def is_box(self) -> bool:
        return self.num_actions is None

    @property
    def action_dim(self) -> int:
        return len(self.action_low) if self.is_box else 1

    @property
    def eps1(self) -> float:
        return convert_threshold(self.episodic_cost_limit, self.episode_limit, self.gamma)


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    reward: float
    cost: float
    terminal: bool

    def __post_init__(self):
        if not self.cost >= 0.0:
            raise ValueError(f"costs are nonnegative, got {self.cost}")


@dataclass
class Trajectory:
    transitions: list[Transition] = field(default_factory=list)

    def append(self, t: Transition) -> None:
        self.transitions.append(t)

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def episodic_reward(self) -> float:
        return float(sum(t.reward for t in self.transitions))

    @property
    def episodic_cost(self) -> float:
        return float(sum(t.cost for t in self.transitions))


def convert_threshold(eps_T: float, T: int, gamma: float) -> float:
    """Per-state discounted cost budget from an undiscounted episodic budget.

    Assumes violations are equally likely at every step of a length-``T``
    episode: ``eps_T * (1 - gamma**T) / (T * (1 - gamma))``.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    if T < 1:
        raise ValueError("T must be >= 1")
    if eps_T < 0:
        raise ValueError("eps_T must be nonnegative")
    if T == 1:
        return float(eps_T)
    return float(eps_T * (1.0 - gamma**T) / (T * (1.0 - gamma)))


def _as_row(x, dim: int, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if arr.shape[0] != dim:
        raise DimensionError(f"{name} has dimension {arr.shape[0]}, expected {dim}")
    return arr


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions stored column-wise.

    Sampling is uniform without replacement within a batch, driven by a
    private ``numpy.random.Generator`` seeded at construction (and on
    :meth:`reset`).
    """

    FIELDS = ("state", "action", "next_state", "reward", "cost", "terminal")

    def __init__(self, capacity: int, state_dim: int, action_dim: int, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.seed = seed
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.next_states = np.zeros((capacity, state_dim))
        self.rewards = np.zeros(capacity)
        self.costs = np.zeros(capacity)
        self.terminals = np.zeros(capacity, dtype=bool)
        self._next = 0
        self.size = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return self.size

    def reset(self) -> None:
        self._next = 0
        self.size = 0
        self.rng = np.random.default_rng(self.seed)

    def push(self, t: Transition) -> None:
        s = _as_row(t.state, self.state_dim, "state")
        a = _as_row(t.action, self.action_dim, "action")
        s2 = _as_row(t.next_state, self.state_dim, "next_state")
        i = self._next
        self.states[i] = s
        self.actions[i] = a
        self.next_states[i] = s2
        self.rewards[i] = float(t.reward)
        self.costs[i] = float(t.cost)
        self.terminals[i] = bool(t.terminal)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        # slot indices from oldest to newest
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self._next) % self.capacity

    def transition(self, slot: int) -> Transition:
        return Transition(
            self.states[slot].copy(),
            self.actions[slot].copy(),
            self.next_states[slot].copy(),
            float(self.rewards[slot]),
            float(self.costs[slot]),
            bool(self.terminals[slot]),
        )

    def items(self) -> list[Transition]:
        return [self.transition(i) for i in self._order()]

    def sample_indices(self, batch_size: int) -> np.ndarray:
        if batch_size < 1:
            raise ValueError("batch size must be positive")
        if batch_size > self.size:
            raise InsufficientDataError(
                f"requested {batch_size} transitions from a buffer holding {self.size}"
            )
        return self.rng.choice(self.size, size=batch_size, replace=False)

    def sample_arrays(self, batch_size: int) -> dict[str, np.ndarray]:
        idx = self.sample_indices(batch_size)
        return {
            "state": self.states[idx],
            "action": self.actions[idx],
            "next_state": self.next_states[idx],
            "reward": self.rewards[idx],
            "cost": self.costs[idx],
            "terminal": self.terminals[idx],
        }

    def sample_batch(self, batch_size: int) -> list[Transition]:
        return [self.transition(i) for i in self.sample_indices(batch_size)]

    # -- checkpointing -------------------------------------------------------

    def to_json(self) -> dict:
        """Oldest-first records; each record lists the fields in ``FIELDS`` order."""
        records = [
            [
                self.states[i].tolist(),
                self.actions[i].tolist(),
                self.next_states[i].tolist(),
                float(self.rewards[i]),
                float(self.costs[i]),
                bool(self.terminals[i]),
            ]
            for i in self._order()
        ]
        return {
            "capacity": self.capacity,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "seed": self.seed,
            "fields": list(self.FIELDS),
            "records": records,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "ReplayBuffer":
        buf = cls(payload["capacity"], payload["state_dim"], payload["action_dim"], payload["seed"])
        for rec in payload["records"]:
            buf.push(Transition(np.asarray(rec[0]), np.asarray(rec[1]), np.asarray(rec[2]),
                                rec[3], rec[4], rec[5]))
        return buf

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "ReplayBuffer":
        return cls.from_json(json.loads(Path(path).read_text()))


def trajectory_totals(trajectories: Iterable[Trajectory]) -> tuple[np.ndarray, np.ndarray]:
    trajs: Sequence[Trajectory] = list(trajectories)
    rewards = np.array([t.episodic_reward for t in trajs])
    costs = np.array([t.episodic_cost for t in trajs])
    return rewards, costs
