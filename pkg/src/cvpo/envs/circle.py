"""Planar point mass that is paid for circulating around the origin."""

from __future__ import annotations

import numpy as np

from ..cmdp_core import CmdpSpec
from .grid import StepAfterTerminal


class PointCircle:
    """State ``(x, y, vx, vy)``; action is a 2-D acceleration clipped to [-1, 1].

    Reward is the angular momentum ``x*vy - y*vx`` damped by the distance of
    the point from the circle of radius ``radius``. Cost is 1 whenever the
    point sits outside the band ``|x| <= x_lim``.
    """

    def __init__(
        self,
        radius: float = 1.0,
        x_lim: float = 0.7,
        dt: float = 0.1,
        max_speed: float = 2.0,
        gamma: float = 0.99,
        episode_limit: int = 300,
        episodic_cost_limit: float = 10.0,
    ):
        if radius <= 0 or x_lim <= 0 or dt <= 0 or max_speed <= 0:
            raise ValueError("physical constants must be positive")
        self.radius = float(radius)
        self.x_lim = float(x_lim)
        self.dt = float(dt)
        self.max_speed = float(max_speed)
        self.spec = CmdpSpec(
            state_dim=4,
            gamma=gamma,
            episode_limit=episode_limit,
            episodic_cost_limit=episodic_cost_limit,
            action_low=(-1.0, -1.0),
            action_high=(1.0, 1.0),
        )
        self._rng = np.random.default_rng(0)
        self._state = np.zeros(4)
        self._t = 0
        self._done = True

    obs_dim = 4

    def featurize(self, state) -> np.ndarray:
        """Network input: positions squashed into (-3R, 3R), velocities as is.

        Position is unbounded, and with raw inputs one gradient step moves the
        outputs at far-away states in proportion to their distance.
        """
        s = np.asarray(state, dtype=float)
        scale = 3.0 * self.radius
        return np.concatenate([scale * np.tanh(s[..., :2] / scale), s[..., 2:]], axis=-1)

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        pos = np.clip(self._rng.normal(0.0, 0.05, size=2), -0.1, 0.1)
        self._state = np.array([pos[0], pos[1], 0.0, 0.0])
        self._t = 0
        self._done = False
        return self._state.copy()

    def reward(self, state) -> float:
        x, y, vx, vy = state
        return float((-y * vx + x * vy) / (1.0 + abs(np.hypot(x, y) - self.radius)))

    def cost(self, state) -> float:
        return 1.0 if abs(state[0]) > self.x_lim else 0.0

    @property
    def timed_out(self) -> bool:
        return self._t >= self.spec.episode_limit

    def step(self, action) -> tuple[np.ndarray, float, float, bool]:
        if self._done:
            raise StepAfterTerminal("step() called on a finished episode; call reset()")
        acc = np.clip(np.asarray(action, dtype=float).reshape(2), -1.0, 1.0)
        x, y, vx, vy = self._state
        vx, vy = vx + acc[0] * self.dt, vy + acc[1] * self.dt
        speed = np.hypot(vx, vy)
        if speed > self.max_speed:
            vx, vy = vx * self.max_speed / speed, vy * self.max_speed / speed
        x, y = x + vx * self.dt, y + vy * self.dt
        self._state = np.array([x, y, vx, vy])
        self._t += 1
        self._done = self._t >= self.spec.episode_limit
        return self._state.copy(), self.reward(self._state), self.cost(self._state), self._done
