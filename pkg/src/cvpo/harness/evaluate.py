"""Policy evaluation and checkpoint loading."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..policy import TabularPolicy, load_modules
from .config import TrainConfig


@dataclass
class EvalResult:
    reward_mean: float
    reward_std: float
    cost_mean: float
    cost_std: float
    cost_quartiles: tuple[float, float, float]
    episodes: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_policy(policy, env, n_episodes: int, seed: int = 0, deterministic: bool = False) -> EvalResult:
    """Roll out ``n_episodes`` episodes and summarize episodic reward and cost.

    Quartiles use linear interpolation. Episode ``i`` resets the environment
    with ``seed + i`` and action noise comes from one generator seeded by ``seed``.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    rng = np.random.default_rng(seed)
    tabular = isinstance(policy, TabularPolicy)
    rewards = np.zeros(n_episodes)
    costs = np.zeros(n_episodes)
    for i in range(n_episodes):
        s = env.reset(seed=seed + i)
        done = False
        while not done:
            obs = s if tabular else env.featurize(s)
            s, r, c, done = env.step(policy.act(obs, rng, deterministic=deterministic))
            rewards[i] += r
            costs[i] += c
    q = np.quantile(costs, [0.25, 0.5, 0.75], method="linear")
    return EvalResult(float(rewards.mean()), float(rewards.std()), float(costs.mean()), float(costs.std()),
                      tuple(float(v) for v in q), n_episodes)


def load_checkpoint(path):
    """Rebuild the agent stored by ``save_checkpoint``; returns ``(agent, cfg, epoch)``."""
    from .train import build_agent

    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    manifest = path.with_suffix(".json")
    if not manifest.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
    meta = json.loads(manifest.read_text())["meta"]
    cfg = TrainConfig(**meta["config"])
    agent = build_agent(cfg)
    mods = {"policy": agent.policy, "policy_target": agent.policy.target}
    mods.update({f"critic_{k}": m for k, m in agent.critics.modules().items()})
    load_modules(path, mods)
    return agent, cfg, int(meta["epoch"])
