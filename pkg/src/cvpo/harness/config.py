"""Training configuration: a flat ``key = value`` file plus command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    env: str = "circle"
    algo: str = "cvpo"
    seed: int = 0
    epochs: int = 100
    # trajectories collected per epoch and learning updates after each rollout
    rollouts_per_epoch: int = 1
    updates_per_epoch: int = 20
    batch_size: int = 300
    particles: int = 32
    mstep_iters: int = 6
    gamma: float = 0.99
    polyak: float = 0.995
    lr_critic: float = 1e-3
    lr_policy: float = 0.002
    alpha_mu: float = 1.0
    alpha_sigma: float = 100.0
    eps2: float = 0.1
    eps_mu: float = 1e-3
    eps_sigma: float = 1e-4
    hidden: int = 64
    n_next: int = 0  # 0 means particles // 4
    buffer_capacity: int = 200_000
    warmup_episodes: int = 0
    init_std: float = 0.5
    # std floor; keeps the KL terms bounded at states far from the data
    min_std: float = 0.01
    # episodic cost budget and horizon; negative means the environment default
    episodic_cost_limit: float = -1.0
    episode_limit: int = -1
    # environment constants
    p_slip: float = 0.0
    radius: float = 1.0
    x_lim: float = 0.7
    dt: float = 0.1
    max_speed: float = 2.0
    # primal-dual baseline
    pid_kp: float = 1.0
    pid_ki: float = 0.1
    pid_kd: float = 0.0
    pid_i_max: float = 1e3
    # bookkeeping
    checkpoint_every: int = 0
    abort_after: int = 20

    def validate(self) -> "TrainConfig":
        if self.env not in ("grid", "circle"):
            raise ConfigError(f"unknown env {self.env!r}")
        if self.algo not in ("cvpo", "pd"):
            raise ConfigError(f"unknown algo {self.algo!r}")
        positive = ["epochs", "rollouts_per_epoch", "batch_size", "particles", "mstep_iters",
                    "lr_critic", "lr_policy", "eps2", "eps_mu", "eps_sigma", "hidden",
                    "buffer_capacity", "init_std", "min_std", "dt", "radius", "x_lim", "max_speed", "abort_after"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.updates_per_epoch < 0 or self.warmup_episodes < 0 or self.checkpoint_every < 0:
            raise ConfigError("counts must be nonnegative")
        if self.min_std >= self.init_std:
            raise ConfigError("min_std must be below init_std")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if not 0.0 <= self.polyak <= 1.0:
            raise ConfigError("polyak must lie in [0, 1]")
        if not 0.0 <= self.p_slip < 1.0:
            raise ConfigError("p_slip must lie in [0, 1)")
        if self.particles < 2 and self.env == "circle":
            raise ConfigError("need at least two particles")
        return self

    @property
    def next_actions(self) -> int:
        return self.n_next if self.n_next > 0 else max(1, self.particles // 4)

    def env_kwargs(self) -> dict:
        kw = {"gamma": self.gamma}
        if self.episodic_cost_limit >= 0:
            kw["episodic_cost_limit"] = self.episodic_cost_limit
        if self.episode_limit > 0:
            kw["episode_limit"] = self.episode_limit
        if self.env == "grid":
            kw["p_slip"] = self.p_slip
        else:
            kw.update(radius=self.radius, x_lim=self.x_lim, dt=self.dt, max_speed=self.max_speed)
        return kw

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())


def _coerce(name: str, typ, raw: str):
    raw = raw.strip()
    try:
        if typ in (int, "int"):
            try:
                return int(raw)
            except ValueError:
                v = float(raw)  # allow 1e5 style
                if not v.is_integer():
                    raise
                return int(v)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    cfg = dataclasses.replace(base) if base is not None else TrainConfig()
    types = {f.name: f.type for f in fields(TrainConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _coerce(key, types[key], value))
    return cfg


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    cfg = TrainConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        cfg = parse_config(p.read_text(), cfg)
    types = {f.name: f.type for f in fields(TrainConfig)}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in types:
            raise ConfigError(f"unknown key {key!r}")
        setattr(cfg, key, _coerce(key, types[key], str(value)))
    return cfg.validate()
