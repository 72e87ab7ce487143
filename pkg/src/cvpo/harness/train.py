"""Off-policy training loop shared by CVPO and the primal-dual baseline."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .. import estep
from ..baseline_pd import PidState, pd_actor_step, pid_update
from ..cmdp_core import ReplayBuffer, Trajectory, Transition, convert_threshold
from ..critics import CriticPair, critic_target_pairs, polyak, policy_target_pairs, td_update
from ..diagnostics import elbo_estimate
from ..envs import make_env
from ..mstep import MStepState, policy_update
from ..policy import CategoricalPolicy, GaussianPolicy, gaussian_log_prob, save_modules
from .config import TrainConfig

METRIC_COLUMNS = (
    "epoch", "env_steps", "ep_reward_mean", "ep_cost_mean", "cumulative_cost",
    "eta", "lam", "beta_mu", "beta_sigma", "elbo", "c_mu", "c_sigma", "slater_ok",
    "loss_r", "loss_c",
)


class NumericalAbort(RuntimeError):
    pass


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


@dataclass
class Agent:
    env: object
    policy: torch.nn.Module
    critics: CriticPair
    discrete: bool

    def obs(self, state) -> np.ndarray:
        return self.env.featurize(state)


def build_agent(cfg: TrainConfig) -> Agent:
    env = make_env(cfg.env, **cfg.env_kwargs())
    spec = env.spec
    hidden = (cfg.hidden, cfg.hidden)
    if spec.is_box:
        policy = GaussianPolicy(env.obs_dim, spec.action_dim, spec.action_low, spec.action_high,
                                hidden=hidden, seed=cfg.seed, init_std=cfg.init_std,
                                min_std=cfg.min_std)
        critics = CriticPair(env.obs_dim, act_dim=spec.action_dim, hidden=hidden,
                             lr=cfg.lr_critic, seed=cfg.seed + 1)
    else:
        policy = CategoricalPolicy(env.obs_dim, spec.num_actions, hidden=hidden, seed=cfg.seed)
        critics = CriticPair(env.obs_dim, num_actions=spec.num_actions, hidden=hidden,
                             lr=cfg.lr_critic, seed=cfg.seed + 1)
    return Agent(env, policy, critics, not spec.is_box)


def rollout(agent: Agent, rng: np.random.Generator, seed: int, deterministic: bool = False) -> Trajectory:
    env = agent.env
    s = env.reset(seed=seed)
    traj = Trajectory()
    done = False
    while not done:
        o = agent.obs(s)
        a = agent.policy.act(o, rng, deterministic=deterministic)
        s2, r, c, done = env.step(a)
        terminal = done and not env.timed_out
        traj.append(Transition(o, np.atleast_1d(np.asarray(a, dtype=float)), agent.obs(s2), r, c, terminal))
        s = s2
    return traj


def _particles(agent: Agent, states: np.ndarray, K: int, rng) -> estep.ParticleSet:
    if agent.discrete:
        qr, qc = agent.critics.values(states)
        with torch.no_grad():
            logp = agent.policy(states).numpy()
        A = qr.shape[1]
        return estep.ParticleSet(qr, qc, states=states, actions=np.tile(np.arange(A), (len(states), 1)),
                                 log_base=logp)
    acts = agent.policy.sample_actions(states, K, rng)
    qr, qc = agent.critics.particle_values(states, acts)
    with torch.no_grad():
        mu, std = agent.policy(states)
        logp = gaussian_log_prob(mu[:, None, :], std[:, None, :], acts).numpy()
    return estep.ParticleSet(qr, qc, states=states, actions=acts, logp_old=logp)


def _expected_qc(agent: Agent, states, rng, n: int = 8) -> float:
    if agent.discrete:
        _, qc = agent.critics.values(states)
        return float((agent.policy.probs(states) * qc).sum(1).mean())
    acts = agent.policy.sample_actions(states, n, rng)
    _, qc = agent.critics.particle_values(states, acts)
    return float(qc.mean())


def run_training(cfg: TrainConfig, out_dir, log=None) -> Path:
    """Train, write ``metrics.csv`` (one row per epoch) and return its path."""
    cfg.validate()
    torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps())
    (out / "run.json").write_text(json.dumps({"algo": cfg.algo, "seed": cfg.seed, "env": cfg.env}))

    agent = build_agent(cfg)
    spec = agent.env.spec
    eps1 = convert_threshold(spec.episodic_cost_limit, spec.episode_limit, spec.gamma)
    rng = np.random.default_rng(cfg.seed)
    buffer = ReplayBuffer(cfg.buffer_capacity, agent.env.obs_dim, spec.action_dim, seed=cfg.seed)
    policy_opt = torch.optim.Adam(agent.policy.parameters(), lr=cfg.lr_policy)
    mstate = MStepState(alpha_mu=cfg.alpha_mu, alpha_sigma=cfg.alpha_sigma, alpha_theta=cfg.lr_policy,
                        eps_mu=cfg.eps_mu, eps_sigma=cfg.eps_sigma, M=cfg.mstep_iters)
    pid = PidState(kp=cfg.pid_kp, ki=cfg.pid_ki, kd=cfg.pid_kd, i_max=cfg.pid_i_max)
    episode_seed = cfg.seed * 1_000_003
    env_steps = 0
    cumulative_cost = 0.0
    infeasible_streak = 0

    for _ in range(cfg.warmup_episodes):
        traj = rollout(agent, rng, episode_seed)
        episode_seed += 1
        for t in traj.transitions:
            buffer.push(t)
        env_steps += len(traj)
        cumulative_cost += traj.episodic_cost

    path = out / "metrics.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for epoch in range(1, cfg.epochs + 1):
            trajs = []
            for _ in range(cfg.rollouts_per_epoch):
                traj = rollout(agent, rng, episode_seed)
                episode_seed += 1
                trajs.append(traj)
                for t in traj.transitions:
                    buffer.push(t)
            rewards = [t.episodic_reward for t in trajs]
            costs = [t.episodic_cost for t in trajs]
            env_steps += sum(len(t) for t in trajs)
            cumulative_cost += float(sum(costs))

            stats = {k: [] for k in ("loss_r", "loss_c", "eta", "elbo", "c_mu", "c_sigma", "slater", "fallback")}
            B = min(cfg.batch_size, len(buffer))
            for _ in range(cfg.updates_per_epoch):
                batch = buffer.sample_arrays(B)
                lr_, lc_ = td_update(agent.critics, batch, agent.policy, spec.gamma, cfg.next_actions, rng)
                if not (math.isfinite(lr_) and math.isfinite(lc_)):
                    raise NumericalAbort("non-finite critic loss")
                stats["loss_r"].append(lr_)
                stats["loss_c"].append(lc_)
                states = batch["state"]
                if cfg.algo == "cvpo":
                    ps = _particles(agent, states, cfg.particles, rng)
                    res = estep.run_estep(ps, eps1, cfg.eps2)
                    with torch.no_grad():
                        old = agent.policy(states)
                    try:
                        rep = policy_update(agent.policy, ps, res.weights, mstate, optimizer=policy_opt,
                                            old=old)
                    except FloatingPointError as exc:
                        raise NumericalAbort(str(exc)) from exc
                    mstate = rep.state
                    if agent.discrete:
                        with torch.no_grad():
                            log_density = agent.policy(states).numpy()
                    else:
                        with torch.no_grad():
                            mu, std = agent.policy(states)
                            log_density = gaussian_log_prob(mu[:, None, :], std[:, None, :], ps.actions).numpy()
                    stats["eta"].append(res.dual.eta)
                    stats["elbo"].append(elbo_estimate(ps, res.weights, log_density, alpha=res.dual.eta))
                    stats["c_mu"].append(rep.c_mu)
                    stats["c_sigma"].append(rep.c_sigma)
                    stats["slater"].append(float(res.slater_ok))
                    stats["fallback"].append(res.fallback)
                    lam_now = res.dual.lam
                else:
                    try:
                        pd_actor_step(agent.policy, agent.critics, states, pid.lam, policy_opt, rng)
                    except FloatingPointError as exc:
                        raise NumericalAbort(str(exc)) from exc
                polyak(critic_target_pairs(agent.critics) + policy_target_pairs(agent.policy), cfg.polyak)

            mean = lambda k: float(np.mean(stats[k])) if stats[k] else math.nan
            row = {
                "epoch": epoch, "env_steps": env_steps, "ep_reward_mean": float(np.mean(rewards)),
                "ep_cost_mean": float(np.mean(costs)), "cumulative_cost": cumulative_cost,
                "loss_r": mean("loss_r"), "loss_c": mean("loss_c"),
            }
            if cfg.algo == "pd":
                probe = buffer.sample_arrays(B)["state"]
                pid = pid_update(pid, _expected_qc(agent, probe, rng), eps1)
                row["lam"] = pid.lam
            else:
                if stats["fallback"] and all(stats["fallback"]):
                    infeasible_streak += 1
                else:
                    infeasible_streak = 0
                if infeasible_streak >= cfg.abort_after:
                    raise NumericalAbort(f"E-step infeasible for {infeasible_streak} consecutive epochs; "
                                         "the cost budget is probably unreachable")
                row.update(eta=stats["eta"][-1] if stats["eta"] else math.nan,
                           lam=lam_now if stats["eta"] else math.nan,
                           beta_mu=mstate.beta_mu, beta_sigma=mstate.beta_sigma, elbo=mean("elbo"),
                           c_mu=mean("c_mu"), c_sigma=mean("c_sigma"), slater_ok=mean("slater"))
            row = [row.get(c, math.nan) for c in METRIC_COLUMNS]
            writer.writerow([_fmt(v) for v in row])
            fh.flush()
            if log is not None:
                log(f"epoch {epoch} steps {env_steps} reward {row[2]:.3f} cost {row[3]:.1f} lam {row[6]:.4g}")
            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(out / "checkpoints" / f"epoch_{epoch:05d}", agent, cfg, epoch)
    save_checkpoint(out / "checkpoints" / "final", agent, cfg, cfg.epochs)
    return path


def save_checkpoint(path, agent: Agent, cfg: TrainConfig, epoch: int) -> None:
    mods = {"policy": agent.policy, "policy_target": agent.policy.target}
    mods.update({f"critic_{k}": m for k, m in agent.critics.modules().items()})
    save_modules(path, mods, meta={"config": cfg.to_dict(), "epoch": epoch})
