"""Reward and cost critics trained on the mean-squared Bellman error."""

from __future__ import annotations

import copy

import numpy as np
import torch
import torch.nn as nn

from .policy import CategoricalPolicy, GaussianPolicy, TabularPolicy, _as_tensor, mlp


def _frozen_copy(m: nn.Module) -> nn.Module:
    t = copy.deepcopy(m)
    for p in t.parameters():
        p.requires_grad_(False)
    return t


class CriticPair:
    """Q_r and Q_c networks with polyak-averaged targets.

    Box actions: the networks take ``[s, a]`` and return one value.
    Finite actions: the networks take ``s`` and return one value per action.
    ``hidden=()`` with one-hot states gives an exact tabular critic.
    """

    def __init__(self, obs_dim: int, act_dim: int | None = None, num_actions: int | None = None,
                 hidden=(64, 64), lr: float = 1e-3, seed: int = 0, optimizer: str = "adam"):
        if (act_dim is None) == (num_actions is None):
            raise ValueError("give exactly one of act_dim and num_actions")
        torch.manual_seed(seed)
        self.discrete = num_actions is not None
        out = num_actions if self.discrete else 1
        inp = obs_dim if self.discrete else obs_dim + act_dim
        if hidden:
            self.qr = mlp(inp, out, hidden)
            self.qc = mlp(inp, out, hidden)
        else:
            # a plain table: no bias, so every entry is its own parameter
            self.qr = nn.Sequential(nn.Linear(inp, out, bias=False))
            self.qc = nn.Sequential(nn.Linear(inp, out, bias=False))
            with torch.no_grad():
                self.qr[0].weight.zero_()
                self.qc[0].weight.zero_()
        self.qr_targ = _frozen_copy(self.qr)
        self.qc_targ = _frozen_copy(self.qc)
        opt = torch.optim.Adam if optimizer == "adam" else torch.optim.SGD
        self.opt_r = opt(self.qr.parameters(), lr=lr)
        self.opt_c = opt(self.qc.parameters(), lr=lr)

    def _raw(self, net, states, actions):
        s = _as_tensor(states)
        if self.discrete:
            out = net(s)
            if actions is None:
                return out
            idx = torch.as_tensor(np.asarray(actions), dtype=torch.long).reshape(-1, 1)
            return out.gather(1, idx)[:, 0]
        return net(torch.cat([s, _as_tensor(actions)], dim=-1))[..., 0]

    def values(self, states, actions=None, target: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Evaluate (Q_r, Q_c) without gradients; Q_c is clamped at zero."""
        qr_net, qc_net = (self.qr_targ, self.qc_targ) if target else (self.qr, self.qc)
        with torch.no_grad():
            qr = self._raw(qr_net, states, actions)
            qc = torch.clamp(self._raw(qc_net, states, actions), min=0.0)
        return qr.numpy(), qc.numpy()

    def particle_values(self, states, particles) -> tuple[np.ndarray, np.ndarray]:
        """Critic values on a ``(B, K, n)`` particle block, returned as ``(B, K)`` matrices."""
        B, K = particles.shape[:2]
        s = np.repeat(np.asarray(states, dtype=float), K, axis=0)
        qr, qc = self.values(s, particles.reshape(B * K, -1))
        return qr.reshape(B, K), qc.reshape(B, K)

    def modules(self) -> dict[str, nn.Module]:
        return {"qr": self.qr, "qc": self.qc, "qr_targ": self.qr_targ, "qc_targ": self.qc_targ}


def _next_expectation(critics: CriticPair, next_states, policy, n_next: int, rng) -> tuple[torch.Tensor, torch.Tensor]:
    """E_{a'~pi}[Q'(s', a')] under the target critics (Q_c' clamped at zero)."""
    s2 = np.asarray(next_states, dtype=float)
    if critics.discrete:
        qr_all, qc_all = critics.values(s2, None, target=True)
        if isinstance(policy, TabularPolicy):
            raise TypeError("pass a network policy or precomputed probabilities for network critics")
        probs = policy.probs(s2) if isinstance(policy, CategoricalPolicy) else np.asarray(policy)
        return torch.as_tensor((probs * qr_all).sum(1)), torch.as_tensor((probs * qc_all).sum(1))
    acts = policy.sample_actions(s2, n_next, rng)
    qr, qc = critics.values(np.repeat(s2, n_next, axis=0), acts.reshape(len(s2) * n_next, -1), target=True)
    return (torch.as_tensor(qr.reshape(len(s2), n_next).mean(1)),
            torch.as_tensor(qc.reshape(len(s2), n_next).mean(1)))


def td_update(critics: CriticPair, batch: dict, policy, gamma: float, n_next: int = 8,
              rng: np.random.Generator | None = None) -> tuple[float, float]:
    """One gradient step on each Bellman regression; returns the pre-step losses.

    ``batch`` holds arrays ``state, action, next_state, reward, cost, terminal``.
    Terminal transitions regress onto the immediate reward (cost).
    """
    if len(batch["reward"]) == 0:
        raise ValueError("empty batch")
    rng = rng if rng is not None else np.random.default_rng(0)
    v_r, v_c = _next_expectation(critics, batch["next_state"], policy, n_next, rng)
    live = torch.as_tensor(1.0 - np.asarray(batch["terminal"], dtype=float))
    y_r = torch.as_tensor(np.asarray(batch["reward"], dtype=float)) + gamma * live * v_r
    y_c = torch.as_tensor(np.asarray(batch["cost"], dtype=float)) + gamma * live * v_c
    actions = batch["action"]
    if critics.discrete:
        actions = np.asarray(actions).reshape(-1).astype(int)
    losses = []
    for net, opt, y in ((critics.qr, critics.opt_r, y_r), (critics.qc, critics.opt_c, y_c)):
        pred = critics._raw(net, batch["state"], actions)
        loss = ((pred - y) ** 2).mean()
        if not torch.isfinite(loss):
            raise FloatingPointError("non-finite critic loss")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return losses[0], losses[1]


def polyak(pairs, rho: float) -> None:
    """``target <- rho * target + (1 - rho) * online`` for every (target, online) module pair."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"polyak weight must lie in [0, 1], got {rho}")
    with torch.no_grad():
        for target, online in pairs:
            tp, op = list(target.parameters()), list(online.parameters())
            if len(tp) != len(op):
                raise ValueError("target and online modules differ in structure")
            for t, o in zip(tp, op):
                if t.shape != o.shape:
                    raise ValueError("target and online parameter shapes differ")
                t.mul_(rho).add_((1.0 - rho) * o)


def critic_target_pairs(critics: CriticPair):
    return [(critics.qr_targ, critics.qr), (critics.qc_targ, critics.qc)]


def policy_target_pairs(policy):
    return [(policy.target, policy)]
