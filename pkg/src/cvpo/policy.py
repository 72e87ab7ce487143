"""Gaussian, categorical and tabular policies plus Gaussian KL helpers."""

from __future__ import annotations

import copy
import json
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

torch.set_default_dtype(torch.float64)

STD_FLOOR = 1e-6
LOG_2PI = math.log(2 * math.pi)


def mlp(in_dim: int, out_dim: int, hidden=(64, 64)) -> nn.Sequential:
    layers: list[nn.Module] = []
    d = in_dim
    for h in hidden:
        layers += [nn.Linear(d, h), nn.ReLU()]
        d = h
    layers.append(nn.Linear(d, out_dim))
    return nn.Sequential(*layers)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(torch.float64)
    return torch.as_tensor(np.asarray(x, dtype=float))


def gaussian_log_prob(mu, std, a):
    """Diagonal Gaussian log density summed over the last axis (torch)."""
    mu, std, a = _as_tensor(mu), _as_tensor(std), _as_tensor(a)
    if mu.shape[-1] != a.shape[-1]:
        raise ValueError(f"action dimension {a.shape[-1]} does not match policy dimension {mu.shape[-1]}")
    if torch.any(std <= 0):
        raise ValueError("standard deviations must be positive")
    z = (a - mu) / std
    return (-0.5 * z * z - torch.log(std) - 0.5 * LOG_2PI).sum(-1)


def gaussian_kl(mu0, std0, mu1, std1) -> np.ndarray:
    """KL(N(mu0, diag std0^2) || N(mu1, diag std1^2)) per row, closed form in numpy."""
    mu0, std0, mu1, std1 = (np.asarray(v, dtype=float) for v in (mu0, std0, mu1, std1))
    v0, v1 = std0**2, std1**2
    n = mu0.shape[-1]
    return 0.5 * ((v0 / v1).sum(-1) + ((mu1 - mu0) ** 2 / v1).sum(-1) - n
                  + 2 * (np.log(std1) - np.log(std0)).sum(-1))


def kl_parts(mu_old, std_old, mu_new, std_new):
    """Per-state mean and covariance parts of KL(old || new), both measured with the new covariance.

    Works on torch tensors so the parts can be differentiated w.r.t. the new parameters.
    """
    mu_old, std_old, mu_new, std_new = (_as_tensor(v) for v in (mu_old, std_old, mu_new, std_new))
    if mu_old.shape != mu_new.shape:
        raise ValueError("policies must share the action dimension")
    var_new = std_new**2
    c_mu = 0.5 * ((mu_new - mu_old) ** 2 / var_new).sum(-1)
    ratio = std_old**2 / var_new
    n = mu_old.shape[-1]
    c_sigma = 0.5 * (ratio.sum(-1) - n + 2 * (torch.log(std_new) - torch.log(std_old)).sum(-1))
    return c_mu, c_sigma


class GaussianPolicy(nn.Module):
    """Diagonal Gaussian with separate mean and std heads on a shared ReLU trunk.

    A frozen target copy supplies the covariance (resp. mean) for the decoupled
    M-step losses.
    """

    def __init__(self, obs_dim: int, act_dim: int, low=None, high=None, hidden=(64, 64),
                 seed: int = 0, init_std: float = 0.5, min_std: float = STD_FLOOR):
        super().__init__()
        if not 0 < min_std < init_std:
            raise ValueError("need 0 < min_std < init_std")
        self.min_std = float(min_std)
        torch.manual_seed(seed)
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.low = np.full(act_dim, -1.0) if low is None else np.asarray(low, dtype=float)
        self.high = np.full(act_dim, 1.0) if high is None else np.asarray(high, dtype=float)
        self.trunk = mlp(obs_dim, hidden[-1], hidden[:-1]) if hidden else nn.Identity()
        feat = hidden[-1] if hidden else obs_dim
        self.mean_head = nn.Linear(feat, act_dim)
        self.std_head = nn.Linear(feat, act_dim)
        with torch.no_grad():
            self.mean_head.weight.mul_(0.01)
            self.mean_head.bias.zero_()
            self.std_head.weight.mul_(0.01)
            # softplus^-1(init_std - floor)
            self.std_head.bias.fill_(math.log(math.expm1(init_std - self.min_std)))
        self.target = None
        self.sync_target()

    def _features(self, s):
        h = self.trunk(s)
        return F.relu(h) if not isinstance(self.trunk, nn.Identity) else h

    def forward(self, states):
        s = _as_tensor(states)
        h = self._features(s)
        return self.mean_head(h), F.softplus(self.std_head(h)) + self.min_std

    def sync_target(self) -> None:
        self.target = None
        tgt = copy.deepcopy(self)
        for p in tgt.parameters():
            p.requires_grad_(False)
        # keep out of the module registry so parameters() lists online weights only
        object.__setattr__(self, "target", tgt)

    def target_params(self, states):
        with torch.no_grad():
            return self.target(states)

    def log_prob(self, states, actions, use_target: bool = False):
        mu, std = self.target_params(states) if use_target else self(states)
        return gaussian_log_prob(mu, std, actions)

    def sample_actions(self, states, K: int, rng: np.random.Generator, clip: bool = True) -> np.ndarray:
        """``K`` i.i.d. actions per state, shape ``(B, K, act_dim)``."""
        if K < 1:
            raise ValueError("K must be >= 1")
        with torch.no_grad():
            mu, std = self(np.atleast_2d(states))
        mu, std = mu.numpy()[:, None, :], std.numpy()[:, None, :]
        a = mu + std * rng.standard_normal((mu.shape[0], K, self.act_dim))
        return np.clip(a, self.low, self.high) if clip else a

    def act(self, state, rng: np.random.Generator | None = None, deterministic: bool = False) -> np.ndarray:
        with torch.no_grad():
            mu, std = self(np.atleast_2d(state))
        a = mu.numpy()[0]
        if not deterministic:
            a = a + std.numpy()[0] * rng.standard_normal(self.act_dim)
        return np.clip(a, self.low, self.high)

    def mean_std(self, states) -> tuple[np.ndarray, np.ndarray]:
        with torch.no_grad():
            mu, std = self(states)
        return mu.numpy(), std.numpy()


class CategoricalPolicy(nn.Module):
    """Softmax policy over a finite action set; the target copy mirrors the Gaussian case."""

    def __init__(self, obs_dim: int, num_actions: int, hidden=(64, 64), seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.obs_dim, self.num_actions = obs_dim, num_actions
        self.net = mlp(obs_dim, num_actions, hidden)
        with torch.no_grad():
            self.net[-1].weight.mul_(0.01)
            self.net[-1].bias.zero_()
        self.target = None
        self.sync_target()

    def forward(self, states):
        return torch.log_softmax(self.net(_as_tensor(states)), dim=-1)

    sync_target = GaussianPolicy.sync_target

    def log_probs(self, states, use_target: bool = False):
        if use_target:
            with torch.no_grad():
                return self.target(states)
        return self(states)

    def probs(self, states) -> np.ndarray:
        with torch.no_grad():
            return torch.exp(self(np.atleast_2d(states))).numpy()

    def act(self, state, rng: np.random.Generator | None = None, deterministic: bool = False) -> int:
        p = self.probs(state)[0]
        if deterministic:
            return int(np.argmax(p))
        return int(rng.choice(self.num_actions, p=p / p.sum()))


class TabularPolicy:
    """Policy table stored as logits so that tiny probabilities do not underflow."""

    def __init__(self, logits):
        logits = np.asarray(logits, dtype=float)
        if logits.ndim != 2:
            raise ValueError("logits must be |S| x |A|")
        self.logits = logits - logits.max(axis=1, keepdims=True)

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "TabularPolicy":
        return cls(np.zeros((num_states, num_actions)))

    @classmethod
    def from_probs(cls, probs) -> "TabularPolicy":
        with np.errstate(divide="ignore"):
            return cls(np.log(np.asarray(probs, dtype=float)))

    @property
    def log_probs(self) -> np.ndarray:
        z = self.logits
        m = z.max(axis=1, keepdims=True)
        return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    @property
    def shape(self):
        return self.logits.shape

    def act(self, state, rng: np.random.Generator | None = None, deterministic: bool = False) -> int:
        p = self.probs[int(state)]
        if deterministic:
            return int(np.argmax(p))
        return int(rng.choice(len(p), p=p))


def kl_decomposed(pi_old, pi_new, states) -> tuple[float, float]:
    """Batch means of the mean and covariance parts of KL(pi_old || pi_new).

    ``pi_old`` and ``pi_new`` are either Gaussian policies or ``(mu, std)`` pairs
    already evaluated on ``states``.
    """
    if len(states) == 0:
        raise ValueError("need at least one state")

    def params(pi):
        if isinstance(pi, GaussianPolicy):
            return pi.mean_std(states)
        return pi

    mu0, s0 = params(pi_old)
    mu1, s1 = params(pi_new)
    if np.shape(mu0) != np.shape(mu1):
        raise ValueError("policies must share the action dimension")
    c_mu, c_sigma = kl_parts(mu0, s0, mu1, s1)
    return float(c_mu.mean()), float(c_sigma.mean())


# -- checkpoints ---------------------------------------------------------------


def flat_state(module: nn.Module, prefix: str = "") -> tuple[np.ndarray, list[dict]]:
    """Concatenate every tensor of the module's state dict into one float64 vector."""
    chunks, manifest, offset = [], [], 0
    for name, t in module.state_dict().items():
        arr = t.detach().cpu().numpy().astype(np.float64).ravel()
        manifest.append({"name": prefix + name, "shape": list(t.shape), "offset": offset, "size": arr.size})
        chunks.append(arr)
        offset += arr.size
    return (np.concatenate(chunks) if chunks else np.zeros(0)), manifest


def load_flat_state(module: nn.Module, flat: np.ndarray, manifest: list[dict], prefix: str = "") -> None:
    sd = module.state_dict()
    entries = {m["name"]: m for m in manifest}
    new = {}
    for name, t in sd.items():
        m = entries[prefix + name]
        if list(t.shape) != m["shape"]:
            raise ValueError(f"shape mismatch for {name}: {list(t.shape)} vs {m['shape']}")
        block = flat[m["offset"]: m["offset"] + m["size"]]
        new[name] = torch.as_tensor(block.reshape(m["shape"]).copy(), dtype=t.dtype)
    module.load_state_dict(new)


def save_modules(path, modules: dict[str, nn.Module], meta: dict | None = None) -> None:
    """Write ``<path>.bin`` (little-endian float64) and ``<path>.json`` (shape manifest)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    flats, manifest, offset = [], [], 0
    for key, mod in modules.items():
        flat, man = flat_state(mod, prefix=f"{key}.")
        for m in man:
            m["offset"] += offset
        offset += flat.size
        flats.append(flat)
        manifest += man
    np.concatenate(flats).astype("<f8").tofile(path.with_suffix(".bin"))
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump({"dtype": "<f8", "tensors": manifest, "meta": meta or {}}, fh, indent=1)


def load_modules(path, modules: dict[str, nn.Module]) -> dict:
    path = Path(path)
    with open(path.with_suffix(".json")) as fh:
        doc = json.load(fh)
    flat = np.fromfile(path.with_suffix(".bin"), dtype=doc["dtype"]).astype(np.float64)
    for key, mod in modules.items():
        load_flat_state(mod, flat, doc["tensors"], prefix=f"{key}.")
    return doc["meta"]
