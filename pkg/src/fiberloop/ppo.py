"""PPO pieces: configuration, advantage estimation, LR schedule, and the update step."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteLoss
from .policy import ActorCritic, Adam, clip_grad_norm, ppo_loss


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    batch: int = 1024
    epochs_per_rollout: int = 10
    entropy_coef: float = 0.01
    n_envs: int = 30
    total_steps: int = 20_000_000
    lr_init: float = 6e-4
    lr_final: float = 2e-4
    rollout_length: int = 512
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    normalize_reward: bool = True
    log_std_init: float = 0.0
    log_std_max: float = 0.0
    holdout_fraction: float = 0.1
    checkpoint_every: int = 50

    def __post_init__(self):
        for name in ("gamma", "gae_lambda"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("clip", "batch", "epochs_per_rollout", "n_envs", "total_steps", "lr_init",
                     "lr_final", "rollout_length", "max_grad_norm", "checkpoint_every"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.entropy_coef < 0 or self.value_coef < 0:
            raise ValueError("loss coefficients must be non-negative")
        if self.log_std_init > self.log_std_max:
            raise ValueError("log_std_init must not exceed log_std_max")
        if not 0 <= self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must lie in [0, 1)")


class RolloutBuffer:
    """Time-major (T, n_envs, ...) storage for one rollout."""

    def __init__(self, length, n_envs, obs_dim=52, act_dim=4):
        self.length = length
        self.n_envs = n_envs
        self.obs = np.zeros((length, n_envs, obs_dim))
        self.actions = np.zeros((length, n_envs, act_dim))
        self.log_probs = np.zeros((length, n_envs))
        self.values = np.zeros((length, n_envs))
        self.rewards = np.zeros((length, n_envs))
        self.dones = np.zeros((length, n_envs), dtype=bool)
        self.advantages = None
        self.returns = None

    def finish(self, last_values, gamma, gae_lambda):
        self.advantages, self.returns = compute_gae(self.rewards, self.values, self.dones,
                                                    last_values, gamma, gae_lambda)

    def flat(self):
        if self.advantages is None:
            raise RuntimeError("advantages are computed by finish()")
        n = self.length * self.n_envs
        # env-major flattening keeps each environment's samples contiguous
        def f(a):
            return np.swapaxes(a, 0, 1).reshape(n, *a.shape[2:])
        return {"obs": f(self.obs), "actions": f(self.actions), "log_probs": f(self.log_probs),
                "values": f(self.values), "advantages": f(self.advantages), "returns": f(self.returns)}


def compute_gae(rewards, values, dones, last_values, gamma, gae_lambda):
    """Generalized advantage estimates and returns for time-major arrays.

    ``dones[t]`` marks that the episode ended after step ``t``; the value of
    the following state is ``values[t + 1]`` or ``last_values`` at the end.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    not_done = 1.0 - np.asarray(dones, dtype=np.float64)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    running = np.zeros_like(rewards[0])
    next_value = np.asarray(last_values, dtype=np.float64)
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * next_value * not_done[t] - values[t]
        running = delta + gamma * gae_lambda * not_done[t] * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def lr_schedule(step, total, lr_init=6e-4, lr_final=2e-4):
    """Cosine decay from ``lr_init`` at step 0 to ``lr_final`` at ``total``."""
    frac = min(max(step / total, 0.0), 1.0)
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * frac))


def normalize_advantages(adv):
    adv = np.asarray(adv, dtype=np.float64)
    centered = adv - adv.mean()
    std = centered.std()
    if std == 0 or len(adv) < 2:
        return centered
    return centered / std


def ppo_update(model: ActorCritic, optimizer: Adam, data: dict, config: PpoConfig, lr: float,
               rng: np.random.Generator) -> dict:
    """Run the configured epochs of clipped-surrogate minibatch updates in place."""
    n = len(data["obs"])
    sums: dict[str, float] = {}
    count = 0
    for _ in range(config.epochs_per_rollout):
        order = rng.permutation(n)
        for start in range(0, n, config.batch):
            idx = order[start:start + config.batch]
            report, grads = ppo_loss(
                model, data["obs"][idx], data["actions"][idx], data["log_probs"][idx],
                normalize_advantages(data["advantages"][idx]), data["returns"][idx],
                config.clip, config.entropy_coef, config.value_coef)
            if not np.isfinite(report["loss"]):
                raise NonFiniteLoss(f"PPO loss became {report['loss']}")
            grads, norm = clip_grad_norm(grads, config.max_grad_norm)
            optimizer.step(model.params, grads, lr)
            # past std 1 the clipped actions are bang-bang and extra entropy is free
            np.minimum(model.log_std, config.log_std_max, out=model.log_std)
            report["grad_norm"] = norm
            for k, v in report.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
    return {k: v / count for k, v in sums.items()}
