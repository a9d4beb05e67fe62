"""Curriculum PPO training of the shape-regulation policy."""

from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import seeding
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import Dataset, sample_pair
from .env import ACT_DIM, OBS_DIM, CurriculumState, EnvConfig, FiberShapeEnv, curriculum_update
from .errors import NumericalDivergence
from .policy import ActorCritic, Adam, gaussian_log_prob
from .ppo import PpoConfig, RolloutBuffer, lr_schedule, ppo_update
from .preprocessing import ReturnScaler, RunningNorm
from .rod import RodParams

log = logging.getLogger(__name__)

METRIC_FIELDS = ["update", "timesteps", "lr", "level", "window_success_rate", "episodes",
                 "mean_episode_reward", "mean_final_e_mean", "rollout_success_rate", "policy_loss",
                 "value_loss", "entropy", "clip_fraction", "approx_kl", "grad_norm", "reward_scale"]


def split_holdout(n_records: int, fraction: float, seed: int):
    """Deterministic (train, held-out) record index split."""
    order = seeding.rng(seed, "split").permutation(n_records)
    n_hold = int(round(fraction * n_records))
    if n_records - n_hold < 1:
        n_hold = n_records - 1
    return np.sort(order[n_hold:]), np.sort(order[:n_hold])


def format_row(row: dict) -> dict:
    return {k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()}


class PPOShapeController(BaseEstimator):
    """Shape-regulation policy trained with curriculum PPO.

    ``fit`` takes a :class:`~fiberloop.dataset.Dataset` of settled shapes and
    trains in the frictionless simulator; ``predict`` maps raw 52-dim
    observations to deterministic actions in [-1, 1]^4 using the frozen
    observation statistics.
    """

    def __init__(self, env_config=None, ppo_config=None, hidden_sizes=(128, 128, 64), random_state=0,
                 same_branch=True, verbose=0):
        self.env_config = env_config
        self.same_branch = same_branch
        self.ppo_config = ppo_config
        self.hidden_sizes = hidden_sizes
        self.random_state = random_state
        self.verbose = verbose

    # --- sklearn surface -------------------------------------------------
    def fit(self, dataset: Dataset, y=None, metrics_path=None, checkpoint_dir=None, resume_from=None):
        env_config = self.env_config or EnvConfig(state_points=dataset.state_points)
        ppo = self.ppo_config or PpoConfig()
        seed = int(self.random_state)
        self.rod_params_ = dataset.rod_params
        self.env_config_ = env_config
        train_idx, holdout_idx = split_holdout(len(dataset), ppo.holdout_fraction, seed)
        self.train_indices_ = train_idx
        self.holdout_indices_ = holdout_idx
        run = _TrainingRun(dataset.subset(train_idx), env_config, ppo, tuple(self.hidden_sizes), seed,
                           metrics_path, checkpoint_dir, self.verbose, self.same_branch)
        if resume_from is not None:
            run.restore(resume_from)
        run.train()
        self.model_ = run.model
        self.normalizer_ = run.norm
        self.curriculum_ = run.curriculum
        self.history_ = run.history
        self.episodes_ = run.episodes
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(np.atleast_2d(X), dtype=np.float64)
        mean, _, _ = self.model_.forward(self.normalizer_.transform(X))
        return np.clip(mean, -1.0, 1.0)

    def save(self, path, meta=None):
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, self.normalizer_, self.rod_params_, self.env_config_,
                        meta=meta)

    @classmethod
    def load(cls, path):
        model, norm, rod, env_config, header, _ = load_checkpoint(path)
        est = cls(env_config=env_config, hidden_sizes=tuple(header["hidden"]))
        est.model_ = model
        est.normalizer_ = norm
        est.rod_params_ = rod
        est.env_config_ = env_config
        return est


class DeterministicPolicy:
    """Frozen normalizer plus actor mean; the deployment-time controller."""

    def __init__(self, model: ActorCritic, norm: RunningNorm):
        self.model = model
        self.norm = norm

    def __call__(self, obs):
        mean, _, _ = self.model.forward(self.norm.transform(np.asarray(obs, dtype=np.float64)))
        return np.clip(mean, -1.0, 1.0)

    @classmethod
    def from_checkpoint(cls, path):
        model, norm, rod, env_config, _, _ = load_checkpoint(path)
        return cls(model, norm), rod, env_config


class _TrainingRun:
    def __init__(self, dataset, env_config, ppo, hidden, seed, metrics_path, checkpoint_dir, verbose,
                 same_branch=True):
        self.dataset = dataset
        self.same_branch = same_branch
        self.env_config = env_config
        self.ppo = ppo
        self.seed = seed
        self.metrics_path = None if metrics_path is None else Path(metrics_path)
        self.checkpoint_dir = None if checkpoint_dir is None else Path(checkpoint_dir)
        self.verbose = verbose
        rod = dataset.rod_params
        self.rod = rod
        self.model = ActorCritic(OBS_DIM, ACT_DIM, hidden, seed=seeding.int_seed(seed, "weights"),
                                 log_std_init=ppo.log_std_init)
        self.optimizer = Adam(self.model.params, lr=ppo.lr_init)
        self.norm = RunningNorm()
        self.norm._reset(OBS_DIM)
        self.scaler = ReturnScaler(ppo.n_envs, ppo.gamma) if ppo.normalize_reward else None
        self.curriculum = CurriculumState()
        self.envs = [FiberShapeEnv(rod, env_config) for _ in range(ppo.n_envs)]
        self.env_rngs = [seeding.rng(seed, "envs", i) for i in range(ppo.n_envs)]
        self.action_rng = seeding.rng(seed, "actions")
        self.minibatch_rng = seeding.rng(seed, "minibatch")
        self.timesteps = 0
        self.update = 0
        self.history = []
        self.episodes = []
        self.recent = deque(maxlen=100)
        self.episode_return = np.zeros(ppo.n_envs)

    # --- episodes ---------------------------------------------------------
    def _reset_env(self, i):
        env = self.envs[i]
        init, target = sample_pair(self.dataset, self.env_rngs[i], self.same_branch)
        env.level = self.curriculum.level
        obs = env.reset(init, target, seed=int(self.env_rngs[i].integers(2**31)))
        env.pair_ids = (init.id, target.id)
        return obs

    def _finish_episode(self, i, success, final_e_mean):
        env = self.envs[i]
        ep = {"env": i, "init_id": env.pair_ids[0], "target_id": env.pair_ids[1], "level": env.level,
              "success": bool(success), "return": float(self.episode_return[i]),
              "final_e_mean": float(final_e_mean), "timesteps": self.timesteps}
        self.episodes.append(ep)
        self.recent.append(ep)
        curriculum_update(self.curriculum, success)
        self.episode_return[i] = 0.0

    # --- main loop ----------------------------------------------------------
    def train(self):
        ppo = self.ppo
        n = ppo.n_envs
        obs = np.stack([self._reset_env(i) for i in range(n)])
        writer = None
        fh = None
        if self.metrics_path is not None:
            self.metrics_path.parent.mkdir(parents=True, exist_ok=True)
            kept = []
            if self.update > 0 and self.metrics_path.exists():
                # rows logged after the checkpoint we resumed from are replayed
                with open(self.metrics_path, newline="") as old:
                    kept = [r for r in csv.DictReader(old) if int(r["update"]) <= self.update]
            fh = open(self.metrics_path, "w", newline="")
            writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(kept)
        try:
            while self.timesteps < ppo.total_steps:
                length = min(ppo.rollout_length, -(-(ppo.total_steps - self.timesteps) // n))
                buf = RolloutBuffer(length, n)
                episodes_before = len(self.episodes)
                obs = self._collect(buf, obs)
                lr = lr_schedule(self.timesteps, ppo.total_steps, ppo.lr_init, ppo.lr_final)
                report = ppo_update(self.model, self.optimizer, buf.flat(), ppo, lr, self.minibatch_rng)
                self.update += 1
                new_eps = self.episodes[episodes_before:]
                row = {
                    "update": self.update, "timesteps": self.timesteps, "lr": lr,
                    "level": self.curriculum.level, "window_success_rate": self.curriculum.success_rate,
                    "episodes": len(new_eps),
                    "mean_episode_reward": float(np.mean([e["return"] for e in self.recent])) if self.recent else float("nan"),
                    "mean_final_e_mean": float(np.mean([e["final_e_mean"] for e in self.recent])) if self.recent else float("nan"),
                    "rollout_success_rate": float(np.mean([e["success"] for e in new_eps])) if new_eps else float("nan"),
                    "reward_scale": self.scaler.scale if self.scaler else 1.0,
                }
                for k in ("policy_loss", "value_loss", "entropy", "clip_fraction", "approx_kl", "grad_norm"):
                    row[k] = report[k]
                self.history.append(row)
                if writer is not None:
                    writer.writerow(format_row(row))
                    fh.flush()
                if self.verbose:
                    log.info("update %d steps %d level %d e_mean %.3f reward %.1f", self.update,
                             self.timesteps, row["level"], row["mean_final_e_mean"], row["mean_episode_reward"])
                if self.checkpoint_dir is not None and (self.update % ppo.checkpoint_every == 0
                                                        or self.timesteps >= ppo.total_steps):
                    self.checkpoint(self.checkpoint_dir / f"ckpt_{self.update:05d}.bin")
                    self.checkpoint(self.checkpoint_dir / "last.bin")
        finally:
            if fh is not None:
                fh.close()

    def _collect(self, buf: RolloutBuffer, obs):
        ppo = self.ppo
        n = ppo.n_envs
        for t in range(buf.length):
            self.norm.partial_fit(obs)
            x = self.norm.transform(obs)
            mean, log_std, values = self.model.forward(x)
            actions = mean + np.exp(log_std) * self.action_rng.standard_normal(mean.shape)
            log_probs = gaussian_log_prob(actions, mean, log_std)
            rewards = np.zeros(n)
            dones = np.zeros(n, dtype=bool)
            truncated_obs = {}
            next_obs = np.empty_like(obs)
            for i, env in enumerate(self.envs):
                try:
                    o, r, done, info = env.step(actions[i])
                    rewards[i] = r.total
                    e_mean, success, truncated = info["e_mean"], info["success"], info["truncated"]
                except NumericalDivergence:
                    log.warning("env %d diverged; ending its episode as a failure", i)
                    o, done, success, truncated = obs[i], True, False, False
                    e_mean = env.last_error.e_mean
                self.episode_return[i] += rewards[i]
                if done:
                    if truncated:
                        truncated_obs[i] = o
                    dones[i] = True
                    self._finish_episode(i, success, e_mean)
                    o = self._reset_env(i)
                next_obs[i] = o
            self.timesteps += n
            if self.scaler is not None:
                rewards = self.scaler(rewards, dones)
            if truncated_obs:
                idx = sorted(truncated_obs)
                boot = self.model.value(self.norm.transform(np.stack([truncated_obs[i] for i in idx])))
                rewards[idx] += ppo.gamma * boot
            buf.obs[t] = x
            buf.actions[t] = actions
            buf.log_probs[t] = log_probs
            buf.values[t] = values
            buf.rewards[t] = rewards
            buf.dones[t] = dones
            obs = next_obs
        last_values = self.model.value(self.norm.transform(obs))
        buf.finish(last_values, ppo.gamma, ppo.gae_lambda)
        return obs

    # --- persistence ------------------------------------------------------------
    def checkpoint(self, path):
        path.parent.mkdir(parents=True, exist_ok=True)
        extra = {f"adam_m{i}": m for i, m in enumerate(self.optimizer.m)}
        extra.update({f"adam_v{i}": v for i, v in enumerate(self.optimizer.v)})
        if self.scaler is not None:
            c, m, v = self.scaler.norm.state_arrays()
            extra.update({"ret_count": c, "ret_mean": m, "ret_var": v})
        meta = {"timesteps": self.timesteps, "update": self.update, "adam_t": self.optimizer.t,
                "level": self.curriculum.level, "window": [bool(w) for w in self.curriculum.window],
                "seed": self.seed, "ppo": asdict(self.ppo),
                "rngs": {"actions": self.action_rng.bit_generator.state,
                         "minibatch": self.minibatch_rng.bit_generator.state,
                         "envs": [r.bit_generator.state for r in self.env_rngs]}}
        save_checkpoint(path, self.model, self.norm, self.rod, self.env_config, meta=meta,
                        extra_arrays=extra)

    def restore(self, path):
        model, norm, _, _, header, arrays = load_checkpoint(path)
        meta = header["meta"]
        self.model = model
        self.norm = norm
        self.optimizer = Adam(self.model.params, lr=self.ppo.lr_init)
        self.optimizer.t = meta["adam_t"]
        self.optimizer.m = [arrays[f"adam_m{i}"] for i in range(len(self.model.params))]
        self.optimizer.v = [arrays[f"adam_v{i}"] for i in range(len(self.model.params))]
        if self.scaler is not None and "ret_count" in arrays:
            self.scaler.norm = RunningNorm.from_state(float(arrays["ret_count"][0]), arrays["ret_mean"],
                                                      arrays["ret_var"])
        self.timesteps = meta["timesteps"]
        self.update = meta["update"]
        self.curriculum.level = meta["level"]
        self.curriculum.window.extend(meta["window"])
        self.action_rng.bit_generator.state = meta["rngs"]["actions"]
        self.minibatch_rng.bit_generator.state = meta["rngs"]["minibatch"]
        for r, s in zip(self.env_rngs, meta["rngs"]["envs"]):
            r.bit_generator.state = s


def train(dataset: Dataset, env_config: EnvConfig, ppo: PpoConfig, seed: int, out_dir,
          hidden=(128, 128, 64), resume=False, verbose=0, same_branch=True) -> PPOShapeController:
    """Train and write ``metrics.csv``, periodic checkpoints and ``policy.bin`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resume_from = out / "checkpoints" / "last.bin" if resume and (out / "checkpoints" / "last.bin").exists() else None
    est = PPOShapeController(env_config, ppo, hidden, seed, same_branch, verbose)
    est.fit(dataset, metrics_path=out / "metrics.csv", checkpoint_dir=out / "checkpoints",
            resume_from=resume_from)
    est.save(out / "policy.bin", meta={"seed": seed, "ppo": asdict(ppo), "same_branch": same_branch,
                                      "holdout_indices": [int(i) for i in est.holdout_indices_]})
    with open(out / "episodes.csv", "w", newline="") as fh:
        fields = ["env", "init_id", "target_id", "level", "success", "return", "final_e_mean", "timesteps"]
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for ep in est.episodes_:
            w.writerow(format_row(ep))
    return est


def desk_config(**changes) -> PpoConfig:
    """The 8-env, 2M-step configuration used for the desk-scale acceptance run."""
    base = PpoConfig(n_envs=8, total_steps=2_000_000)
    return replace(base, **changes)
