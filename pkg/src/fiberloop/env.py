"""Shape-regulation MDP: observations, reward, success hold, curriculum."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .rod import FRICTIONLESS, ChainState, GripperPair, RodParams, SurfaceModel, step as rod_step

OBS_DIM = 52
ACT_DIM = 4
N_LEVELS = 13
THRESHOLD_START = 1.2
THRESHOLD_END = 0.01
WINDOW = 50


@dataclass(frozen=True)
class EnvConfig:
    control_dt: float = 0.025
    horizon_steps: int = 320
    hold_steps: int = 80
    v_max: float = 2.0
    rho: float = 0.9
    w_er: float = 1.0
    w_te: float = 10.0
    w_sm: float = 0.1
    bonus_base: float = 10.0
    state_points: int = 10
    # hard stops keeping the gripper pair inside the chain's reachable set
    reach_guard: float = 0.97
    min_separation: float = 0.1
    obs_noise_std: float = 0.0

    def __post_init__(self):
        for name in ("control_dt", "v_max", "w_er", "w_te", "w_sm", "bonus_base", "reach_guard",
                     "min_separation"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")
        if self.hold_steps < 1 or self.horizon_steps < self.hold_steps:
            raise ValueError("need 1 <= hold_steps <= horizon_steps")
        if self.state_points < 2:
            raise ValueError("state_points must be >= 2")
        if self.obs_noise_std < 0:
            raise ValueError("obs_noise_std must be non-negative")


@dataclass(frozen=True)
class RewardBreakdown:
    epsilon: float
    p_te: float
    p_sm: float
    bonus: float
    total: float


def threshold_for_level(level: int) -> float:
    """Success threshold in mm, geometric from 1.2 mm (level 0) to 0.01 mm (level 12)."""
    if not 0 <= level < N_LEVELS:
        raise ValueError(f"curriculum level {level} outside 0..{N_LEVELS - 1}")
    if level == 0:
        return THRESHOLD_START
    if level == N_LEVELS - 1:
        return THRESHOLD_END
    return THRESHOLD_START * (THRESHOLD_END / THRESHOLD_START) ** (level / (N_LEVELS - 1))


@dataclass
class CurriculumState:
    level: int = 0
    window: deque = field(default_factory=lambda: deque(maxlen=WINDOW))

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.window)) if self.window else 0.0


def curriculum_update(c: CurriculumState, episode_success: bool) -> CurriculumState:
    """Record one outcome; move a level once the full window is above 70% or below 30%."""
    c.window.append(bool(episode_success))
    if len(c.window) == c.window.maxlen:
        rate = c.success_rate
        if rate > 0.70 and c.level < N_LEVELS - 1:
            c.level += 1
            c.window.clear()
        elif rate < 0.30 and c.level > 0:
            c.level -= 1
            c.window.clear()
    return c


def scale_action(action, v_max: float) -> np.ndarray:
    a = np.clip(np.asarray(action, dtype=np.float64).reshape(ACT_DIM), -1.0, 1.0)
    return a * v_max


def compute_reward(current, target, grippers: GripperPair, a_t, a_prev, config: EnvConfig,
                   rod_length: float, level: int = 0, success_bonus_active: bool = False
                   ) -> RewardBreakdown:
    err = geometry.shape_error(current, target)
    p_te = max(0.0, grippers.separation - config.rho * rod_length)
    p_sm = float(np.linalg.norm(np.asarray(a_t, dtype=np.float64) - np.asarray(a_prev, dtype=np.float64)))
    bonus = config.bonus_base * (1 + level) if success_bonus_active else 0.0
    total = -config.w_er * err.epsilon - config.w_te * p_te - config.w_sm * p_sm + bonus
    return RewardBreakdown(err.epsilon, p_te, p_sm, bonus, total)


def passes(epsilon: float, level: int) -> bool:
    # epsilon is in mm^2 while thresholds are lengths, so compare its root
    return float(np.sqrt(epsilon)) < threshold_for_level(level)


def build_observation(grippers: GripperPair, current: np.ndarray, target: np.ndarray,
                      a_prev: np.ndarray) -> np.ndarray:
    obs = np.concatenate([grippers.x_left, grippers.x_right, grippers.v_left, grippers.v_right,
                          current.ravel(), target.ravel(), a_prev])
    if obs.shape != (OBS_DIM,):
        raise ValueError(f"observation has shape {obs.shape}, expected ({OBS_DIM},)")
    return obs


def guard_velocities(params: RodParams, config: EnvConfig, x_left, x_right, v_left, v_right, dt):
    """Scale a velocity command so the gripper pair stays reachable for the chain.

    Returns the fraction of the command actually executed.
    """
    x_left = np.asarray(x_left)
    x_right = np.asarray(x_right)
    rel0 = x_right - x_left
    drel = (np.asarray(v_right) - np.asarray(v_left)) * dt
    L = params.total_length

    def ok(alpha):
        rel = rel0 + alpha * drel
        sep = np.hypot(*rel)
        if sep > config.reach_guard * L or sep < config.min_separation * L:
            return False
        if params.end_clamp:
            h = params.segment_length
            return np.hypot(rel[0] - 2 * h, rel[1]) <= config.reach_guard * (params.n_segments - 2) * h
        return True

    if ok(1.0):
        return 1.0
    if not ok(0.0):
        # already outside: allow only motion that does not make things worse
        return 0.0
    lo, hi = 0.0, 1.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


class FiberShapeEnv:
    """Single fiber-shaping episode driver."""

    def __init__(self, rod_params: RodParams, config: EnvConfig = EnvConfig(),
                 surface: SurfaceModel = FRICTIONLESS):
        self.rod_params = rod_params
        self.config = config
        self.surface = surface
        self.level = 0
        self.n_substeps = int(round(config.control_dt / rod_params.physics_dt))
        self._noise_rng = np.random.default_rng(0)
        self.state: ChainState | None = None

    def reset(self, init_record, target_record, seed: int = 0) -> np.ndarray:
        self.state = init_record.chain_state(self.rod_params)
        self.grippers = GripperPair(init_record.x_left, init_record.x_right)
        self.target = np.array(target_record.centerline, dtype=np.float64)
        if self.target.shape != (self.config.state_points, 2):
            raise ValueError("target centerline does not match state_points")
        self.a_prev = np.zeros(ACT_DIM)
        self.steps = 0
        self.hold = 0
        self.done = False
        self.success = False
        self._noise_rng = np.random.default_rng(seed)
        self.current = self._centerline()
        self.last_error = geometry.shape_error(self.current, self.target)
        return self._observe()

    def _centerline(self) -> np.ndarray:
        return geometry.resample(self.state.points, self.config.state_points)

    def _observe(self) -> np.ndarray:
        seen = self.current
        if self.config.obs_noise_std > 0:
            seen = seen + self._noise_rng.normal(0.0, self.config.obs_noise_std, seen.shape)
        return build_observation(self.grippers, seen, self.target, self.a_prev)

    def apply_velocities(self, velocities) -> GripperPair:
        """Move the grippers at ``velocities`` (mm/s) for one control step.

        Returns the gripper pair as it was executed, after the reach guard.
        """
        v = np.asarray(velocities, dtype=np.float64).reshape(ACT_DIM)
        dt = self.config.control_dt
        g = self.grippers
        frac = guard_velocities(self.rod_params, self.config, g.x_left, g.x_right, v[:2], v[2:], dt)
        executed = GripperPair(g.x_left, g.x_right, v[:2] * frac, v[2:] * frac)
        self.state = rod_step(self.state, executed, self.surface, dt)
        self.grippers = executed.advanced(dt)
        return executed

    def step(self, action):
        if self.state is None or self.done:
            raise RuntimeError("call reset() before step()")
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(ACT_DIM), -1.0, 1.0)
        self.apply_velocities(scale_action(a, self.config.v_max))
        self.current = self._centerline()
        err = geometry.shape_error(self.current, self.target)
        hit = passes(err.epsilon, self.level)
        reward = compute_reward(self.current, self.target, self.grippers, a, self.a_prev, self.config,
                                self.rod_params.total_length, self.level, hit)
        self.hold = self.hold + 1 if hit else 0
        self.steps += 1
        self.a_prev = a
        self.last_error = err
        self.success = self.hold >= self.config.hold_steps
        truncated = not self.success and self.steps >= self.config.horizon_steps
        self.done = self.success or truncated
        info = {"e_mean": err.e_mean, "e_max": err.e_max, "epsilon": err.epsilon, "hold": self.hold,
                "success": self.success, "truncated": truncated, "steps": self.steps}
        return self._observe(), reward, self.done, info
