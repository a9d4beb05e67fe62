"""Deployment of a trained policy into perturbed simulators, and the experiment protocols."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

from . import geometry, seeding
from .dataset import ConfigRecord, Dataset, GripperGrid, candidate_pairs, make_record
from .env import EnvConfig, FiberShapeEnv
from .errors import FiberloopError
from .rod import FRICTIONLESS, RodParams, SurfaceModel

log = logging.getLogger(__name__)

REFERENCE_DIAMETER_UM = 80.0
DIAMETERS_UM = (50.0, 80.0, 120.0)
LENGTHS_MM = (10.0, 15.0, 20.0)
# hardware repeatability figures, printed for context only
PAPER_REPEATABILITY_E_MEAN_UM = (270.0, 80.0)
PAPER_REPEATABILITY_E_MAX_UM = (390.0, 100.0)


def stiffness_scale_for_diameter(diameter_um: float, reference_um: float = REFERENCE_DIAMETER_UM) -> float:
    """Bending stiffness EI grows with the fourth power of the diameter."""
    return (diameter_um / reference_um) ** 4


@dataclass(frozen=True)
class DeployConfig:
    surface: SurfaceModel = SurfaceModel("coulomb", mu=0.3, normal_load_per_segment=0.05,
                                         stiction_velocity=0.05)
    obs_noise_std: float = 0.05
    stiffness_scale: float = 1.0
    length: float = 15.0
    control_rate: float = 40.0
    max_duration: float = 10.0
    success_threshold: float = 0.5

    def __post_init__(self):
        if self.obs_noise_std < 0:
            raise ValueError("obs_noise_std must be non-negative")
        for name in ("stiffness_scale", "length", "control_rate", "max_duration", "success_threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def n_steps(self) -> int:
        return int(round(self.max_duration * self.control_rate))

    def frictionless(self) -> "DeployConfig":
        return replace(self, surface=FRICTIONLESS, obs_noise_std=0.0)


@dataclass
class TrialResult:
    mode: str
    init_id: int
    target_id: int
    deploy: DeployConfig
    times: np.ndarray
    e_mean: np.ndarray
    e_max: np.ndarray
    target_bend_energy: float
    converged: bool
    init_centerline: np.ndarray
    target_centerline: np.ndarray
    final_centerline: np.ndarray
    gripper_path: np.ndarray = field(repr=False)
    failed: str = ""
    trial_id: int = 0
    condition: str = ""

    @property
    def final_e_mean(self) -> float:
        return float(self.e_mean[-1])

    @property
    def final_e_max(self) -> float:
        return float(self.e_max[-1])

    def summary_row(self) -> dict:
        return {"trial": self.trial_id, "mode": self.mode, "condition": self.condition,
                "init_id": self.init_id, "target_id": self.target_id,
                "mu": self.deploy.surface.friction_load and self.deploy.surface.mu,
                "obs_noise_std": self.deploy.obs_noise_std, "stiffness_scale": self.deploy.stiffness_scale,
                "length": self.deploy.length, "initial_e_mean": float(self.e_mean[0]),
                "final_e_mean": self.final_e_mean, "final_e_max": self.final_e_max,
                "target_bend_energy": self.target_bend_energy, "converged": int(self.converged),
                "failed": self.failed}

    def to_dict(self) -> dict:
        d = self.summary_row()
        d.update({"deploy": _deploy_dict(self.deploy), "times": self.times.tolist(),
                  "e_mean": self.e_mean.tolist(), "e_max": self.e_max.tolist(),
                  "init_centerline": self.init_centerline.tolist(),
                  "target_centerline": self.target_centerline.tolist(),
                  "final_centerline": self.final_centerline.tolist()})
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrialResult":
        dep = dict(d["deploy"])
        dep["surface"] = SurfaceModel(**dep["surface"])
        return cls(d["mode"], d["init_id"], d["target_id"], DeployConfig(**dep), np.array(d["times"]),
                   np.array(d["e_mean"]), np.array(d["e_max"]), d["target_bend_energy"],
                   bool(d["converged"]), np.array(d["init_centerline"]), np.array(d["target_centerline"]),
                   np.array(d["final_centerline"]), np.zeros((0, 4)), d.get("failed", ""),
                   d.get("trial", 0), d.get("condition", ""))


def _deploy_dict(deploy: DeployConfig) -> dict:
    d = asdict(deploy)
    d["surface"] = asdict(deploy.surface)
    return d


def deploy_rod(train_rod: RodParams, deploy: DeployConfig) -> RodParams:
    return replace(train_rod, joint_stiffness=train_rod.joint_stiffness * deploy.stiffness_scale,
                   total_length=deploy.length)


def _deploy_env(train_rod, env_config: EnvConfig, deploy: DeployConfig, surface, noise) -> FiberShapeEnv:
    if abs(1.0 / deploy.control_rate - env_config.control_dt) > 1e-12:
        raise ValueError(f"control rate {deploy.control_rate} Hz does not match the training "
                         f"control step {env_config.control_dt} s")
    n = deploy.n_steps
    cfg = replace(env_config, obs_noise_std=noise, horizon_steps=n, hold_steps=n)
    return FiberShapeEnv(deploy_rod(train_rod, deploy), cfg, surface)


def _finish(mode, env, init, target, deploy, times, e_mean, e_max, path, failed):
    final = env.current
    err = geometry.shape_error(final, target.centerline)
    converged = not failed and float(np.sqrt(err.epsilon)) < deploy.success_threshold
    return TrialResult(mode, init.id, target.id, deploy, np.array(times), np.array(e_mean), np.array(e_max),
                       float(target.bend_energy), bool(converged), np.array(init.centerline),
                       np.array(target.centerline), final.copy(), np.array(path), failed)


def run_closed_loop(policy, train_rod: RodParams, env_config: EnvConfig, deploy: DeployConfig,
                    init: ConfigRecord, target: ConfigRecord, seed: int = 0) -> TrialResult:
    """Deploy ``policy`` with feedback at every control step for ``max_duration`` seconds.

    Errors are measured against the simulated fiber; the policy only sees the
    noisy observation.
    """
    env = _deploy_env(train_rod, env_config, deploy, deploy.surface, deploy.obs_noise_std)
    obs = env.reset(init, target, seed)
    times, e_mean, e_max, path = [0.0], [env.last_error.e_mean], [env.last_error.e_max], []
    failed = ""
    for k in range(deploy.n_steps):
        try:
            obs, _, _, info = env.step(policy(obs))
        except FiberloopError as exc:
            failed = f"{type(exc).__name__}: {exc}"
            break
        path.append(np.concatenate([env.grippers.v_left, env.grippers.v_right]))
        times.append((k + 1) * env.config.control_dt)
        e_mean.append(info["e_mean"])
        e_max.append(info["e_max"])
    return _finish("closed", env, init, target, deploy, times, e_mean, e_max, path, failed)


def plan_trajectory(policy, train_rod, env_config, deploy, init, target):
    """Roll the policy in the unperturbed simulator; return executed gripper velocities per step."""
    env = _deploy_env(train_rod, env_config, deploy, FRICTIONLESS, 0.0)
    obs = env.reset(init, target, 0)
    velocities = []
    for _ in range(deploy.n_steps):
        obs, _, _, _ = env.step(policy(obs))
        velocities.append(np.concatenate([env.grippers.v_left, env.grippers.v_right]))
    return np.array(velocities)


def run_open_loop(policy, train_rod: RodParams, env_config: EnvConfig, deploy: DeployConfig,
                  init: ConfigRecord, target: ConfigRecord, seed: int = 0) -> TrialResult:
    """Replay the frictionless plan verbatim in the perturbed simulator, without feedback."""
    plan = plan_trajectory(policy, train_rod, env_config, deploy, init, target)
    env = _deploy_env(train_rod, env_config, deploy, deploy.surface, 0.0)
    env.reset(init, target, seed)
    times, e_mean, e_max, path = [0.0], [env.last_error.e_mean], [env.last_error.e_max], []
    failed = ""
    for k, v in enumerate(plan):
        try:
            env.apply_velocities(v)
        except FiberloopError as exc:
            failed = f"{type(exc).__name__}: {exc}"
            break
        env.current = env._centerline()
        err = geometry.shape_error(env.current, env.target)
        path.append(np.concatenate([env.grippers.v_left, env.grippers.v_right]))
        times.append((k + 1) * env.config.control_dt)
        e_mean.append(err.e_mean)
        e_max.append(err.e_max)
    return _finish("open", env, init, target, deploy, times, e_mean, e_max, path, failed)


def run_trials(fn, jobs, n_jobs=1):
    """Run ``fn(*job)`` for each job; results come back in job order."""
    if n_jobs == 1:
        results = [fn(*job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(lambda job: fn(*job), jobs))
    for i, r in enumerate(results):
        r.trial_id = i
    return results


def summarize(trials) -> dict:
    em = np.array([t.final_e_mean for t in trials])
    ex = np.array([t.final_e_max for t in trials])
    if len(trials) == 0:
        return {"n_trials": 0}
    return {"n_trials": len(trials), "e_mean_mean": float(em.mean()), "e_mean_std": float(em.std()),
            "e_mean_median": float(np.median(em)), "e_max_mean": float(ex.mean()),
            "e_max_std": float(ex.std()), "e_max_median": float(np.median(ex)),
            "converged_fraction": float(np.mean([t.converged for t in trials])),
            "failed": int(sum(bool(t.failed) for t in trials))}


def select_repeatability_records(dataset: Dataset, seed: int, n_targets=3, n_inits=8):
    """Three targets spread over bending energy, each with eight distinct initial shapes."""
    rng = seeding.rng(seed, "experiment", 0)
    energies = np.array([r.bend_energy for r in dataset.records])
    order = np.argsort(energies, kind="stable")
    picks = [order[int(q * (len(order) - 1))] for q in np.linspace(0.2, 0.8, n_targets)]
    targets = [dataset[int(i)] for i in picks]
    inits = []
    for t in targets:
        # the buckle side cannot be flipped within an episode, so inits share the target's branch
        pool = [i for i in dataset.branch_indices(t.buckle_sign) if dataset[i].id != t.id]
        chosen = rng.choice(pool, size=n_inits, replace=False)
        inits.append([dataset[int(i)] for i in chosen])
    return targets, inits


def repeatability_experiment(policy, train_rod, env_config, deploy, targets, inits, seed=0, n_jobs=1):
    """Every target from each of its initial shapes, closed loop: 3 x 8 = 24 trials."""
    jobs = []
    for t_idx, (target, init_list) in enumerate(zip(targets, inits)):
        for i_idx, init in enumerate(init_list):
            jobs.append((policy, train_rod, env_config, deploy, init, target,
                         seeding.int_seed(seed, "eval", t_idx, i_idx)))
    trials = run_trials(run_closed_loop, jobs, n_jobs)
    for t in trials:
        t.condition = f"target{t.target_id}"
    summary = summarize(trials)
    summary["reference_e_mean_um"] = "%g +- %g" % PAPER_REPEATABILITY_E_MEAN_UM
    summary["reference_e_max_um"] = "%g +- %g" % PAPER_REPEATABILITY_E_MAX_UM
    return trials, summary


def condition_shapes(train_rod: RodParams, length: float, n_shapes: int, seed: int, state_points: int = 10,
                     grid: GripperGrid | None = None):
    """Settle ``n_shapes`` distinct random configurations for a fiber of ``length`` mm.

    All shapes of a condition share one buckle side so every init/target
    pairing is reachable.
    """
    rod = replace(train_rod, total_length=length)
    base = grid or GripperGrid()
    pairs = list(candidate_pairs(base.scaled(length / train_rod.total_length), rod))
    rng = seeding.rng(seed, "experiment", int(round(length * 1000)))
    chosen = rng.choice(len(pairs), size=n_shapes, replace=False)
    sign = int(rng.choice([1, -1]))
    return [make_record(k, rod, *pairs[int(c)], sign, state_points, seeding.int_seed(seed, "experiment", k))
            for k, c in enumerate(chosen)]


def generalization_experiment(policy, train_rod, env_config, deploy, diameters=DIAMETERS_UM,
                              lengths=LENGTHS_MM, n_shapes=5, seed=0, n_jobs=1):
    """Nine diameter x length conditions, each target in turn with the others as inits."""
    jobs, labels = [], []
    for length in lengths:
        shapes = condition_shapes(train_rod, length, n_shapes, seed, env_config.state_points)
        for d in diameters:
            dep = replace(deploy, stiffness_scale=stiffness_scale_for_diameter(d), length=length)
            for t in shapes:
                for i in shapes:
                    if i.id == t.id:
                        continue
                    jobs.append((policy, train_rod, env_config, dep, i, t,
                                 seeding.int_seed(seed, "eval", len(jobs))))
                    labels.append((d, length))
    trials = run_trials(run_closed_loop, jobs, n_jobs)
    for t, (d, length) in zip(trials, labels):
        t.condition = f"d{d:g}um_L{length:g}mm"
    rows = []
    for length in lengths:
        for d in diameters:
            group = [t for t, lab in zip(trials, labels) if lab == (d, length)]
            ex = np.array([t.final_e_max for t in group])
            em = np.array([t.final_e_mean for t in group])
            rows.append({"condition": f"d{d:g}um_L{length:g}mm", "diameter_um": d, "length_mm": length,
                         "stiffness_scale": stiffness_scale_for_diameter(d), "n_trials": len(group),
                         "e_max_median": float(np.median(ex)), "e_max_mean": float(ex.mean()),
                         "e_mean_median": float(np.median(em)), "e_mean_mean": float(em.mean())})
    return trials, rows


def spearman(x, y):
    """Spearman rank correlation, or None when either variable is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    # Pearson on centered average ranks; written out so identical rankings give exactly 1.0
    a = stats.rankdata(x) - (len(x) + 1) / 2
    b = stats.rankdata(y) - (len(y) + 1) / 2
    return float(np.clip(np.dot(a, b) / np.sqrt(np.dot(a, a) * np.dot(b, b)), -1.0, 1.0))


def bending_energy_analysis(trials, training_dataset: Dataset | None = None):
    """Scatter data (target E_bend vs final e_mean), E_bend distributions, and their rank correlation."""
    scatter = [{"trial": t.trial_id, "condition": t.condition, "target_id": t.target_id,
                "target_bend_energy": t.target_bend_energy, "final_e_mean": t.final_e_mean}
               for t in trials]
    dist = []
    if training_dataset is not None:
        dist += [{"group": "training", "bend_energy": r.bend_energy} for r in training_dataset.records]
    seen = set()
    for t in trials:
        key = (t.condition.split("_")[-1], t.target_id)
        if key not in seen:
            seen.add(key)
            dist.append({"group": "evaluation", "bend_energy": t.target_bend_energy})
    rho = spearman([s["target_bend_energy"] for s in scatter], [s["final_e_mean"] for s in scatter])
    return scatter, dist, rho


def holdout_pairs(dataset: Dataset, holdout_indices, n_pairs: int, seed: int, same_branch: bool = True):
    """``n_pairs`` distinct-record (init, target) pairs drawn from held-out records only."""
    idx = np.asarray(holdout_indices, dtype=int)
    if len(idx) < 2:
        raise ValueError("need at least two held-out records")
    rng = seeding.rng(seed, "eval", 1)
    pairs = []
    while len(pairs) < n_pairs:
        i = int(rng.choice(idx))
        pool = [int(j) for j in idx if j != i and (not same_branch or
                                                     dataset[int(j)].buckle_sign == dataset[i].buckle_sign)]
        if pool:
            pairs.append((dataset[i], dataset[int(rng.choice(pool))]))
    return pairs


def training_sim_episode(policy, rod: RodParams, env_config: EnvConfig, init, target, level=0, n_steps=None):
    """One deterministic episode in the training simulator; returns the final step's info.

    With ``n_steps`` the episode runs exactly that long instead of stopping at
    the success hold, which makes it comparable to a fixed-duration deployment.
    """
    if n_steps is not None:
        env_config = replace(env_config, horizon_steps=n_steps, hold_steps=n_steps)
    env = FiberShapeEnv(rod, env_config)
    env.level = level
    obs = env.reset(init, target, 0)
    done = False
    info = {"e_mean": env.last_error.e_mean, "e_max": env.last_error.e_max, "success": False}
    while not done:
        obs, _, done, info = env.step(policy(obs))
    return info
