"""Planar dynamics of an inextensible articulated fiber held by two grippers.

The fiber is a chain of rigid segments joined by elastic hinges. Segment
lengths are structural, so arc length is exact by construction; the two
endpoint constraints are enforced by projection after every substep.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import j0

from . import _kernels
from .errors import InfeasibleEndpoints, NumericalDivergence

ENDPOINT_TOL = 1e-6
_PROJECTION_TOL = 1e-11
_STRAIGHT_PERTURBATION = 1e-4


@dataclass(frozen=True)
class RodParams:
    joint_stiffness: float
    joint_damping: float
    segment_mass: float
    n_segments: int = 20
    total_length: float = 15.0
    physics_dt: float = 0.001
    end_clamp: bool = True
    rate_limit: float = 1e4

    def __post_init__(self):
        if self.n_segments < 3:
            raise ValueError("n_segments must be >= 3")
        for name in ("total_length", "joint_stiffness", "joint_damping", "segment_mass", "physics_dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def segment_length(self) -> float:
        return self.total_length / self.n_segments


@dataclass(frozen=True)
class GripperPair:
    x_left: np.ndarray
    x_right: np.ndarray
    v_left: np.ndarray = field(default_factory=lambda: np.zeros(2))
    v_right: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        for name in ("x_left", "x_right", "v_left", "v_right"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(2)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, arr)

    @property
    def separation(self) -> float:
        return float(np.hypot(*(self.x_right - self.x_left)))

    def static(self) -> "GripperPair":
        return GripperPair(self.x_left, self.x_right)

    def advanced(self, dt: float) -> "GripperPair":
        return GripperPair(self.x_left + self.v_left * dt, self.x_right + self.v_right * dt,
                           self.v_left, self.v_right)


@dataclass(frozen=True)
class SurfaceModel:
    mode: str = "frictionless"
    mu: float = 0.0
    normal_load_per_segment: float = 0.0
    stiction_velocity: float = 0.05

    def __post_init__(self):
        if self.mode not in ("frictionless", "coulomb"):
            raise ValueError(f"unknown surface mode {self.mode!r}")
        if self.mu < 0 or self.normal_load_per_segment < 0 or self.stiction_velocity <= 0:
            raise ValueError("surface parameters must be non-negative (stiction_velocity positive)")

    @property
    def friction_load(self) -> float:
        if self.mode == "frictionless":
            return 0.0
        return self.mu * self.normal_load_per_segment


FRICTIONLESS = SurfaceModel()


@dataclass
class ChainState:
    """Chain configuration stored as absolute segment headings.

    ``headings[i]`` is the direction of segment ``i`` and ``heading_rates``
    its angular velocity. Joint angles are the differences of consecutive
    headings; the chain root sits on the left gripper.
    """

    params: RodParams
    headings: np.ndarray
    heading_rates: np.ndarray
    base_position: np.ndarray

    @property
    def joint_angles(self) -> np.ndarray:
        return np.diff(self.headings)

    @property
    def joint_rates(self) -> np.ndarray:
        return np.diff(self.heading_rates)

    @property
    def base_heading(self) -> float:
        return float(self.headings[0])

    @property
    def points(self) -> np.ndarray:
        """Segment endpoints q_1..q_{n+1}, shape (n+1, 2)."""
        h = self.params.segment_length
        steps = h * np.column_stack([np.cos(self.headings), np.sin(self.headings)])
        pts = np.empty((len(self.headings) + 1, 2))
        pts[0] = self.base_position
        pts[1:] = self.base_position + np.cumsum(steps, axis=0)
        return pts

    def copy(self) -> "ChainState":
        return ChainState(self.params, self.headings.copy(), self.heading_rates.copy(),
                          self.base_position.copy())

    def endpoint_residual(self, grippers: GripperPair) -> float:
        pts = self.points
        return max(float(np.hypot(*(pts[0] - grippers.x_left))),
                   float(np.hypot(*(pts[-1] - grippers.x_right))))


def _free_mask(params: RodParams) -> np.ndarray:
    free = np.ones(params.n_segments, dtype=np.bool_)
    if params.end_clamp:
        free[0] = free[-1] = False
    return free


def _chord_amplitude(ratio: float) -> float:
    # invert J0(a) = ratio on the first branch, a in [0, 2.405)
    lo, hi = 0.0, 2.404825557695773
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if j0(mid) > ratio:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def check_feasible(params: RodParams, x_left, x_right, min_fraction: float = 0.05) -> None:
    delta = np.asarray(x_right, dtype=np.float64) - np.asarray(x_left, dtype=np.float64)
    sep = float(np.hypot(*delta))
    L = params.total_length
    if sep > L * (1 + 1e-12):
        raise InfeasibleEndpoints(f"separation {sep:.6g} mm exceeds fiber length {L:.6g} mm")
    if sep <= min_fraction * L:
        raise InfeasibleEndpoints(f"separation {sep:.6g} mm below floor {min_fraction * L:.6g} mm")
    if params.end_clamp:
        h = params.segment_length
        inner = np.hypot(delta[0] - 2 * h, delta[1])
        if inner > (params.n_segments - 2) * h * (1 + 1e-12):
            raise InfeasibleEndpoints("endpoints unreachable with clamped end tangents")


def _clamped_guess(params: RodParams, delta: np.ndarray, sign: int) -> np.ndarray:
    # two-mode family: a tilt mode for the lateral offset, a bump mode for slack
    n = params.n_segments
    h = params.segment_length
    t = (np.arange(n) + 0.5) / n
    tilt = np.sin(np.pi * t)
    bump = np.sin(2 * np.pi * t)
    tilt[0] = tilt[-1] = bump[0] = bump[-1] = 0.0

    def residual(coef):
        phi = coef[0] * bump + coef[1] * tilt
        return h * np.array([np.cos(phi).sum(), np.sin(phi).sum()]) - delta

    ratio = min(float(np.hypot(*delta)) / params.total_length, 1.0)
    coef = np.array([sign * _chord_amplitude(ratio), 0.0])
    for _ in range(60):
        r = residual(coef)
        if np.hypot(*r) < 1e-12:
            break
        jac = np.empty((2, 2))
        for j in range(2):
            e = np.zeros(2)
            e[j] = 1e-7
            jac[:, j] = (residual(coef + e) - residual(coef - e)) / 2e-7
        delta_coef = np.linalg.lstsq(jac, -r, rcond=None)[0]
        coef = coef + min(1.0, 0.5 / max(np.abs(delta_coef).max(), 1e-300)) * delta_coef
    return coef[0] * bump + coef[1] * tilt


def init_chain(params: RodParams, grippers: GripperPair, buckle_sign: int, rng_seed: int = 0) -> ChainState:
    """Build a kinematically feasible chain, buckled to the ``buckle_sign`` side.

    +1 bows the slack to the left of the left-to-right gripper axis.
    """
    if buckle_sign not in (1, -1):
        raise ValueError("buckle_sign must be +1 or -1")
    check_feasible(params, grippers.x_left, grippers.x_right)
    n = params.n_segments
    L = params.total_length
    delta = grippers.x_right - grippers.x_left
    sep = float(np.hypot(*delta))
    free = _free_mask(params)

    if params.end_clamp:
        if sep >= L * (1 - 1e-12) and abs(delta[1]) < 1e-12 * L:
            return ChainState(params, np.zeros(n), np.zeros(n), grippers.x_left.copy())
        headings = _clamped_guess(params, delta, buckle_sign)
    else:
        axis = np.arctan2(delta[1], delta[0])
        if sep >= L * (1 - 1e-12):
            return ChainState(params, np.full(n, axis), np.zeros(n), grippers.x_left.copy())
        t = (np.arange(n) + 0.5) / n
        headings = axis + buckle_sign * _chord_amplitude(sep / L) * np.cos(np.pi * t)

    rng = np.random.default_rng(rng_seed)
    jitter = _STRAIGHT_PERTURBATION * np.abs(rng.standard_normal(n))
    headings = headings + buckle_sign * jitter * free
    if not _kernels.project_closure(headings, free, params.segment_length, delta, _PROJECTION_TOL, 100):
        raise InfeasibleEndpoints("could not close the chain between the grippers")
    return ChainState(params, headings, np.zeros(n), grippers.x_left.copy())


def step(state: ChainState, grippers: GripperPair, surface: SurfaceModel = FRICTIONLESS,
         dt: float | None = None, energy_log: np.ndarray | None = None) -> ChainState:
    """Advance by ``dt`` (a multiple of physics_dt) with grippers moving at their velocities.

    ``grippers`` holds positions at the start of the interval.
    """
    p = state.params
    if dt is None:
        dt = p.physics_dt
    n_sub = int(round(dt / p.physics_dt))
    if n_sub < 1 or abs(n_sub * p.physics_dt - dt) > 1e-9 * dt:
        raise ValueError(f"dt={dt} is not an integer multiple of physics_dt={p.physics_dt}")
    out = state.copy()
    log = np.empty(0) if energy_log is None else energy_log
    status = _kernels.advance(
        out.headings, out.heading_rates, _free_mask(p), p.segment_length, p.segment_mass,
        p.joint_stiffness, p.joint_damping, p.physics_dt, n_sub,
        grippers.x_left, grippers.x_right, grippers.v_left, grippers.v_right,
        surface.friction_load, surface.stiction_velocity, p.rate_limit, _PROJECTION_TOL, log)
    if status == _kernels.DIVERGED:
        raise NumericalDivergence("joint rate exceeded the blow-up bound; reduce physics_dt or stiffness")
    if status == _kernels.PROJECTION_FAILED:
        raise NumericalDivergence("endpoint projection failed to converge")
    out.base_position = grippers.x_left + grippers.v_left * dt
    return out


def energies(state: ChainState) -> tuple[float, float]:
    p = state.params
    elastic = 0.5 * p.joint_stiffness * float(np.sum(state.joint_angles ** 2))
    kinetic = float(_kernels.kinetic_energy(state.headings, state.heading_rates,
                                            p.segment_length, p.segment_mass))
    return elastic, max(kinetic, 0.0)


def settle(state: ChainState, grippers: GripperPair, surface: SurfaceModel = FRICTIONLESS,
           ke_tol: float = 1e-12, max_steps: int = 20000, chunk: int = 1) -> tuple[ChainState, bool]:
    """Step with static grippers until kinetic energy falls below ``ke_tol``.

    A step only counts as converged when kinetic energy is also not rising,
    so a chain released from rest out of equilibrium is not accepted early.
    ``chunk`` substeps are taken between checks; ``max_steps`` counts substeps.
    """
    grippers = grippers.static()
    dt = chunk * state.params.physics_dt
    current = state
    prev_ke = energies(current)[1]
    taken = 0
    while taken < max_steps:
        current = step(current, grippers, surface, dt)
        taken += chunk
        ke = energies(current)[1]
        if ke < ke_tol and ke <= prev_ke:
            return current, True
        prev_ke = ke
    return current, False


def with_rates(state: ChainState, rates: np.ndarray) -> ChainState:
    out = state.copy()
    out.heading_rates = np.asarray(rates, dtype=np.float64).copy()
    out.heading_rates[~_free_mask(state.params)] = 0.0
    return out


def scaled(params: RodParams, **changes) -> RodParams:
    return replace(params, **changes)
