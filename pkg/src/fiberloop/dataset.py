"""Settled fiber configurations used as episode start and target shapes."""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .errors import EmptyDataset, InfeasibleEndpoints, InvariantViolation, VersionMismatch
from .rod import ChainState, GripperPair, RodParams, check_feasible, init_chain, settle

FORMAT = "fiberloop-dataset"
VERSION = 1
SEP_MIN = 0.5
SEP_MAX = 0.9
_SEP_SLACK = 1e-9


@dataclass(frozen=True)
class GridAxis:
    start: float
    stop: float
    step: float

    def values(self) -> np.ndarray:
        if self.step <= 0:
            raise ValueError("grid step must be positive")
        count = int(np.floor((self.stop - self.start) / self.step + 1e-9)) + 1
        return self.start + self.step * np.arange(max(count, 0))


@dataclass(frozen=True)
class GripperGrid:
    """Candidate gripper positions; every combination of the four axes is tried."""

    left_x: GridAxis = GridAxis(0.0, 3.0, 0.5)
    left_y: GridAxis = GridAxis(-2.0, 2.0, 1.0)
    right_x: GridAxis = GridAxis(9.0, 14.0, 0.5)
    right_y: GridAxis = GridAxis(-2.0, 2.0, 0.5)

    def pairs(self):
        for xl, yl, xr, yr in itertools.product(self.left_x.values(), self.left_y.values(),
                                                self.right_x.values(), self.right_y.values()):
            yield np.array([xl, yl]), np.array([xr, yr])

    def scaled(self, factor: float) -> "GripperGrid":
        return GripperGrid(*(GridAxis(a.start * factor, a.stop * factor, a.step * factor)
                             for a in (self.left_x, self.left_y, self.right_x, self.right_y)))


@dataclass
class ConfigRecord:
    id: int
    x_left: np.ndarray
    x_right: np.ndarray
    buckle_sign: int
    centerline: np.ndarray
    separation: float
    bend_energy: float
    headings: np.ndarray = field(repr=False)

    def chain_state(self, params: RodParams) -> ChainState:
        if len(self.headings) != params.n_segments:
            raise ValueError("record was generated for a different segment count")
        return ChainState(params, np.array(self.headings, dtype=np.float64),
                          np.zeros(params.n_segments), np.array(self.x_left, dtype=np.float64))

    def to_json(self) -> str:
        return json.dumps({
            "id": int(self.id),
            "x_left": [float(v) for v in self.x_left],
            "x_right": [float(v) for v in self.x_right],
            "buckle_sign": int(self.buckle_sign),
            "separation": float(self.separation),
            "bend_energy": float(self.bend_energy),
            "centerline": [float(v) for v in np.ravel(self.centerline)],
            "headings": [float(v) for v in self.headings],
        })

    @classmethod
    def from_json(cls, line: str) -> "ConfigRecord":
        d = json.loads(line)
        return cls(int(d["id"]), np.array(d["x_left"]), np.array(d["x_right"]), int(d["buckle_sign"]),
                   np.array(d["centerline"]).reshape(-1, 2), float(d["separation"]),
                   float(d["bend_energy"]), np.array(d["headings"]))


@dataclass
class Dataset:
    rod_params: RodParams
    state_points: int
    records: list[ConfigRecord]

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i) -> ConfigRecord:
        return self.records[i]

    def subset(self, indices) -> "Dataset":
        return Dataset(self.rod_params, self.state_points, [self.records[i] for i in indices])

    def branch_indices(self, sign: int) -> np.ndarray:
        cache = self.__dict__.setdefault("_branches", {})
        if sign not in cache:
            cache[sign] = np.array([k for k, r in enumerate(self.records) if r.buckle_sign == sign])
        return cache[sign]


def separation_ok(sep: float, length: float) -> bool:
    return SEP_MIN * length - _SEP_SLACK <= sep <= SEP_MAX * length + _SEP_SLACK


def make_record(rec_id: int, params: RodParams, x_left, x_right, sign: int, state_points: int,
                seed: int, ke_tol: float = 1e-12, max_steps: int = 20000) -> ConfigRecord:
    grippers = GripperPair(x_left, x_right)
    chain = init_chain(params, grippers, sign, seed)
    chain, _ = settle(chain, grippers, ke_tol=ke_tol, max_steps=max_steps, chunk=25)
    pts = chain.points
    return ConfigRecord(rec_id, grippers.x_left, grippers.x_right, sign,
                        geometry.resample(pts, state_points), grippers.separation,
                        geometry.bending_energy(pts), chain.headings.copy())


def candidate_pairs(grid: GripperGrid, params: RodParams):
    for x_left, x_right in grid.pairs():
        sep = float(np.hypot(*(x_right - x_left)))
        if not separation_ok(sep, params.total_length):
            continue
        try:
            check_feasible(params, x_left, x_right)
        except InfeasibleEndpoints:
            continue
        yield x_left, x_right


def generate(grid: GripperGrid, rod_params: RodParams, seed: int = 0, state_points: int = 10,
             ke_tol: float = 1e-12, max_steps: int = 20000, n_jobs: int = 1) -> Dataset:
    """Settle the frictionless chain for every admissible gripper pair and both buckle signs."""
    jobs = []
    for x_left, x_right in candidate_pairs(grid, rod_params):
        for sign in (1, -1):
            jobs.append((len(jobs), x_left, x_right, sign))
    seeds = np.random.SeedSequence(seed).generate_state(max(len(jobs), 1), dtype=np.uint32)

    def build(job):
        rec_id, xl, xr, sign = job
        return make_record(rec_id, rod_params, xl, xr, sign, state_points, int(seeds[rec_id]),
                           ke_tol, max_steps)

    if n_jobs == 1:
        records = [build(j) for j in jobs]
    else:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            records = list(pool.map(build, jobs))
    return Dataset(rod_params, state_points, records)


def sample_pair(dataset: Dataset, rng: np.random.Generator,
                same_branch: bool = False) -> tuple[ConfigRecord, ConfigRecord]:
    """Two independent uniform draws; they may coincide.

    With ``same_branch`` the target is drawn uniformly among records whose
    buckle sign matches the init's, since the clamped chain cannot snap to
    the other branch within an episode.
    """
    if len(dataset) == 0:
        raise EmptyDataset("cannot sample from an empty dataset")
    if not same_branch:
        i, j = rng.integers(0, len(dataset), size=2)
        return dataset[int(i)], dataset[int(j)]
    i = int(rng.integers(0, len(dataset)))
    branch = dataset.branch_indices(dataset[i].buckle_sign)
    return dataset[i], dataset[int(branch[rng.integers(0, len(branch))])]


def save(dataset: Dataset, path) -> None:
    header = {"format": FORMAT, "version": VERSION, "rod_params": asdict(dataset.rod_params),
              "state_points": dataset.state_points, "count": len(dataset)}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in dataset.records:
            fh.write(rec.to_json() + "\n")


def validate_record(rec: ConfigRecord, params: RodParams, state_points: int) -> None:
    L = params.total_length
    sep = float(np.hypot(*(np.asarray(rec.x_right) - np.asarray(rec.x_left))))
    if not separation_ok(sep, L):
        raise InvariantViolation(f"record {rec.id}: separation {sep:.6g} mm outside "
                                 f"[{SEP_MIN * L:.6g}, {SEP_MAX * L:.6g}]")
    if abs(sep - rec.separation) > 1e-9:
        raise InvariantViolation(f"record {rec.id}: stored separation disagrees with gripper positions")
    if rec.centerline.shape != (state_points, 2):
        raise InvariantViolation(f"record {rec.id}: centerline has {len(rec.centerline)} points, "
                                 f"expected {state_points}")
    if (np.hypot(*(rec.centerline[0] - rec.x_left)) > 1e-6
            or np.hypot(*(rec.centerline[-1] - rec.x_right)) > 1e-6):
        raise InvariantViolation(f"record {rec.id}: centerline endpoints do not match the grippers")
    if rec.buckle_sign not in (1, -1):
        raise InvariantViolation(f"record {rec.id}: buckle_sign must be +1 or -1")
    if len(rec.headings) != params.n_segments:
        raise InvariantViolation(f"record {rec.id}: expected {params.n_segments} segment headings")
    end = rec.chain_state(params).points[-1]
    if np.hypot(*(end - rec.x_right)) > 1e-6:
        raise InvariantViolation(f"record {rec.id}: stored chain does not reach the right gripper")


def load(path) -> Dataset:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise InvariantViolation(f"{path}: malformed header line") from exc
        if header.get("format") != FORMAT:
            raise InvariantViolation(f"{path}: not a {FORMAT} file")
        if header.get("version") != VERSION:
            raise VersionMismatch(f"{path}: format version {header.get('version')!r}, "
                                  f"this build reads version {VERSION}")
        params = RodParams(**header["rod_params"])
        state_points = int(header["state_points"])
        records = []
        for line in fh:
            if not line.strip():
                continue
            rec = ConfigRecord.from_json(line)
            validate_record(rec, params, state_points)
            records.append(rec)
    if "count" in header and header["count"] != len(records):
        raise InvariantViolation(f"{path}: header announces {header['count']} records, found {len(records)}")
    return Dataset(params, state_points, records)
