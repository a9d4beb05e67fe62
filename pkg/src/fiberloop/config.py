"""Sectioned key-value run configuration, validated in full before any work starts.

Example::

    [run]
    seed = 0
    out_dir = runs/desk

    [rod]
    joint_stiffness = 1.0
    joint_damping = 0.1

    [ppo]
    n_envs = 8
    total_steps = 2000000
"""

from __future__ import annotations

import configparser
import dataclasses
import difflib
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import GridAxis, GripperGrid
from .env import EnvConfig
from .errors import ConfigParseError, ConfigValidationError
from .evaluation import DeployConfig
from .ppo import PpoConfig
from .rod import RodParams, SurfaceModel

# stiffness and damping have no safe default, so they must be written out
REQUIRED = {("rod", "joint_stiffness"), ("rod", "joint_damping")}
DEFAULT_SEGMENT_MASS = 1e-4

_SURFACE_KEYS = {"surface": "mode", "mu": "mu", "normal_load": "normal_load_per_segment",
                 "stiction_velocity": "stiction_velocity"}
_GRID_AXES = ("left_x", "left_y", "right_x", "right_y")


def _fields(cls):
    return {f.name: f for f in dataclasses.fields(cls)}


SCHEMA = {
    "run": {"seed": int, "out_dir": str},
    "rod": {name: f.type for name, f in _fields(RodParams).items()},
    "env": {name: f.type for name, f in _fields(EnvConfig).items()},
    "ppo": {name: f.type for name, f in _fields(PpoConfig).items()},
    "dataset": {**{a: "axis" for a in _GRID_AXES}, "state_points": "int", "ke_tol": "float",
                "max_steps": "int"},
    "deploy": {**{k: ("str" if k == "surface" else "float") for k in _SURFACE_KEYS},
               **{name: f.type for name, f in _fields(DeployConfig).items() if name != "surface"}},
}


@dataclass(frozen=True)
class DatasetConfig:
    grid: GripperGrid = GripperGrid()
    state_points: int = 10
    ke_tol: float = 1e-12
    max_steps: int = 20000


@dataclass(frozen=True)
class RunConfig:
    rod: RodParams
    env: EnvConfig = EnvConfig()
    ppo: PpoConfig = PpoConfig()
    dataset: DatasetConfig = DatasetConfig()
    deploy: DeployConfig = DeployConfig()
    seed: int = 0
    out_dir: str = "runs"
    source: str = field(default="", compare=False)


def _type_name(t) -> str:
    return t if isinstance(t, str) else t.__name__


def _convert(raw: str, kind: str):
    kind = kind.split("|")[0].strip()
    if kind == "bool":
        v = raw.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw.replace("_", ""))
    if kind == "float":
        return float(raw)
    if kind == "axis":
        parts = [float(p) for p in raw.split(",")]
        if len(parts) != 3:
            raise ValueError(f"expected 'start, stop, step', got {raw!r}")
        return GridAxis(*parts)
    return raw.strip()


def _suggest(key: str) -> str:
    known = [f"{s}.{k}" for s, keys in SCHEMA.items() for k in keys]
    close = difflib.get_close_matches(key, known, n=1, cutoff=0.6)
    return f" (did you mean {close[0]}?)" if close else ""


def _read(text: str, source: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigParseError(f"{source}:{exc.lineno}: key outside of any [section]") from exc
    except configparser.DuplicateOptionError as exc:
        raise ConfigParseError(f"{source}:{exc.lineno}: duplicate key {exc.section}.{exc.option}") from exc
    except configparser.DuplicateSectionError as exc:
        raise ConfigParseError(f"{source}:{exc.lineno}: duplicate section [{exc.section}]") from exc
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigParseError(f"{source}:{lineno}: cannot parse {line.strip()!r}") from exc
    return parser


def _build(cls, label, values, problems, **extra):
    try:
        return cls(**values, **extra)
    except (TypeError, ValueError) as exc:
        problems.append(f"{label}: {exc}")
        return None


def parse_config_text(text: str, source: str = "<string>") -> RunConfig:
    """Parse and validate; raise ConfigValidationError listing every problem."""
    parser = _read(text, source)
    problems = []
    values: dict[str, dict] = {s: {} for s in SCHEMA}
    present = set()
    for section in parser.sections():
        if section not in SCHEMA:
            keys = [f"{section}.{key}" for key in parser.options(section)] or [section]
            problems.extend(f"unknown key {k}{_suggest(k)}" for k in keys)
            continue
        for key, raw in parser.items(section):
            present.add((section, key))
            kind = SCHEMA[section].get(key)
            if kind is None:
                problems.append(f"unknown key {section}.{key}{_suggest(f'{section}.{key}')}")
                continue
            try:
                values[section][key] = _convert(raw, _type_name(kind))
            except ValueError as exc:
                problems.append(f"{section}.{key}: {exc}")
    for section, key in sorted(REQUIRED):
        if (section, key) not in present:
            problems.append(f"{section}.{key} is required")
    _range_checks(values, problems)
    if problems:
        raise ConfigValidationError(problems)

    rod_values = dict(values["rod"])
    rod_values.setdefault("segment_mass", DEFAULT_SEGMENT_MASS)
    rod = _build(RodParams, "rod", rod_values, problems)
    env = _build(EnvConfig, "env", values["env"], problems)
    ppo = _build(PpoConfig, "ppo", values["ppo"], problems)
    d = dict(values["dataset"])
    grid = GripperGrid(**{a: d.pop(a) for a in _GRID_AXES if a in d})
    dataset = _build(DatasetConfig, "dataset", d, problems, grid=grid)
    dep = dict(values["deploy"])
    surface_values = {_SURFACE_KEYS[k]: dep.pop(k) for k in list(dep) if k in _SURFACE_KEYS}
    base_surface = DeployConfig().surface
    surface = _build(SurfaceModel, "deploy", {**dataclasses.asdict(base_surface), **surface_values}, problems)
    deploy = _build(DeployConfig, "deploy", dep, problems, surface=surface) if surface else None
    if env is not None and deploy is not None and abs(1.0 / deploy.control_rate - env.control_dt) > 1e-12:
        problems.append(f"deploy.control_rate {deploy.control_rate} Hz does not match env.control_dt "
                        f"{env.control_dt} s")
    if problems:
        raise ConfigValidationError(problems)
    return RunConfig(rod, env, ppo, dataset, deploy, values["run"].get("seed", 0),
                     values["run"].get("out_dir", "runs"), source)


def _range_checks(values, problems):
    """Name the offending key for the common range violations."""
    checks = {
        ("ppo", "gamma"): lambda v: 0 <= v <= 1, ("ppo", "gae_lambda"): lambda v: 0 <= v <= 1,
        ("env", "rho"): lambda v: 0 < v <= 1, ("deploy", "obs_noise_std"): lambda v: v >= 0,
        ("deploy", "mu"): lambda v: v >= 0, ("rod", "n_segments"): lambda v: v >= 3,
    }
    for section, keys in SCHEMA.items():
        for key, kind in keys.items():
            if key in values[section] and (section, key) not in checks:
                v = values[section][key]
                positive = key not in ("seed", "entropy_coef", "value_coef", "holdout_fraction",
                                       "obs_noise_std", "normal_load", "log_std_init",
                                       "log_std_max")
                if positive and _type_name(kind).split("|")[0].strip() in ("int", "float") and not v > 0:
                    problems.append(f"{section}.{key} must be positive, got {v}")
    for (section, key), ok in checks.items():
        if key in values[section] and not ok(values[section][key]):
            problems.append(f"{section}.{key} out of range: {values[section][key]}")


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), str(path))


def with_seed(config: RunConfig, seed: int | None) -> RunConfig:
    return config if seed is None else dataclasses.replace(config, seed=int(seed))


def parse_deploy(path) -> DeployConfig:
    """Read a deployment file; only its [deploy] section (and [run]) is consulted.

    A full run configuration works as well as a file holding only [deploy].
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"deploy file not found: {path}")
    parser = _read(path.read_text(), str(path))
    if parser.has_section("rod"):
        return parse_config(path).deploy
    keep = configparser.ConfigParser(interpolation=None)
    keep.optionxform = str
    keep.read_dict({"rod": {"joint_stiffness": "1", "joint_damping": "1"},
                    **{s: dict(parser.items(s)) for s in parser.sections()}})
    lines = []
    for section in keep.sections():
        lines.append(f"[{section}]")
        lines += [f"{k} = {v}" for k, v in keep.items(section)]
    return parse_config_text("\n".join(lines), str(path)).deploy
