"""Checkpoint files: one JSON header line followed by raw little-endian float64 arrays."""

from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from .env import EnvConfig
from .errors import VersionMismatch
from .policy import ActorCritic
from .preprocessing import RunningNorm
from .rod import RodParams

FORMAT = "fiberloop-checkpoint"
VERSION = 1


def save_checkpoint(path, model: ActorCritic, norm: RunningNorm, rod_params: RodParams,
                    env_config: EnvConfig, meta: dict | None = None, extra_arrays: dict | None = None):
    arrays = {}
    for i, p in enumerate(model.params):
        arrays[f"param{i}"] = p
    count, mean, var = norm.state_arrays()
    arrays["norm_count"] = count
    arrays["norm_mean"] = mean
    arrays["norm_var"] = var
    for k, v in (extra_arrays or {}).items():
        arrays[k] = np.asarray(v, dtype=np.float64)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "obs_dim": model.obs_dim,
        "act_dim": model.act_dim,
        "hidden": list(model.hidden),
        "norm_clip": norm.clip,
        "norm_epsilon": norm.epsilon,
        "rod_params": asdict(rod_params),
        "env_config": asdict(env_config),
        "arrays": [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()],
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_checkpoint(path):
    """Return (header, arrays) without building any objects."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != FORMAT:
            raise ValueError(f"{path} is not a {FORMAT} file")
        if header.get("version") != VERSION:
            raise VersionMismatch(f"checkpoint version {header.get('version')!r}, expected {VERSION}")
        blob = fh.read()
    flat = np.frombuffer(blob, dtype="<f8")
    arrays = {}
    offset = 0
    for spec in header["arrays"]:
        size = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arrays[spec["name"]] = flat[offset:offset + size].reshape(spec["shape"]).astype(np.float64)
        offset += size
    if offset != flat.size:
        raise ValueError(f"{path}: {flat.size - offset} trailing values")
    return header, arrays


def load_checkpoint(path):
    """Return (model, norm, rod_params, env_config, header, arrays)."""
    header, arrays = read_checkpoint(path)
    model = ActorCritic(header["obs_dim"], header["act_dim"], tuple(header["hidden"]))
    n_params = len(model.params)
    model.set_params([arrays[f"param{i}"] for i in range(n_params)])
    norm = RunningNorm.from_state(float(arrays["norm_count"][0]), arrays["norm_mean"], arrays["norm_var"],
                                  clip=header["norm_clip"], epsilon=header["norm_epsilon"])
    rod = RodParams(**header["rod_params"])
    env_config = EnvConfig(**header["env_config"])
    return model, norm, rod, env_config, header, arrays
