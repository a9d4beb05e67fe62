"""Named random streams split from a single root seed."""

import numpy as np

STREAMS = {"dataset": 1, "weights": 2, "envs": 3, "actions": 4, "minibatch": 5, "eval": 6, "split": 7,
           "experiment": 8}


def seed_sequence(seed: int, name: str, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), STREAMS[name], *(int(e) for e in extra)])


def rng(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, name, *extra))


def int_seed(seed: int, name: str, *extra: int) -> int:
    return int(seed_sequence(seed, name, *extra).generate_state(1)[0])
