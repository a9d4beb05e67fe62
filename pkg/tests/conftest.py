import numpy as np
import pytest

from fiberloop.dataset import Dataset, make_record
from fiberloop.rod import RodParams

DEFAULT_ROD = RodParams(joint_stiffness=1.0, joint_damping=0.1, segment_mass=1e-4)


@pytest.fixture(scope="session")
def rod():
    return DEFAULT_ROD


@pytest.fixture(scope="session")
def free_rod():
    return RodParams(joint_stiffness=1.0, joint_damping=0.1, segment_mass=1e-4, end_clamp=False)


@pytest.fixture(scope="session")
def small_dataset(rod):
    """Six settled shapes: three gripper pairs, both buckle signs."""
    pairs = [((0.0, 0.0), (11.0, 0.0)), ((1.0, -1.0), (12.0, 0.5)), ((0.5, 1.0), (10.0, -1.0))]
    records = []
    for xl, xr in pairs:
        for sign in (1, -1):
            records.append(make_record(len(records), rod, np.array(xl), np.array(xr), sign, 10, len(records)))
    return Dataset(rod, 10, records)
