import warnings

import numpy as np
import pytest

from taskcond.cond import build_library, load_reference_conditions
from taskcond.core import Trajectory
from taskcond.errors import DegenerateDemo


@pytest.fixture(scope="session")
def library():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateDemo)
        return build_library()


@pytest.fixture(scope="session")
def reference():
    return load_reference_conditions()


def min_jerk(a, b, n):
    s = np.linspace(0.0, 1.0, n)[:, None]
    return np.asarray(a) + (np.asarray(b) - np.asarray(a)) * (10 * s**3 - 15 * s**4 + 6 * s**5)


def make_traj(positions, rate=100.0):
    return Trajectory.from_positions(positions, rate)
