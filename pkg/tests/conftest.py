from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from reactive_primitives import quat
from reactive_primitives.canonical import default_bank
from reactive_primitives.dmp import DmpParams

settings.register_profile("repo", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def bank():
    return default_bank()


def make_primitive(seed: int = 0, angle: float = 0.6, weight_scale: float = 300.0, tau: float = 1.0) -> DmpParams:
    """A primitive between two random orientations with random forcing."""
    r = np.random.default_rng(seed)
    b = default_bank()
    start = quat.random_unit(r)
    axis = r.standard_normal(3)
    goal = quat.compose(quat.from_axis_angle(axis, angle), start)
    return DmpParams(weight_scale * r.standard_normal((b.n, 3)), tau, quat.canonicalize(start), quat.canonicalize(goal), b)


@pytest.fixture
def primitive():
    return make_primitive()
