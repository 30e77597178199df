import numpy as np
import pytest

from chirpident.model import ChirpSchedule, Scene, TargetParams, plan_timing

FIVE_TARGETS = (
    (0.001, -80.0, 1.0, 0.1),
    (0.0045, 10.0, 0.8, 0.35),
    (0.0015, 85.0, 1.2, 0.6),
    (0.0095, -10.0, 0.9, 0.85),
    (0.004, 90.0, 1.1, 0.2),
)


def make_scene(rows, tau_max=0.01, f_max=100.0) -> Scene:
    return Scene(tuple(TargetParams(*r) for r in rows), tau_max, f_max)


@pytest.fixture
def five_scene() -> Scene:
    return make_scene(FIVE_TARGETS)


@pytest.fixture
def paired_schedule() -> ChirpSchedule:
    return ChirpSchedule.four_pulse_plan()


@pytest.fixture
def plan64():
    return plan_timing(5, 440.0, 0.01, f_max=100.0, M=4, N=64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
