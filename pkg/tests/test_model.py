import math

import numpy as np
import pytest

from chirpident.model import (ChirpProfile, ChirpRateError, ChirpSchedule, Scene, TargetParams, TimingPlan,
                              ValidationError, beat_frequency, beat_phase, check_bijective, invert_pair,
                              min_sampling_rate, plan_timing, scene_from_dict, scene_to_dict, schedule_from_list,
                              schedule_to_list, timing_from_dict, timing_to_dict, validate_chirp_rate)


@pytest.mark.parametrize("tau,f,fc,expected", [
    (0.0, 0.0, 3000.0, 0.0),
    (0.001, -80.0, 3000.0, -86.0),
    (0.001, -80.0, -3000.0, -74.0),
])
def test_beat_frequency(tau, f, fc, expected):
    assert beat_frequency(TargetParams(tau, f), ChirpProfile(fc)) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("phi,tau,fc,expected", [
    (0.0, 0.0, 3000.0, 0.0),
    (0.25, 0.001, 3000.0, 0.253),
    (0.9, 0.01, 3000.0, 0.2),
])
def test_beat_phase(phi, tau, fc, expected):
    psi = beat_phase(TargetParams(tau, 0.0, 1.0, phi), ChirpProfile(fc))
    assert 0.0 <= psi < 1.0
    assert psi == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("f_max,fc,tau_max,expected", [
    (100.0, 3000.0, 0.01, 320.0),
    (0.0, 0.0, 5.0, 0.0),
    (100.0, -6000.0, 0.01, 440.0),
])
def test_min_sampling_rate(f_max, fc, tau_max, expected):
    assert min_sampling_rate(f_max, fc, tau_max) == pytest.approx(expected)


def test_min_sampling_rate_monotone():
    base = min_sampling_rate(50.0, 2000.0, 0.005)
    assert min_sampling_rate(60.0, 2000.0, 0.005) >= base
    assert min_sampling_rate(50.0, -2500.0, 0.005) >= base
    assert min_sampling_rate(50.0, 2000.0, 0.006) >= base


def test_validate_chirp_rate():
    validate_chirp_rate(3000.0, 0.01)
    validate_chirp_rate(-1e4, 0.01)
    with pytest.raises(ChirpRateError, match="zero"):
        validate_chirp_rate(0.0, 0.01)
    with pytest.raises(ChirpRateError, match="exceeds"):
        validate_chirp_rate(10001.0, 0.01)


def test_plan_timing_examples():
    p = plan_timing(5, 320.0, 0.01)
    assert p.N == 6
    assert (p.Tp, p.T) == pytest.approx((0.02875, 0.03875))
    p = plan_timing(3, 440.0, 0.01, guard_slack=0.001)
    assert p.N == 4
    assert p.Tp == pytest.approx(4 / 440 + 0.01)
    assert p.T == pytest.approx(4 / 440 + 0.021)


def test_plan_timing_zero_delay_bound():
    p = plan_timing(1, 1000.0, 0.0)
    assert (p.N, p.Tp, p.T) == (2, pytest.approx(0.002), pytest.approx(0.002))


@pytest.mark.parametrize("args", [(0, 320.0, 0.01), (3, 0.0, 0.01), (3, 320.0, -0.01), (3, 320.0, 0.01, -1.0)])
def test_plan_timing_rejects_bad_inputs(args):
    with pytest.raises(ValidationError):
        plan_timing(*args)


def test_plan_timing_passes_validation(paired_schedule):
    p = plan_timing(3, 440.0, 0.01, f_max=100.0, M=4, N=64)
    p.validate(paired_schedule, 3)
    assert p.violations(paired_schedule, 3) == []


def test_timing_violations_reported(paired_schedule):
    p = TimingPlan(Tp=0.02, T=0.025, tau_max=0.01, f_max=100.0, fs=300.0, N=64, M=4)
    msgs = " ".join(p.violations(paired_schedule, 3))
    assert "Nyquist" in msgs
    with pytest.raises(ValidationError):
        p.validate(paired_schedule, 3)


@pytest.mark.parametrize("nu1,nu2,fc1,tau,f", [
    (-86.0, -74.0, 3000.0, 0.001, -80.0),
    (0.0, 0.0, 1234.0, 0.0, 0.0),
    (160.0, 40.0, -3000.0, 0.01, 100.0),
])
def test_invert_pair(nu1, nu2, fc1, tau, f):
    assert invert_pair(nu1, nu2, fc1) == (pytest.approx(tau, abs=1e-15), pytest.approx(f, abs=1e-12))


def test_invert_pair_zero_rate():
    with pytest.raises(ValidationError):
        invert_pair(1.0, 2.0, 0.0)


def test_check_bijective():
    assert check_bijective(1e4, 0.01)
    assert check_bijective(-3000.0, 0.01)
    assert not check_bijective(2e4, 0.01)


def test_scene_bounds():
    # delays are drawn from [0, tau_max), so the closed lower end is accepted
    Scene((TargetParams(0.0, 1.0),), 0.01, 100.0).validate()
    with pytest.raises(ValidationError):
        Scene((TargetParams(-1e-6, 1.0),), 0.01, 100.0).validate()
    with pytest.raises(ValidationError):
        Scene((TargetParams(0.01, 1.0),), 0.01, 100.0).validate()
    with pytest.raises(ValidationError):
        Scene((TargetParams(0.001, 100.0),), 0.01, 100.0).validate()
    with pytest.raises(ValidationError):
        Scene((TargetParams(0.001, 1.0, -1.0),), 0.01, 100.0).validate()
    Scene((), 0.01, 100.0).validate(allow_empty=True)


def test_schedule_pairs_and_sign_pairing():
    s = ChirpSchedule.four_pulse_plan()
    assert s.rates.tolist() == [3000.0, -3000.0, 6000.0, -6000.0]
    assert s.is_sign_paired()
    assert s.pairs() == [(0, 1), (2, 3)]
    assert not ChirpSchedule.from_rates([3000.0, 6000.0]).is_sign_paired()


def test_serialization_round_trip(five_scene, plan64, paired_schedule):
    d = scene_to_dict(five_scene)
    assert set(d["targets"][0]) == {"tau", "f", "amp", "phi"}
    assert scene_from_dict(d) == five_scene
    assert timing_from_dict(timing_to_dict(plan64)) == plan64
    assert set(timing_to_dict(plan64)) == {"Tp", "T", "tau_max", "f_max", "fs", "N", "M"}
    assert schedule_from_list(schedule_to_list(paired_schedule)).rates.tolist() == paired_schedule.rates.tolist()


@pytest.mark.parametrize("bad", [
    {"tau_max": 0.01, "f_max": 100, "targets": [{"tau": 0.001, "f": 1, "gain": 2}]},
    {"tau_max": 0.01, "f_max": 100, "extra": 1},
    {"tau_max": 0.01, "targets": []},
    {"tau_max": "x", "f_max": 100},
])
def test_scene_from_dict_rejects(bad):
    with pytest.raises(ValidationError):
        scene_from_dict(bad)


def test_target_complex_amplitude():
    t = TargetParams(0.001, 0.0, 2.0, 0.25)
    assert t.c == pytest.approx(2j)
    assert math.isclose(abs(t.c), 2.0)
    assert np.isclose(np.angle(t.c) / (2 * np.pi), 0.25)
