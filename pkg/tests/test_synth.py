import numpy as np
import pytest

from chirpident.model import ChirpProfile, Scene, TargetParams, TimingPlan, ValidationError, plan_timing
from chirpident.synth import (NoiseSpec, PulseSamples, add_noise, fullrate_waveforms, load_pulse_dir,
                              pulse_filename, read_samples_txt, synth_dechirped, synth_fullrate, synth_pulses,
                              write_samples_txt)

from conftest import make_scene


def single_plan(N=8, fs=320.0):
    return TimingPlan(Tp=N / fs + 0.01, T=N / fs + 0.02, tau_max=0.01, f_max=100.0, fs=fs, N=N, M=2)


def test_empty_scene_is_zero(plan64):
    s = Scene((), 0.01, 100.0)
    assert not np.any(synth_dechirped(s, ChirpProfile(3000.0), plan64).samples)
    assert not np.any(synth_fullrate(s, ChirpProfile(3000.0), plan64).samples)


def test_single_target_closed_form():
    scene = make_scene([(0.001, -80.0, 1.0, 0.0)])
    ps = synth_dechirped(scene, ChirpProfile(3000.0), single_plan())
    n = np.arange(8)
    np.testing.assert_allclose(ps.samples, np.exp(2j * np.pi * (0.003 - 86.0 * n / 320.0)), atol=1e-13)
    assert ps.Ts == 1 / 320.0 and ps.sigma2 == 0.0


def test_injected_noise_variance():
    scene = make_scene([(0.001, -80.0, 1.0, 0.0)])
    plan = single_plan()
    clean = synth_dechirped(scene, ChirpProfile(3000.0), plan).samples
    diffs = np.concatenate([synth_dechirped(scene, ChirpProfile(3000.0), plan, NoiseSpec(0.01, s)).samples - clean
                            for s in range(2000)])
    assert np.mean(np.abs(diffs) ** 2) == pytest.approx(0.01, rel=0.05)
    assert abs(np.mean(diffs)) < 0.01


def test_noise_determinism_and_identity():
    ps = PulseSamples(0, np.ones(16, complex), 1e-3)
    assert add_noise(ps, NoiseSpec(0.0, 5)).samples.tolist() == ps.samples.tolist()
    a = add_noise(ps, NoiseSpec(0.3, 5)).samples
    b = add_noise(ps, NoiseSpec(0.3, 5)).samples
    assert np.array_equal(a, b)
    assert not np.array_equal(a, add_noise(ps, NoiseSpec(0.3, 6)).samples)


def test_noise_variance_large_n():
    ps = PulseSamples(0, np.zeros(4096, complex), 1e-3)
    e = add_noise(ps, NoiseSpec(1.0, 11)).samples
    assert np.var(e) == pytest.approx(1.0, rel=0.05)
    # circular symmetry: real and imaginary parts carry half each
    assert np.var(e.real) == pytest.approx(0.5, rel=0.1)


def test_negative_noise_variance_rejected():
    with pytest.raises(ValidationError):
        NoiseSpec(-1.0, 0)


def test_fullrate_matches_closed_form(five_scene, plan64, paired_schedule):
    for chirp in paired_schedule:
        a = synth_dechirped(five_scene, chirp, plan64).samples
        b = synth_fullrate(five_scene, chirp, plan64, oversample=32).samples
        assert np.max(np.abs(a - b)) <= 1e-6


def test_dechirp_preserves_modulus():
    scene = make_scene([(0.004, 30.0, 1.3, 0.2)])
    plan = plan_timing(1, 440.0, 0.01, f_max=100.0, N=32)
    _, received, dechirped = fullrate_waveforms(scene, ChirpProfile(6000.0), plan)
    np.testing.assert_allclose(np.abs(received), np.abs(dechirped), atol=1e-12)


def test_linearity(plan64):
    a = make_scene([(0.002, 10.0, 1.0, 0.1)])
    b = make_scene([(0.007, -40.0, 0.5, 0.9)])
    ab = make_scene([(0.002, 10.0, 1.0, 0.1), (0.007, -40.0, 0.5, 0.9)])
    chirp = ChirpProfile(-3000.0)
    for synth in (synth_dechirped, synth_fullrate):
        total = synth(ab, chirp, plan64).samples
        np.testing.assert_allclose(total, synth(a, chirp, plan64).samples + synth(b, chirp, plan64).samples,
                                   atol=1e-12)


def test_fullrate_noise_statistics(plan64):
    # noise injected before the dechirp has the same variance afterwards
    scene = Scene((), 0.01, 100.0)
    e = np.concatenate([synth_fullrate(scene, ChirpProfile(3000.0), plan64, noise=NoiseSpec(0.5, s)).samples
                        for s in range(60)])
    assert np.var(e) == pytest.approx(0.5, rel=0.1)


def test_fullrate_rejects_small_oversample(plan64):
    scene = make_scene([(0.001, 0.0, 1.0, 0.0)])
    with pytest.raises(ValidationError):
        synth_fullrate(scene, ChirpProfile(3000.0), plan64, oversample=4)
    # bandwidth 2*6000*Tp exceeds 8*fs once the pulse is long enough
    long_plan = plan_timing(1, 440.0, 0.01, f_max=100.0, N=256)
    synth_fullrate(scene, ChirpProfile(6000.0), plan64, oversample=8)
    with pytest.raises(ValidationError, match="bandwidth"):
        synth_fullrate(scene, ChirpProfile(6000.0), long_plan, oversample=8)


def test_invalid_chirp_rejected_before_synthesis(plan64):
    scene = make_scene([(0.001, 0.0, 1.0, 0.0)])
    with pytest.raises(ValidationError):
        synth_dechirped(scene, ChirpProfile(20000.0), plan64)


def test_text_round_trip_bit_exact(tmp_path, rng):
    ps = PulseSamples(3, rng.standard_normal(50) + 1j * rng.standard_normal(50), 1 / 440.0, 0.0123)
    ps = ps.with_samples(ps.samples * np.array([1e-300, 1e300] * 25))
    path = tmp_path / pulse_filename(3)
    write_samples_txt(path, ps)
    back = read_samples_txt(path)
    assert back.m == 3 and back.Ts == ps.Ts and back.sigma2 == ps.sigma2
    assert np.array_equal(back.samples, ps.samples)
    lines = path.read_text().splitlines()
    assert lines[1] == "# n re im"
    assert lines[2].split()[0] == "0"


def test_dict_round_trip(rng):
    ps = PulseSamples(1, rng.standard_normal(7) + 1j * rng.standard_normal(7), 0.001, 0.5)
    back = PulseSamples.from_dict(ps.to_dict())
    assert np.array_equal(back.samples, ps.samples) and back.m == 1


def test_pulse_dir(tmp_path, five_scene, plan64, paired_schedule):
    pulses = synth_pulses(five_scene, paired_schedule, plan64)
    for p in pulses:
        write_samples_txt(tmp_path / pulse_filename(p.m), p)
    loaded = load_pulse_dir(tmp_path)
    assert [p.m for p in loaded] == [0, 1, 2, 3]
    assert all(np.array_equal(a.samples, b.samples) for a, b in zip(pulses, loaded))


def test_fullrate_path_option(five_scene, plan64, paired_schedule):
    a = synth_pulses(five_scene, paired_schedule, plan64)
    b = synth_pulses(five_scene, paired_schedule, plan64, path="fullrate")
    assert max(np.max(np.abs(x.samples - y.samples)) for x, y in zip(a, b)) <= 1e-6


def test_target_at_zero_delay(plan64):
    scene = Scene((TargetParams(0.0, 50.0, 1.0, 0.3),), 0.01, 100.0)
    a = synth_dechirped(scene, ChirpProfile(3000.0), plan64).samples
    b = synth_fullrate(scene, ChirpProfile(3000.0), plan64).samples
    assert np.max(np.abs(a - b)) <= 1e-6
