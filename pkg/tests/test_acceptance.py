"""Acceptance criteria 1-9 at their stated settings and tolerances.

Every test prints exactly one ``criterion N: PASS|FAIL`` line (with the
measured numbers and runtime) and then asserts the same verdict.
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from chirpident.denoise import ASTConfig, ast_denoise, ast_mse_bound, default_eta
from chirpident.harness import (SceneSampler, default_template, is_nonincreasing, knee_location, knee_ratio,
                                paired_improvement, restricted_range_sweep, run_sweep)
from chirpident.matcher import (candidate_intersections, count_complete_matchings, estimates_from_scene,
                                match_noiseless, match_noisy)
from chirpident.model import ChirpProfile, ChirpSchedule, Scene, TargetParams, plan_timing, wrap_cycles
from chirpident.pipeline import identify
from chirpident.specest import SinusoidEstimateSet, estimate_sinusoids
from chirpident.synth import NoiseSpec, synth_dechirped, synth_fullrate, synth_pulses

from conftest import FIVE_TARGETS, make_scene

GRID = [float(s) for s in range(0, 45, 5)]
TRIALS = 200


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail, elapsed):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}  ({elapsed:.1f} s)")
        assert ok, detail
    return emit


def max_triplet_error(scene, result):
    if len(result.triplets) != scene.K:
        return math.inf
    truth = sorted(scene.targets, key=lambda t: t.tau)
    est = sorted(result.triplets, key=lambda t: t.tau)
    return max(max(abs(e.tau - t.tau), abs(e.f - t.f), abs(e.amp - t.amp), abs(wrap_cycles(e.phi - t.phi)))
               for t, e in zip(truth, est))


# --- 1 ---------------------------------------------------------------------------------

def test_c1_noiseless_exactness(verdict):
    t0 = time.perf_counter()
    scene = make_scene(FIVE_TARGETS)
    schedule = ChirpSchedule.four_pulse_plan()
    parts, ok = [], True
    for N in (scene.K + 1, 64):
        plan = plan_timing(scene.K, 440.0, 0.01, f_max=100.0, M=4, N=N)
        try:
            res = identify(synth_pulses(scene, schedule, plan), schedule, 0.01, 100.0, scene.K)
            err = max_triplet_error(scene, res)
            parts.append(f"N={N}: max err {err:.2e}")
            ok &= err <= 1e-9
        except ValueError as exc:
            parts.append(f"N={N}: infeasible ({exc})")
            ok = False
    elapsed = time.perf_counter() - t0
    verdict(1, ok and elapsed < 1.0, "; ".join(parts), elapsed)


# --- 2 ---------------------------------------------------------------------------------

def test_c2_signal_path_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    schedule = ChirpSchedule.four_pulse_plan()
    worst = 0.0
    for _ in range(20):
        K = int(rng.integers(1, 6))
        targets = tuple(TargetParams(float(rng.uniform(0, 0.01)), float(rng.uniform(-100, 100)),
                                     float(rng.uniform(0.2, 2.0)), float(rng.uniform())) for _ in range(K))
        scene = Scene(targets, 0.01, 100.0)
        plan = plan_timing(K, 440.0, 0.01, f_max=100.0, M=4, N=64)
        for chirp in schedule:
            a = synth_dechirped(scene, chirp, plan).samples
            b = synth_fullrate(scene, chirp, plan, oversample=32).samples
            worst = max(worst, float(np.max(np.abs(a - b))))
    elapsed = time.perf_counter() - t0
    verdict(2, worst <= 1e-6 and elapsed < 30.0, f"max deviation {worst:.2e} over 20 scenes", elapsed)


# --- 3 ---------------------------------------------------------------------------------

def test_c3_crlb_adherence(verdict):
    t0 = time.perf_counter()
    N, fs, trials, snr_db = 64, 320.0, 500, 30.0
    snr = 10 ** (snr_db / 10)
    sigma2 = 1.0 / snr
    Ts = 1 / fs
    # fc = 3000 needs fs >= 320 for the bounds below
    plan = plan_timing(1, fs, 0.01, f_max=100.0, M=1, N=N)
    chirp = ChirpProfile(3000.0)
    target = TargetParams(0.004, 20.0, 1.0, 0.3)
    nu_true = target.f - 2 * chirp.fc * target.tau
    nu, amp = [], []
    for i in range(trials):
        scene = Scene((replace(target, phi=(0.3 + 0.618 * i) % 1.0),), 0.01, 100.0)
        est = estimate_sinusoids(synth_dechirped(scene, chirp, plan, NoiseSpec(sigma2, 3, (i,))), 1)
        nu.append(est.nu[0])
        amp.append(est.amp[0])
    var_nu = float(np.mean((np.array(nu) - nu_true) ** 2))
    var_amp = float(np.var(amp))
    bound_nu = 6.0 / (N**3 * snr * Ts**2)
    bound_amp = sigma2 / N
    # the bound is the angular-frequency CRLB, so the Hz estimate is compared as 2*pi*nu
    r_nu = (2 * np.pi) ** 2 * var_nu / bound_nu
    r_nu_hz = var_nu / bound_nu
    r_amp = var_amp / bound_amp
    ok = 1.0 <= r_nu <= 5.0 and 1.0 <= r_amp <= 5.0
    elapsed = time.perf_counter() - t0
    verdict(3, ok and elapsed < 120.0,
            f"var(nu) ratio {r_nu:.3f} (in Hz without 2pi: {r_nu_hz:.4f}); var(|c|) ratio {r_amp:.3f}; band [1, 5]",
            elapsed)


# --- 4, 5, 9: sweeps --------------------------------------------------------------------

@pytest.fixture(scope="module")
def raw_sweep():
    t0 = time.perf_counter()
    res = run_sweep(default_template(K=3), GRID, TRIALS, sweep_id=0)
    return res, time.perf_counter() - t0


def _fmt(values):
    return "[" + ", ".join(f"{v:.3g}" for v in values) + "]"


def test_c4_threshold(verdict, raw_sweep):
    res, elapsed = raw_sweep
    snr = res.snr_db
    parts, ok = [], True
    for col in ("rmse_tau_s", "rmse_f_hz"):
        y = res.column(col)
        mono = is_nonincreasing(snr, y, 15.0)
        ratio = knee_ratio(snr, y, 5.0, 15.0, 40.0)
        ok &= mono and ratio > 10.0
        parts.append(f"{col}: {_fmt(y)} nonincreasing>=15dB={mono} knee ratio@5dB={ratio:.2f}")
    fails = [r.failures for r in res.rows]
    verdict(4, ok and elapsed < 600.0, "; ".join(parts) + f"; failures {fails}", elapsed)


def test_c5_denoising_gain(verdict, raw_sweep):
    raw, raw_elapsed = raw_sweep
    t0 = time.perf_counter()
    den = run_sweep(default_template(K=3, denoise=True), GRID, TRIALS, sweep_id=0)
    elapsed = time.perf_counter() - t0 + raw_elapsed
    j5 = GRID.index(5.0)
    wins, compared = paired_improvement(raw.outcomes[j5], den.outcomes[j5])
    share = wins / compared if compared else 0.0
    y = den.column("rmse_f_hz")
    ratios = [knee_ratio(den.snr_db, y, s, 15.0, 40.0) for s in (0.0, 5.0, 10.0)]
    no_knee = all(r <= 10.0 for r in ratios)
    ok = share >= 0.8 and no_knee
    verdict(5, ok and elapsed < 1800.0,
            f"paired wins at 5 dB {wins}/{compared} = {share:.2f} (need 0.80); denoised RMSE(f) {_fmt(y)}; "
            f"trend ratios at 0/5/10 dB {_fmt(ratios)} (need <= 10)", elapsed)


def test_c9_restricted_range_shift(verdict, raw_sweep):
    raw, _ = raw_sweep
    t0 = time.perf_counter()
    res = restricted_range_sweep(default_template(K=3), GRID, 10.0, TRIALS, sweep_id=2)
    elapsed = time.perf_counter() - t0
    parts, ok = [], True
    for col in ("rmse_tau_s", "rmse_f_hz"):
        k_full = knee_location(raw.snr_db, raw.column(col))
        k_small = knee_location(res.snr_db, res.column(col))
        shift = k_small - k_full
        ok &= 5.0 <= shift <= 15.0
        parts.append(f"{col}: knee {k_full} -> {k_small} dB (shift {shift}); restricted {_fmt(res.column(col))}")
    verdict(9, ok and elapsed < 600.0, "; ".join(parts), elapsed)


# --- 6 -----------------------------------------------------------------------------------

def test_c6_ast_bound(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    N, K, trials = 128, 3, 200
    sigma = math.sqrt(10 ** (-5 / 10))
    bound = ast_mse_bound(sigma, N, float(K))
    n = np.arange(N)
    below = 0
    for _ in range(trials):
        clean = sum(np.exp(2j * np.pi * (f * n + p)) for f, p in zip(rng.uniform(-0.5, 0.5, K), rng.uniform(0, 1, K)))
        noisy = clean + sigma * (rng.standard_normal(N) + 1j * rng.standard_normal(N)) / math.sqrt(2)
        res = ast_denoise(noisy, ASTConfig(default_eta(sigma, N)))
        below += int(np.mean(np.abs(res.denoised - clean) ** 2) < bound)
    elapsed = time.perf_counter() - t0
    verdict(6, below >= 0.9 * trials and elapsed < 1200.0, f"{below}/{trials} trials below {bound:.4f}", elapsed)


# --- 7 -----------------------------------------------------------------------------------

def test_c7_ambiguity_resolution(verdict):
    t0 = time.perf_counter()
    fc = 3000.0
    tau1, tau2 = 0.002, 0.006
    f1 = 10.0
    f2 = f1 + 2 * fc * (tau2 - tau1)  # |f1 - f2| = 2 fc |tau1 - tau2|
    scene = make_scene([(tau1, f1, 1.0, 0.1), (tau2, f2, 0.8, 0.7)])
    schedule = ChirpSchedule.from_rates([fc, -fc, 2 * fc, -2 * fc])
    est = estimates_from_scene(scene, schedule)
    pair_only = count_complete_matchings(candidate_intersections(est[0], est[1], fc, 0.01, 100.0), scene.K)
    res = match_noiseless(est, schedule, 0.01, 100.0)
    err = max_triplet_error(scene, res)
    ok = pair_only >= 2 and res.resolved and err <= 1e-9
    elapsed = time.perf_counter() - t0
    verdict(7, ok and elapsed < 1.0,
            f"pair 1-2: {pair_only} complete matchings; with fc3=2fc1: resolved={res.resolved} max err {err:.1e}",
            elapsed)


# --- 8 -----------------------------------------------------------------------------------

def test_c8_asymptotic_consistency(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    scene = make_scene([(0.003, 20.0, 1.0, 0.0), (0.007, -35.0, 1.0, 0.0)])
    f_true = np.sort([t.f for t in scene.targets])
    sigma_nu, trials = 0.5, 1000
    var = {}
    for M in (4, 16, 64):
        schedule = ChirpSchedule.sign_paired(np.linspace(1000.0, 1e4, M // 2))
        base = estimates_from_scene(scene, schedule)
        f_hat = []
        for _ in range(trials):
            noisy = [SinusoidEstimateSet.from_arrays(b.nu + rng.normal(0, sigma_nu, b.K), b.psi, b.amp, b.m)
                     for b in base]
            f_hat.append(np.sort(match_noisy(noisy, schedule, 0.01, 100.0, sigma_nu).arrays()[1]))
        var[M] = float(np.mean((np.array(f_hat) - f_true) ** 2))
    ratios = [var[16] / var[4], var[64] / var[16]]
    ok = all(0.125 <= r <= 0.5 for r in ratios)
    elapsed = time.perf_counter() - t0
    verdict(8, ok and elapsed < 60.0,
            f"var(f) {_fmt(var.values())} for M=4,16,64; step ratios {_fmt(ratios)} (ideal 0.25)", elapsed)
