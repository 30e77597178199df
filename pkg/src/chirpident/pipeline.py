"""End-to-end identification: samples -> (optional AST) -> tone estimates -> matching."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .denoise import ASTConfig, ast_denoise, default_eta
from .matcher import (Flag, MatchResult, hypothesis_slopes, match_noiseless, match_noisy,
                      next_chirp_rate)
from .model import ChirpProfile, ChirpSchedule, ValidationError, validate_chirp_rate
from .specest import (PredictorConfig, SinusoidEstimateSet, crlb_frequency_var_hz, estimate_model_order,
                      estimate_sigma, estimate_sinusoids, singular_values)
from .synth import PulseSamples


@dataclass(frozen=True)
class IdentifyOptions:
    """Knobs for :func:`identify`.

    ``mode`` is ``"auto"`` (noiseless matching iff every pulse is clean),
    ``"noiseless"`` or ``"noisy"``.  ``sigma2`` overrides the per-pulse noise
    variance carried by the samples.  ``robust`` lets the noisy matcher
    leave one disagreeing pulse out of a target's fit.
    """

    denoise: bool = False
    mode: str = "auto"
    predictor: str | None = None
    sigma2: float | None = None
    band: float = 3.0
    phase_tol: float = 1e-6
    ast: ASTConfig | None = None
    robust: bool = True


def pulse_sigma2(pulse: PulseSamples, override: float | None) -> float:
    return float(override) if override is not None else float(pulse.sigma2)


def infer_K(pulses: Sequence[PulseSamples]) -> int:
    """Model order from the largest singular-value gap, agreed across pulses (max)."""
    orders = [estimate_model_order(singular_values(p)) for p in pulses]
    orders = [k for k in orders if k is not None]
    if not orders:
        raise ValidationError("cannot infer K: flat singular-value spectrum", "K")
    return int(max(orders))


def identify(pulses: Sequence[PulseSamples], schedule: ChirpSchedule, tau_max: float, f_max: float,
             K: int | None = None, options: IdentifyOptions | None = None) -> MatchResult:
    """Recover target triplets from the dechirped pulses of one schedule."""
    opts = options or IdentifyOptions()
    pulses = list(pulses)
    if len(pulses) != schedule.M:
        raise ValidationError(f"{len(pulses)} pulses for a {schedule.M}-chirp schedule", "M")
    if K is None:
        K = infer_K(pulses)
    sig2 = [pulse_sigma2(p, opts.sigma2) for p in pulses]
    if opts.mode not in ("auto", "noisy", "noiseless"):
        raise ValidationError(f"unknown mode {opts.mode!r}", "mode")
    noisy = opts.mode == "noisy" or (opts.mode == "auto" and any(s > 0 for s in sig2))

    flags: list[Flag] = []
    if opts.denoise:
        cleaned = []
        for p, s2 in zip(pulses, sig2):
            sigma = np.sqrt(s2) if s2 > 0 else estimate_sigma(p, K)
            cfg = opts.ast or ASTConfig(eta=default_eta(sigma, p.N))
            res = ast_denoise(p, cfg)
            if not res.converged:
                flags.append(Flag("nonconvergence", f"AST on pulse {p.m} stopped at {res.iterations} iterations"))
            cleaned.append(p.with_samples(res.denoised))
        pulses = cleaned

    mode = opts.predictor or ("svd_truncated" if noisy else "exact")
    estimates = [estimate_sinusoids(p, K, PredictorConfig.default(p.N, K, mode)) for p in pulses]

    if not noisy:
        result = match_noiseless(estimates, schedule, tau_max, f_max, phase_tol=opts.phase_tol)
    else:
        sigma_nu = []
        for p, s2, e in zip(pulses, sig2, estimates):
            if s2 <= 0:
                s2 = estimate_sigma(p, K) ** 2
            amp = max(float(np.min(e.amp)), 1e-300)
            snr = amp**2 / s2 if s2 > 0 else np.inf
            sigma_nu.append(np.sqrt(crlb_frequency_var_hz(snr, p.N, p.Ts)))
        result = match_noisy(estimates, schedule, tau_max, f_max, np.array(sigma_nu), opts.band, opts.robust)
    return result.with_flags(flags) if flags else result


def identify_adaptive(acquire: Callable[[ChirpProfile], PulseSamples], first_rate: float, tau_max: float,
                      f_max: float, K: int, fs: float | None = None, max_pulses: int = 8,
                      options: IdentifyOptions | None = None) -> tuple[MatchResult, ChirpSchedule]:
    """Send sign-paired pulses until the match is unambiguous or ``max_pulses`` is reached.

    ``acquire(chirp)`` must return the dechirped samples for one pulse.  After
    each pair the conflicting hypotheses (if any) pick the next rate via
    :func:`next_chirp_rate`.  With ``fs`` given, new rates also respect the
    dechirped Nyquist limit ``|fc| <= (fs/2 - f_max) / (2 tau_max)``.
    """
    validate_chirp_rate(first_rate, tau_max)
    cap = (fs / 2.0 - f_max) / (2.0 * tau_max) if fs is not None else None
    rates = [abs(first_rate), -abs(first_rate)]
    pulses = [acquire(ChirpProfile(r, 0.0, m)) for m, r in enumerate(rates)]
    while True:
        schedule = ChirpSchedule.from_rates(rates)
        try:
            result = identify(pulses, schedule, tau_max, f_max, K, options)
        except ValidationError:
            if len(rates) >= 4:
                raise
            result = None
        if result is not None and (result.resolved or len(rates) + 2 > max_pulses):
            return result, schedule
        points = _conflict_points(result)
        fc = next_chirp_rate(hypothesis_slopes(points) if len(points) > 1 else [], rates, tau_max,
                             max_rate=cap)
        for r in (fc, -fc):
            pulses.append(acquire(ChirpProfile(r, 0.0, len(rates))))
            rates.append(r)


def _conflict_points(result: MatchResult | None):
    """``(tau, f)`` of every hypothesis named in an ambiguity flag."""
    if result is None:
        return np.zeros((0, 2))
    pts = [(m[2], m[3]) for fl in result.ambiguity_flags for m in fl.members
           if isinstance(m, tuple) and len(m) == 4]
    return np.array(pts) if pts else np.zeros((0, 2))


def estimate_all(pulses: Sequence[PulseSamples], K: int, mode: str = "svd_truncated") -> list[SinusoidEstimateSet]:
    return [estimate_sinusoids(p, K, PredictorConfig.default(p.N, K, mode)) for p in pulses]
