"""Seeded Monte Carlo trials and SNR sweeps for the identification pipeline."""
from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .denoise import ASTConfig
from .matcher import UNRESOLVED_KINDS, associate
from .model import ChirpSchedule, Scene, TargetParams, TimingPlan, ValidationError, wrap_cycles
from .pipeline import IdentifyOptions, identify
from .specest import EstimationError, crlb_frequency_var_hz
from .synth import NoiseSpec, synth_pulses

THREADS_ENV = "CHIRP_IDENT_THREADS"
DEFAULT_TRIALS = 200
# samples per pulse in the reference sweeps; shorter pulses are dominated by tone collisions
SWEEP_N = 64
REPRODUCTION_TRIALS = 1000
CSV_HEADER = ("snr_db", "rmse_tau_s", "rmse_f_hz", "rmse_amp", "trials", "failures")

# stream tags separating the scene draw from the noise draw of a trial
_SCENE_TAG = 0
_NOISE_TAG = 1


@dataclass(frozen=True)
class SceneSampler:
    """Uniform random scenes: ``tau`` in ``[0, tau_max/divisor)``, ``f`` in ``(-f_max/divisor, f_max/divisor)``.

    Magnitudes are fixed at ``amp`` (so the per-sample SNR is one number) and
    phases are uniform on ``[0, 1)`` cycles.
    """

    K: int
    tau_max: float
    f_max: float
    divisor: float = 1.0
    amp: float = 1.0

    def __post_init__(self):
        if self.K < 1:
            raise ValidationError("K must be at least 1", "K")
        if self.divisor < 1:
            raise ValidationError("divisor must be at least 1", "divisor")

    def sample(self, rng: np.random.Generator) -> Scene:
        hi_tau = self.tau_max / self.divisor
        hi_f = self.f_max / self.divisor
        # keep strictly inside the open intervals required by TargetParams
        lo_tau = min(1e-9 * self.tau_max, hi_tau / 2)
        tau = rng.uniform(lo_tau, hi_tau, self.K)
        f = rng.uniform(-hi_f, hi_f, self.K) * (1 - 1e-12)
        phi = rng.uniform(0.0, 1.0, self.K)
        targets = tuple(TargetParams(float(t), float(ff), self.amp, float(p)) for t, ff, p in zip(tau, f, phi))
        return Scene(targets, self.tau_max, self.f_max)


@dataclass(frozen=True)
class TrialConfig:
    """Everything that determines one trial.

    ``snr_db = inf`` runs the clean pipeline.  ``stream`` is the
    ``(sweep id, snr index, trial index)`` key; the scene draw ignores the snr
    index so every SNR point (and the denoise on/off arms) sees the same scenes.
    """

    sampler: SceneSampler
    timing: TimingPlan
    schedule: ChirpSchedule
    snr_db: float = math.inf
    denoise: bool = False
    seed: int = 0
    stream: tuple[int, int, int] = (0, 0, 0)
    ast: ASTConfig | None = None

    @property
    def sigma2(self) -> float:
        if math.isinf(self.snr_db) and self.snr_db > 0:
            return 0.0
        if not math.isfinite(self.snr_db):
            raise ValidationError(f"snr_db must be finite or +inf, got {self.snr_db}", "snr_db")
        return self.sampler.amp**2 / 10.0 ** (self.snr_db / 10.0)

    def scene_rng(self) -> np.random.Generator:
        sweep, _, trial = self.stream
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(_SCENE_TAG, sweep, trial))
        return np.random.Generator(np.random.Philox(ss))

    def noise(self) -> NoiseSpec:
        return NoiseSpec(self.sigma2, self.seed, (_NOISE_TAG, *self.stream))


@dataclass(frozen=True, eq=False)
class TrialOutcome:
    """Signed per-target errors (estimate minus truth) of one trial.

    ``failed`` trials carry empty error arrays and a ``reason``.
    """

    err_tau: np.ndarray
    err_f: np.ndarray
    err_amp: np.ndarray
    err_phi: np.ndarray
    flags: tuple[str, ...] = ()
    failed: bool = False
    reason: str = ""

    @property
    def rmse_f(self) -> float:
        return float(np.sqrt(np.mean(self.err_f**2))) if not self.failed else math.inf


def _failure(reason: str, flags=()) -> TrialOutcome:
    e = np.zeros(0)
    return TrialOutcome(e, e, e, e, tuple(flags), True, reason)


def run_trial(config: TrialConfig) -> TrialOutcome:
    """Sample a scene, synthesize, (denoise,) estimate, match and score against truth.

    Pipeline exceptions and unresolved flags become failed outcomes rather
    than propagating.
    """
    scene = config.sampler.sample(config.scene_rng())
    K = len(scene.targets)
    try:
        pulses = synth_pulses(scene, config.schedule, config.timing, config.noise())
        opts = IdentifyOptions(denoise=config.denoise, ast=config.ast)
        result = identify(pulses, config.schedule, scene.tau_max, scene.f_max, K, opts)
    except (EstimationError, ValidationError, np.linalg.LinAlgError, ValueError) as exc:
        return _failure(f"{type(exc).__name__}: {exc}")
    kinds = tuple(fl.kind for fl in result.flags)
    if any(k in UNRESOLVED_KINDS for k in kinds) or len(result.triplets) != K:
        return _failure("unresolved: " + ",".join(kinds), kinds)
    ti, ei = associate(scene, result)
    truth = [scene.targets[i] for i in ti]
    est = [result.triplets[j] for j in ei]
    return TrialOutcome(
        np.array([e.tau - t.tau for t, e in zip(truth, est)]),
        np.array([e.f - t.f for t, e in zip(truth, est)]),
        np.array([e.amp - t.amp for t, e in zip(truth, est)]),
        np.array([wrap_cycles(e.phi - t.phi) for t, e in zip(truth, est)]),
        kinds,
    )


@dataclass(frozen=True)
class SweepRow:
    snr_db: float
    rmse_tau_s: float
    rmse_f_hz: float
    rmse_amp: float
    trials: int
    failures: int


@dataclass(frozen=True, eq=False)
class SweepResult:
    """Per-SNR RMSE rows plus the raw outcomes they were computed from.

    ``crlb_f_hz`` is the single-pulse frequency CRLB standard deviation at
    each grid point (the overlay reference); it is not part of the CSV table.
    """

    rows: tuple[SweepRow, ...]
    outcomes: tuple[tuple[TrialOutcome, ...], ...] = field(repr=False, default=())
    crlb_f_hz: tuple[float, ...] = ()

    @property
    def snr_db(self) -> np.ndarray:
        return np.array([r.snr_db for r in self.rows])

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([repr(float(r.snr_db)), repr(r.rmse_tau_s), repr(r.rmse_f_hz), repr(r.rmse_amp),
                        r.trials, r.failures])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, text: str) -> "SweepResult":
        rd = csv.reader(io.StringIO(text))
        header = tuple(next(rd))
        if header != CSV_HEADER:
            raise ValidationError(f"unexpected sweep header {header}", "csv")
        rows = [SweepRow(float(a), float(b), float(c), float(d), int(e), int(f)) for a, b, c, d, e, f in rd]
        return cls(tuple(rows))


def aggregate(snr_db: float, outcomes: Sequence[TrialOutcome]) -> SweepRow:
    """RMSE over successful trials (all targets pooled); failures are only counted."""
    ok = [o for o in outcomes if not o.failed]

    def rmse(attr):
        if not ok:
            return math.nan
        # fixed reduction order keeps sweeps byte-identical
        e = np.concatenate([getattr(o, attr) for o in ok])
        return float(np.sqrt(np.mean(e**2))) if e.size else math.nan

    return SweepRow(float(snr_db), rmse("err_tau"), rmse("err_f"), rmse("err_amp"),
                    len(outcomes), len(outcomes) - len(ok))


def worker_count(requested: int | None = None) -> int:
    """Pool size: ``requested``, else all CPUs, bounded by ``CHIRP_IDENT_THREADS``."""
    n = requested or os.cpu_count() or 1
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ValidationError(f"{THREADS_ENV} must be a positive integer, got {env!r}", THREADS_ENV)
        if cap < 1:
            raise ValidationError(f"{THREADS_ENV} must be a positive integer, got {env!r}", THREADS_ENV)
        n = min(n, cap)
    return max(1, int(n))


def run_trials(configs: Sequence[TrialConfig], workers: int | None = None) -> list[TrialOutcome]:
    """Run trials in order; results do not depend on the worker count."""
    n = worker_count(workers)
    if n == 1 or len(configs) < 2:
        return [run_trial(c) for c in configs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(run_trial, configs, chunksize=max(1, len(configs) // (4 * n))))


def run_sweep(template: TrialConfig, snr_grid: Sequence[float], trials: int = DEFAULT_TRIALS,
              sweep_id: int = 0, workers: int | None = None) -> SweepResult:
    """Aggregate ``trials`` seeded trials at every grid SNR.

    Trial ``i`` at grid index ``j`` uses stream ``(sweep_id, j, i)``; equal
    ``template.seed`` and ``sweep_id`` give identical outputs.
    """
    grid = [float(s) for s in snr_grid]
    if not grid:
        raise ValidationError("SNR grid is empty", "snr_db")
    if trials < 1:
        raise ValidationError("trials must be positive", "trials")
    configs = [replace(template, snr_db=s, stream=(sweep_id, j, i))
               for j, s in enumerate(grid) for i in range(trials)]
    flat = run_trials(configs, workers)
    per = [tuple(flat[j * trials:(j + 1) * trials]) for j in range(len(grid))]
    rows = tuple(aggregate(s, o) for s, o in zip(grid, per))
    N, Ts = template.timing.N, template.timing.Ts
    crlb = tuple(0.0 if math.isinf(s) else
                 math.sqrt(crlb_frequency_var_hz(10.0 ** (s / 10.0), N, Ts)) for s in grid)
    return SweepResult(rows, tuple(per), crlb)


def restricted_range_sweep(template: TrialConfig, snr_grid: Sequence[float], divisor: float = 10.0,
                           trials: int = DEFAULT_TRIALS, sweep_id: int = 0,
                           workers: int | None = None) -> SweepResult:
    """:func:`run_sweep` with the scene ranges shrunk by ``divisor``."""
    if divisor < 1:
        raise ValidationError("divisor must be at least 1", "divisor")
    sampler = replace(template.sampler, divisor=float(divisor))
    return run_sweep(replace(template, sampler=sampler), snr_grid, trials, sweep_id, workers)


def trend_fit(snr_db, rmse, lo: float, hi: float):
    """Least-squares line of ``log10(rmse)`` against SNR over ``[lo, hi]`` dB.

    Returns ``(slope, intercept)``; needs at least two finite positive points.
    """
    snr = np.asarray(snr_db, dtype=float)
    y = np.asarray(rmse, dtype=float)
    sel = (snr >= lo) & (snr <= hi) & np.isfinite(y) & (y > 0)
    if sel.sum() < 2:
        raise ValueError(f"need two positive RMSE values in [{lo}, {hi}] dB")
    slope, intercept = np.polyfit(snr[sel], np.log10(y[sel]), 1)
    return float(slope), float(intercept)


def knee_ratio(snr_db, rmse, at: float, lo: float = 15.0, hi: float = 40.0) -> float:
    """RMSE at ``at`` dB divided by the value the ``[lo, hi]`` trend predicts there."""
    snr = np.asarray(snr_db, dtype=float)
    idx = np.flatnonzero(np.isclose(snr, at))
    if idx.size == 0:
        raise ValueError(f"{at} dB is not on the grid")
    slope, intercept = trend_fit(snr, rmse, lo, hi)
    return float(np.asarray(rmse, dtype=float)[idx[0]] / 10.0 ** (slope * at + intercept))


def knee_location(snr_db, rmse, factor: float = 10.0, top: int = 3) -> float:
    """Highest grid SNR whose RMSE exceeds ``factor`` times the high-SNR trend.

    The trend is fit to the ``top`` highest-SNR points.  Returns ``-inf``
    when no grid point breaks away from the trend.
    """
    snr = np.asarray(snr_db, dtype=float)
    y = np.asarray(rmse, dtype=float)
    order = np.argsort(snr)
    snr, y = snr[order], y[order]
    slope, intercept = trend_fit(snr[-top:], y[-top:], snr[-top], snr[-1])
    pred = 10.0 ** (slope * snr + intercept)
    broke = np.flatnonzero(~(y <= factor * pred))  # NaN counts as a break
    return float(snr[broke[-1]]) if broke.size else -math.inf


def is_nonincreasing(snr_db, rmse, start: float) -> bool:
    """Strictly nonincreasing in the sense ``rmse[i+1] <= rmse[i]`` from ``start`` dB up."""
    snr = np.asarray(snr_db, dtype=float)
    y = np.asarray(rmse, dtype=float)[np.argsort(snr)]
    snr = np.sort(snr)
    y = y[snr >= start]
    return bool(np.all(np.isfinite(y)) and np.all(np.diff(y) <= 0))


def paired_improvement(raw: Sequence[TrialOutcome], den: Sequence[TrialOutcome]) -> tuple[int, int]:
    """Count paired trials where the denoised RMSE(f) is at most the raw one.

    Pairs where both arms failed carry no information and are skipped.
    Returns ``(wins, compared)``.
    """
    wins = compared = 0
    for a, b in zip(raw, den):
        if a.failed and b.failed:
            continue
        compared += 1
        wins += int(b.rmse_f <= a.rmse_f)
    return wins, compared


def default_template(K: int = 3, N: int = SWEEP_N, fs: float = 440.0, tau_max: float = 0.01, f_max: float = 100.0,
                     seed: int = 0, denoise: bool = False, divisor: float = 1.0) -> TrialConfig:
    """Sweep template with the four-pulse sign-paired plan (+-3000, +-6000 Hz/s)."""
    from .model import plan_timing

    schedule = ChirpSchedule.four_pulse_plan()
    plan = plan_timing(K, fs, tau_max, f_max=f_max, M=schedule.M, N=N)
    return TrialConfig(SceneSampler(K, tau_max, f_max, divisor), plan, schedule, math.inf, denoise, seed)
