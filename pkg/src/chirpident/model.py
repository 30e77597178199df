"""Domain types and the parametric target <-> beat-tone mappings.

A target is a (time shift, frequency shift, complex amplitude) triplet.  After
dechirping, a target probed by a chirp of sweep rate ``fc`` shows up as a
complex sinusoid with

    nu  = f - 2 * fc * tau            (beat frequency, Hz)
    psi = phi + fc * tau**2           (beat phase, cycles)

Phases are kept in cycles throughout the package, so ``exp(2j*pi*phase)`` is
the only conversion ever needed.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

# boundary slack for the open parameter intervals
BOUND_EPS = 1e-12


class ValidationError(ValueError):
    """A parameter or configuration value violates a model constraint.

    ``field`` names the offending key so callers (the CLI in particular) can
    produce field-level messages.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class ChirpRateError(ValidationError):
    """Chirp rate outside ``0 < |fc| <= 1 / tau_max**2``.

    ``side`` is ``"zero"`` for a vanishing rate and ``"too_steep"`` when the
    delay-to-phase map would wrap more than one cycle over ``[0, tau_max]``.
    """

    def __init__(self, message: str, side: str, fc: float, bound: float):
        super().__init__(message, field="fc")
        self.side = side
        self.fc = fc
        self.bound = bound


@dataclass(frozen=True)
class TargetParams:
    """One scatterer: delay ``tau`` (s), Doppler ``f`` (Hz), ``amp`` and ``phi`` (cycles)."""

    tau: float
    f: float
    amp: float = 1.0
    phi: float = 0.0

    def __post_init__(self):
        if self.amp < 0:
            raise ValidationError(f"amp must be nonnegative, got {self.amp}", "amp")

    @property
    def c(self) -> complex:
        return self.amp * np.exp(2j * np.pi * self.phi)


@dataclass(frozen=True)
class ChirpProfile:
    """Sweep rate ``fc`` (Hz/s, signed) and offset ``f0`` (Hz) of pulse ``m``."""

    fc: float
    f0: float = 0.0
    m: int = 0


@dataclass(frozen=True)
class ChirpSchedule:
    """Ordered chirp profiles, one per pulse."""

    chirps: tuple[ChirpProfile, ...]

    def __post_init__(self):
        object.__setattr__(self, "chirps", tuple(self.chirps))

    @classmethod
    def from_rates(cls, rates: Iterable[float], f0: float = 0.0) -> "ChirpSchedule":
        return cls(tuple(ChirpProfile(float(fc), f0, m) for m, fc in enumerate(rates)))

    @classmethod
    def sign_paired(cls, magnitudes: Iterable[float], f0: float = 0.0) -> "ChirpSchedule":
        """``(+a, -a, +b, -b, ...)`` for the given magnitudes."""
        rates = []
        for a in magnitudes:
            rates += [abs(a), -abs(a)]
        return cls.from_rates(rates, f0)

    @classmethod
    def four_pulse_plan(cls, fc: float = 3000.0, ratio: float = 2.0) -> "ChirpSchedule":
        """Default four-pulse plan ``(fc, -fc, ratio*fc, -ratio*fc)``."""
        return cls.sign_paired([fc, ratio * fc])

    @property
    def M(self) -> int:
        return len(self.chirps)

    @property
    def rates(self) -> np.ndarray:
        return np.array([c.fc for c in self.chirps], dtype=float)

    def __len__(self):
        return len(self.chirps)

    def __iter__(self):
        return iter(self.chirps)

    def __getitem__(self, i):
        return self.chirps[i]

    def is_sign_paired(self) -> bool:
        r = self.rates
        if len(r) % 2 or len(r) == 0:
            return False
        return bool(np.all(r[1::2] == -r[0::2]))

    def pairs(self) -> list[tuple[int, int]]:
        """Adjacent ``(i, i+1)`` pulses with opposite rates, scanned left to right without overlap."""
        r = self.rates
        out, i = [], 0
        while i < len(r) - 1:
            if r[i + 1] == -r[i] and r[i] != 0:
                out.append((i, i + 1))
                i += 2
            else:
                i += 1
        return out


@dataclass(frozen=True)
class BeatParams:
    nu: float
    psi: float


@dataclass(frozen=True)
class Scene:
    """Targets plus the delay/Doppler bounds they live in."""

    targets: tuple[TargetParams, ...]
    tau_max: float
    f_max: float

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))

    @property
    def K(self) -> int:
        return len(self.targets)

    def validate(self, allow_empty: bool = False) -> None:
        if self.K == 0 and not allow_empty:
            raise ValidationError("scene has no targets", "targets")
        for i, t in enumerate(self.targets):
            if not (-BOUND_EPS <= t.tau < self.tau_max):
                raise ValidationError(
                    f"target {i}: tau={t.tau} outside [0, tau_max={self.tau_max})", "tau")
            if not abs(t.f) < self.f_max:
                raise ValidationError(
                    f"target {i}: |f|={abs(t.f)} not below f_max={self.f_max}", "f")
            if not t.amp >= 0:
                raise ValidationError(f"target {i}: amp={t.amp} is negative", "amp")

    def permuted(self, order: Sequence[int]) -> "Scene":
        return replace(self, targets=tuple(self.targets[i] for i in order))


@dataclass(frozen=True)
class TimingPlan:
    """Pulse timing: durations in seconds, rates in Hz."""

    Tp: float
    T: float
    tau_max: float
    f_max: float
    fs: float
    N: int
    M: int = 4

    @property
    def To(self) -> float:
        return self.Tp - self.tau_max

    @property
    def Tg(self) -> float:
        return self.T - self.Tp

    @property
    def Ts(self) -> float:
        return 1.0 / self.fs

    def violations(self, schedule: ChirpSchedule | None = None, K: int | None = None) -> list[str]:
        """List every violated timing constraint (empty when the plan is valid)."""
        out = []
        tol = 1e-12 * max(1.0, self.T)
        if self.fs <= 0:
            out.append(f"fs={self.fs} must be positive")
        if self.N < 1:
            out.append(f"N={self.N} must be positive")
        if self.Tg < self.tau_max - tol:
            out.append(f"guard interval T-Tp={self.Tg} shorter than tau_max={self.tau_max}")
        if self.To <= 0 and self.tau_max > 0:
            out.append(f"measurement interval Tp-tau_max={self.To} not positive")
        if self.fs > 0 and self.To < self.N / self.fs - tol:
            out.append(f"measurement interval {self.To} shorter than N/fs={self.N / self.fs}")
        if K is not None and self.N < K + 1:
            out.append(f"N={self.N} < K+1={K + 1}")
        if schedule is not None:
            if len(schedule) != self.M:
                out.append(f"schedule has {len(schedule)} pulses but M={self.M}")
            for c in schedule:
                need = min_sampling_rate(self.f_max, c.fc, self.tau_max)
                if self.fs < need - 1e-9 * need:
                    out.append(f"fs={self.fs} below Nyquist rate {need} for fc={c.fc}")
                if self.tau_max > 0:
                    try:
                        validate_chirp_rate(c.fc, self.tau_max)
                    except ChirpRateError as exc:
                        out.append(str(exc))
        return out

    def validate(self, schedule: ChirpSchedule | None = None, K: int | None = None) -> None:
        bad = self.violations(schedule, K)
        if bad:
            raise ValidationError("; ".join(bad), "timing")

    def doppler_product(self) -> float:
        """``f_max * Tp``; reported only, no threshold is enforced."""
        return self.f_max * self.Tp


def beat_frequency(target: TargetParams, chirp: ChirpProfile) -> float:
    return target.f - 2.0 * chirp.fc * target.tau


def beat_phase(target: TargetParams, chirp: ChirpProfile) -> float:
    """Beat phase in cycles, reduced into [0, 1).

    A nonzero chirp offset ``f0`` contributes ``-f0 * tau``; with the default
    ``f0 = 0`` this is the plain ``phi + fc * tau**2``.
    """
    psi = target.phi + chirp.fc * target.tau**2 - chirp.f0 * target.tau
    return psi % 1.0


def beat_params(target: TargetParams, chirp: ChirpProfile) -> BeatParams:
    return BeatParams(beat_frequency(target, chirp), beat_phase(target, chirp))


def min_sampling_rate(f_max: float, fc: float, tau_max: float) -> float:
    return 2.0 * (f_max + 2.0 * abs(fc) * tau_max)


def chirp_rate_bound(tau_max: float) -> float:
    return 1.0 / tau_max**2


def validate_chirp_rate(fc: float, tau_max: float) -> None:
    """Raise :class:`ChirpRateError` unless ``0 < |fc| <= 1/tau_max**2``."""
    if tau_max <= 0:
        raise ValidationError(f"tau_max must be positive, got {tau_max}", "tau_max")
    bound = chirp_rate_bound(tau_max)
    if fc == 0:
        raise ChirpRateError("chirp rate must be nonzero", "zero", fc, bound)
    if abs(fc) > bound * (1 + 1e-12):
        raise ChirpRateError(
            f"chirp rate |fc|={abs(fc)} exceeds 1/tau_max^2={bound}", "too_steep", fc, bound)


def plan_timing(K: int, fs: float, tau_max: float, guard_slack: float = 0.0,
                f_max: float = 0.0, M: int = 4, N: int | None = None) -> TimingPlan:
    """Shortest timing plan supporting ``K`` targets.

    ``N`` defaults to ``K + 1``; a larger ``N`` may be requested.
    """
    if K < 1:
        raise ValidationError(f"K must be at least 1, got {K}", "K")
    if fs <= 0:
        raise ValidationError(f"fs must be positive, got {fs}", "fs")
    if tau_max < 0 or guard_slack < 0:
        raise ValidationError("tau_max and guard_slack must be nonnegative", "tau_max")
    if N is None:
        N = K + 1
    To = N / fs
    Tp = To + tau_max
    T = Tp + tau_max + guard_slack
    return TimingPlan(Tp=Tp, T=T, tau_max=tau_max, f_max=f_max, fs=fs, N=N, M=M)


def invert_pair(nu1: float, nu2: float, fc1: float) -> tuple[float, float]:
    """Delay and Doppler from the beat tones of a ``(+fc1, -fc1)`` pulse pair."""
    if fc1 == 0:
        raise ValidationError("fc1 must be nonzero", "fc")
    return (nu1 - nu2) / (-4.0 * fc1), (nu1 + nu2) / 2.0


def wrap_cycles(x):
    """Map phases (cycles) into [-0.5, 0.5)."""
    return (np.asarray(x) + 0.5) % 1.0 - 0.5


# --- config (de)serialization -------------------------------------------------

def scene_to_dict(scene: Scene) -> dict:
    return {
        "tau_max": scene.tau_max,
        "f_max": scene.f_max,
        "targets": [{"tau": t.tau, "f": t.f, "amp": t.amp, "phi": t.phi} for t in scene.targets],
    }


def _check_keys(d, allowed: tuple, where: str) -> None:
    if not isinstance(d, dict):
        raise ValidationError(f"{where}: expected a mapping, got {type(d).__name__}", where)
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ValidationError(f"{where}: unknown keys {extra} (allowed: {', '.join(allowed)})", str(extra[0]))


def scene_from_dict(d: dict) -> Scene:
    _check_keys(d, ("tau_max", "f_max", "targets"), "scene")
    try:
        targets = []
        for i, t in enumerate(d.get("targets") or []):
            _check_keys(t, ("tau", "f", "amp", "phi"), f"scene.targets[{i}]")
            targets.append(TargetParams(float(t["tau"]), float(t["f"]), float(t.get("amp", 1.0)),
                                        float(t.get("phi", 0.0))))
        return Scene(tuple(targets), float(d["tau_max"]), float(d["f_max"]))
    except KeyError as exc:
        raise ValidationError(f"scene: missing key {exc}", str(exc.args[0])) from None
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"scene: {exc}", "scene") from None


def schedule_to_list(schedule: ChirpSchedule) -> list[dict]:
    return [{"fc": c.fc, "f0": c.f0} for c in schedule]


def schedule_from_list(items: list) -> ChirpSchedule:
    if not isinstance(items, (list, tuple)):
        raise ValidationError("schedule: expected a list of chirps", "schedule")
    chirps = []
    try:
        for m, it in enumerate(items):
            if isinstance(it, dict):
                _check_keys(it, ("fc", "f0"), f"schedule[{m}]")
                if "fc" not in it:
                    raise ValidationError(f"schedule[{m}]: missing key 'fc'", "fc")
                chirps.append(ChirpProfile(float(it["fc"]), float(it.get("f0", 0.0)), m))
            else:
                chirps.append(ChirpProfile(float(it), 0.0, m))
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"schedule: {exc}", "fc") from None
    return ChirpSchedule(tuple(chirps))


def timing_to_dict(plan: TimingPlan) -> dict:
    return {"Tp": plan.Tp, "T": plan.T, "tau_max": plan.tau_max, "f_max": plan.f_max,
            "fs": plan.fs, "N": plan.N, "M": plan.M}


def timing_from_dict(d: dict) -> TimingPlan:
    _check_keys(d, ("Tp", "T", "tau_max", "f_max", "fs", "N", "M"), "timing")
    try:
        return TimingPlan(Tp=float(d["Tp"]), T=float(d["T"]), tau_max=float(d["tau_max"]),
                          f_max=float(d["f_max"]), fs=float(d["fs"]), N=int(d["N"]),
                          M=int(d.get("M", 4)))
    except KeyError as exc:
        raise ValidationError(f"timing: missing key {exc}", str(exc.args[0])) from None
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"timing: {exc}", "timing") from None


def check_bijective(fc: float, tau_max: float, n_grid: int = 10001) -> bool:
    """Dense-grid check that ``tau -> fc*tau**2`` is monotone and spans under one cycle."""
    tau = np.linspace(0.0, tau_max, n_grid)
    theta = fc * tau**2
    d = np.diff(theta)
    monotone = bool(np.all(d > 0) or np.all(d < 0))
    return monotone and abs(theta[-1] - theta[0]) <= 1.0 + 1e-12


__all__ = [
    "BOUND_EPS", "ValidationError", "ChirpRateError", "TargetParams", "ChirpProfile",
    "ChirpSchedule", "BeatParams", "Scene", "TimingPlan", "beat_frequency", "beat_phase",
    "beat_params", "min_sampling_rate", "chirp_rate_bound", "validate_chirp_rate",
    "plan_timing", "invert_pair", "wrap_cycles", "scene_to_dict", "scene_from_dict",
    "schedule_to_list", "schedule_from_list", "timing_to_dict", "timing_from_dict",
    "check_bijective",
]
