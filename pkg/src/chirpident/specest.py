"""Per-pulse sinusoid recovery with the forward-backward linear predictor.

The predictor polynomial ``H(z) = z^L + h[1] z^(L-1) + ... + h[L]`` is fit to
the forward-backward prediction equations; its ``K`` roots nearest the unit
circle give the beat frequencies, and a least-squares fit on those
frequencies gives amplitudes and phases.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .synth import PulseSamples


class EstimationError(RuntimeError):
    """The sample data cannot support the requested estimate."""


class RankDeficiencyError(EstimationError):
    def __init__(self, message: str, rank: int, K: int):
        super().__init__(message)
        self.rank = rank
        self.K = K


class IllConditionedError(EstimationError):
    def __init__(self, message: str, cond: float):
        super().__init__(message)
        self.cond = cond


# relative singular-value floor used to decide numerical rank in exact mode
EXACT_RTOL = 1e-10


@dataclass(frozen=True)
class PredictorConfig:
    """Predictor order ``L``, model order ``K`` and solve ``mode``."""

    L: int
    K: int
    mode: str = "svd_truncated"

    def __post_init__(self):
        if self.mode not in ("exact", "svd_truncated"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.L < 1 or self.K < 1:
            raise ValueError("L and K must be positive")
        if self.L < self.K:
            raise ValueError(f"predictor order L={self.L} below model order K={self.K}")

    def check(self, N: int) -> None:
        if not self.K <= self.L <= N - self.K:
            raise ValueError(
                f"need K <= L <= N-K for the forward-backward system, got K={self.K}, "
                f"L={self.L}, N={N}")

    @classmethod
    def default(cls, N: int, K: int, mode: str = "svd_truncated") -> "PredictorConfig":
        """``L = floor(3N/4)`` clipped into ``[K, N-K]``."""
        if N - K < K:
            raise ValueError(f"N={N} samples cannot support K={K} tones (need N >= 2K)")
        L = min(max(3 * N // 4, K), N - K)
        return cls(L, K, mode)


@dataclass(frozen=True)
class SinusoidEstimate:
    nu: float
    psi: float
    amp: float


@dataclass(frozen=True)
class SinusoidEstimateSet:
    """Unordered per-pulse estimates ``(nu_hat, psi_hat, amp_hat)``."""

    components: tuple[SinusoidEstimate, ...]
    m: int = 0
    merged: tuple[int, ...] = field(default=())

    @property
    def K(self) -> int:
        return len(self.components)

    @property
    def nu(self) -> np.ndarray:
        return np.array([c.nu for c in self.components])

    @property
    def psi(self) -> np.ndarray:
        return np.array([c.psi for c in self.components])

    @property
    def amp(self) -> np.ndarray:
        return np.array([c.amp for c in self.components])

    @classmethod
    def from_arrays(cls, nu, psi, amp, m: int = 0) -> "SinusoidEstimateSet":
        comps = tuple(SinusoidEstimate(float(a), float(b) % 1.0, float(c))
                      for a, b, c in zip(nu, psi, amp))
        return cls(comps, m)

    def permuted(self, order) -> "SinusoidEstimateSet":
        return SinusoidEstimateSet(tuple(self.components[i] for i in order), self.m, self.merged)


def _as_array(samples) -> np.ndarray:
    if isinstance(samples, PulseSamples):
        return samples.samples
    return np.asarray(samples, dtype=complex)


def build_fb_system(samples, L: int):
    """Forward-backward predictor matrix ``Y`` and vector ``y``.

    With 1-based sample indexing the forward rows are
    ``[y[i], y[i-1], ..., y[i-L+1]]`` predicting ``y[i+1]`` for ``i = L..N-1``;
    the backward rows are ``[y*[j+1], ..., y*[j+L]]`` predicting ``y*[j]`` for
    ``j = 1..N-L``.  ``Y`` is ``2(N-L) x L``.
    """
    x = _as_array(samples)
    N = len(x)
    if L < 1 or N < L + 1:
        raise ValueError(f"need 1 <= L <= N-1, got L={L}, N={N}")
    rows = N - L
    # forward block: row r (0-based) holds x[r+L-1], x[r+L-2], ..., x[r]
    idx_f = (L - 1) + np.arange(rows)[:, None] - np.arange(L)[None, :]
    # backward block: row r holds conj(x[r+1]), ..., conj(x[r+L])
    idx_b = 1 + np.arange(rows)[:, None] + np.arange(L)[None, :]
    Y = np.vstack([x[idx_f], np.conj(x[idx_b])])
    vec = np.concatenate([x[L:], np.conj(x[:rows])])
    return Y, vec


def solve_predictor(system, config: PredictorConfig) -> np.ndarray:
    """Predictor coefficients ``h[1..L]``.

    Both modes use the SVD of ``Y``: ``exact`` keeps every singular value
    above a relative floor (minimum-norm least squares), ``svd_truncated``
    keeps only the ``K`` largest.  Truncating ``Y`` at rank ``K`` gives the
    same solution as the rank-``K`` proxy of ``R = Y^H Y``.
    """
    Y, vec = system
    U, s, Vh = np.linalg.svd(Y, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        raise EstimationError("degenerate predictor system (all-zero samples)")
    rank = int(np.sum(s > EXACT_RTOL * s[0]))
    if config.mode == "exact":
        keep = rank
    else:
        if rank < config.K:
            raise RankDeficiencyError(
                f"predictor matrix has numerical rank {rank} < K={config.K}", rank, config.K)
        keep = config.K
    coef = (U[:, :keep].conj().T @ vec) / s[:keep]
    return -(Vh[:keep].conj().T @ coef)


def polynomial_roots(h) -> np.ndarray:
    """Roots of ``z^L + h[1] z^(L-1) + ... + h[L]`` (companion eigenvalues)."""
    return np.roots(np.concatenate([[1.0], np.asarray(h)]))


def roots_to_frequencies(h, K: int, Ts: float, samples=None) -> np.ndarray:
    """Frequencies (Hz) of the ``K`` predictor roots closest to the unit circle.

    ``samples`` is only consulted to break exact distance ties, in favour of
    the candidate with the larger least-squares amplitude.
    """
    z = polynomial_roots(h)
    z = z[np.isfinite(z)]
    if len(z) < K:
        raise EstimationError(f"only {len(z)} finite roots for K={K}")
    dist = np.abs(1.0 - np.abs(z))
    order = np.argsort(dist, kind="stable")
    if samples is not None and len(z) > K and abs(dist[order[K]] - dist[order[K - 1]]) < 1e-12:
        tied = np.flatnonzero(np.abs(dist - dist[order[K - 1]]) < 1e-12)
        sure = [i for i in order[:K] if i not in set(tied)]
        nu_tied = np.angle(z[tied]) / (2 * np.pi * Ts)
        amps = np.abs(_ls_coefficients(_as_array(samples), nu_tied, Ts))
        pick = tied[np.argsort(-amps, kind="stable")[:K - len(sure)]]
        order = np.array(sure + list(pick))
    chosen = z[order[:K]]
    return np.angle(chosen) / (2 * np.pi * Ts)


def _ls_coefficients(x, nu, Ts) -> np.ndarray:
    n = np.arange(len(x))
    F = np.exp(2j * np.pi * np.outer(n * Ts, nu))
    zeta, *_ = np.linalg.lstsq(F, x, rcond=None)
    return zeta


def ls_amplitude_phase(samples, nu_hat, Ts: float, max_cond: float = 1e10):
    """Least-squares ``(amp_hat, psi_hat)`` for each frequency in ``nu_hat``.

    Raises :class:`IllConditionedError` for near-duplicate frequencies
    (separation under ``1e-9 * fs``) or a Vandermonde condition number above
    ``max_cond``.
    """
    x = _as_array(samples)
    nu_hat = np.atleast_1d(np.asarray(nu_hat, dtype=float))
    fs = 1.0 / Ts
    if len(nu_hat) > 1:
        d = np.abs(nu_hat[:, None] - nu_hat[None, :])
        d[np.diag_indices_from(d)] = np.inf
        if d.min() <= 1e-9 * fs:
            raise IllConditionedError("frequencies closer than 1e-9*fs", np.inf)
    n = np.arange(len(x))
    F = np.exp(2j * np.pi * np.outer(n * Ts, nu_hat))
    cond = np.linalg.cond(F)
    if cond > max_cond:
        raise IllConditionedError(f"Vandermonde condition number {cond:.3g}", cond)
    zeta, *_ = np.linalg.lstsq(F, x, rcond=None)
    amp = np.abs(zeta)
    psi = (np.angle(zeta) / (2 * np.pi)) % 1.0
    return amp, psi


def merge_close(nu, tol: float):
    """Collapse frequencies closer than ``tol``; returns (unique, merged index groups)."""
    nu = np.asarray(nu, dtype=float)
    order = np.argsort(nu)
    keep, merged = [], []
    for i in order:
        if keep and abs(nu[i] - nu[keep[-1]]) <= tol:
            merged.append(int(i))
            continue
        keep.append(int(i))
    return nu[np.sort(keep)], tuple(merged)


def estimate_sinusoids(samples: PulseSamples, K: int, config: PredictorConfig | None = None,
                       ) -> SinusoidEstimateSet:
    """Frequencies, phases and amplitudes of ``K`` tones in one pulse."""
    x = samples.samples
    if config is None:
        config = PredictorConfig.default(len(x), K)
    config.check(len(x))
    h = solve_predictor(build_fb_system(x, config.L), config)
    nu = roots_to_frequencies(h, K, samples.Ts, samples=x)
    nu_u, merged = merge_close(nu, 1e-9 / samples.Ts)
    amp, psi = ls_amplitude_phase(x, nu_u, samples.Ts)
    est = SinusoidEstimateSet.from_arrays(nu_u, psi, amp, samples.m)
    if merged:
        est = SinusoidEstimateSet(est.components, est.m, merged)
    return est


def singular_values(samples, L: int | None = None) -> np.ndarray:
    """Singular values of ``R = Y^H Y``; ``L`` defaults to ``N // 2`` so ``R`` is full rank under noise."""
    x = _as_array(samples)
    if L is None:
        L = len(x) // 2
    Y, _ = build_fb_system(x, L)
    return np.linalg.svd(Y, compute_uv=False) ** 2


def estimate_model_order(sv, min_ratio: float = 2.0) -> int | None:
    """Model order at the largest spectral gap ``s_i / s_(i+1)``; ``None`` when flat."""
    s = np.sort(np.asarray(sv, dtype=float))[::-1]
    if len(s) < 2:
        raise ValueError("need at least two singular values")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = s[:-1] / s[1:]
    # exact zeros after a positive value are an infinite gap; 0/0 is no gap
    ratio = np.where(np.isnan(ratio), 1.0, ratio)
    i = int(np.argmax(ratio))
    if not ratio[i] >= min_ratio:
        return None
    return i + 1


def crlb_frequency_var(snr_linear: float, N: int, Ts: float) -> float:
    """Asymptotic frequency-variance floor ``6 / (N^3 * SNR * Ts^2)``.

    The expression is the angular-frequency bound (rad/s squared).  Divide by
    ``(2*pi)**2`` for Hz squared; see :func:`crlb_frequency_var_hz`.
    """
    if N < 2:
        raise ValueError("N must be at least 2")
    if np.isinf(snr_linear):
        return 0.0
    if snr_linear <= 0:
        raise ValueError("snr must be positive")
    return 6.0 / (N**3 * snr_linear * Ts**2)


def crlb_frequency_var_hz(snr_linear: float, N: int, Ts: float) -> float:
    """Frequency-variance floor in Hz squared, ``6 / (4 pi^2 N^3 SNR Ts^2)``."""
    return crlb_frequency_var(snr_linear, N, Ts) / (2 * np.pi) ** 2


def crlb_amplitude_var(sigma2: float, N: int) -> float:
    if N < 1:
        raise ValueError("N must be positive")
    return sigma2 / N


def estimate_sigma(samples, K: int, config: PredictorConfig | None = None) -> float:
    """Robust noise-level estimate from the residual of a ``K``-tone fit.

    Uses ``1.4826 * MAD`` of the imaginary part of the residual, scaled by
    ``sqrt(2)`` to a complex standard deviation.
    """
    x = _as_array(samples)
    Ts = samples.Ts if isinstance(samples, PulseSamples) else 1.0
    ps = samples if isinstance(samples, PulseSamples) else PulseSamples(0, x, Ts)
    est = estimate_sinusoids(ps, K, config)
    n = np.arange(len(x))
    F = np.exp(2j * np.pi * np.outer(n * Ts, est.nu))
    zeta = est.amp * np.exp(2j * np.pi * est.psi)
    resid = x - F @ zeta
    im = resid.imag
    mad = np.median(np.abs(im - np.median(im)))
    dof = np.sqrt(len(x) / max(len(x) - 3 * K, 1))
    return float(1.4826 * mad * np.sqrt(2.0) * dof)
