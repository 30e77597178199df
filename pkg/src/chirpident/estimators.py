"""scikit-learn style wrappers around the estimation pipeline.

Sample matrices are complex arrays of shape ``(n_pulses, N)``; a single
pulse may be passed as a 1-D array.  scikit-learn's own ``check_array``
rejects complex input, so the helpers below do that validation instead.
"""
from __future__ import annotations

from numbers import Integral, Real

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .denoise import ASTConfig, ast_denoise, default_eta
from .model import ChirpSchedule, ValidationError
from .pipeline import IdentifyOptions, identify
from .specest import PredictorConfig, estimate_sigma, estimate_sinusoids
from .synth import PulseSamples


# --- validation helpers ----------------------------------------------------------

def check_samples(X, min_samples: int = 1, name: str = "X") -> np.ndarray:
    """Return ``X`` as a finite complex 2-D array ``(n_pulses, N)``.

    Raises
    ------
    ValidationError
        On wrong dimensionality, too few samples, or non-finite entries.
    """
    if isinstance(X, PulseSamples):
        X = X.samples
    elif isinstance(X, (list, tuple)) and X and isinstance(X[0], PulseSamples):
        if len({p.N for p in X}) != 1:
            raise ValidationError(f"{name}: pulses have different lengths", name)
        X = np.stack([p.samples for p in X])
    try:
        arr = np.asarray(X)
    except ValueError:
        raise ValidationError(f"{name}: ragged or non-numeric input", name) from None
    if arr.dtype == object:
        raise ValidationError(f"{name}: ragged or non-numeric input", name)
    arr = arr.astype(complex, copy=False)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValidationError(f"{name}: expected a 1-D or 2-D array, got {arr.ndim}-D", name)
    if arr.shape[1] < min_samples:
        raise ValidationError(f"{name}: need at least {min_samples} samples per pulse, got {arr.shape[1]}", name)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: contains NaN or infinity", name)
    return arr


def check_positive(value, name: str, integer: bool = False, allow_none: bool = False, strict: bool = True):
    """Validate a scalar hyperparameter; returns it unchanged."""
    if value is None and allow_none:
        return value
    kind = Integral if integer else Real
    if isinstance(value, bool) or not isinstance(value, kind):
        raise ValidationError(f"{name} must be {'an integer' if integer else 'a real number'}, got {value!r}", name)
    if not np.isfinite(value) or (value <= 0 if strict else value < 0):
        raise ValidationError(f"{name} must be {'positive' if strict else 'nonnegative'}, got {value!r}", name)
    return value


def check_choice(value, name: str, choices) -> str:
    if value not in choices:
        raise ValidationError(f"{name} must be one of {tuple(choices)}, got {value!r}", name)
    return value


def check_schedule(rates) -> ChirpSchedule:
    if isinstance(rates, ChirpSchedule):
        return rates
    try:
        arr = np.asarray(rates, dtype=float).ravel()
    except (TypeError, ValueError):
        raise ValidationError("chirp_rates must be a sequence of numbers", "fc") from None
    if arr.size == 0 or not np.all(np.isfinite(arr)):
        raise ValidationError("chirp_rates must be a nonempty finite sequence", "fc")
    return ChirpSchedule.from_rates(arr)


def _pulses(X: np.ndarray, Ts: float, sigma2: float = 0.0) -> list[PulseSamples]:
    return [PulseSamples(m, row, Ts, sigma2) for m, row in enumerate(X)]


# --- estimators ----------------------------------------------------------------

class KTEstimator(TransformerMixin, BaseEstimator):
    """Forward-backward linear-prediction tone estimator, one row per pulse.

    ``transform`` returns ``(n_pulses, 3K)`` features laid out as
    ``[nu_1..nu_K, psi_1..psi_K, amp_1..amp_K]`` with tones sorted by
    frequency.  ``predict`` returns just the frequencies.

    Parameters
    ----------
    K : int
        Number of tones per pulse.
    Ts : float
        Sampling period in seconds.
    L : int, optional
        Predictor order; defaults to ``3N/4`` clipped into ``[K, N-K]``.
    mode : {"exact", "svd_truncated"}
    """

    def __init__(self, K: int = 1, Ts: float = 1.0, L: int | None = None, mode: str = "svd_truncated"):
        self.K = K
        self.Ts = Ts
        self.L = L
        self.mode = mode

    def _config(self, N: int) -> PredictorConfig:
        if self.L is None:
            return PredictorConfig.default(N, self.K, self.mode)
        cfg = PredictorConfig(self.L, self.K, self.mode)
        cfg.check(N)
        return cfg

    def _validate_params(self):
        check_positive(self.K, "K", integer=True)
        check_positive(self.Ts, "Ts")
        check_positive(self.L, "L", integer=True, allow_none=True)
        check_choice(self.mode, "mode", ("exact", "svd_truncated"))

    def fit(self, X, y=None):
        self._validate_params()
        X = check_samples(X, 2 * self.K)
        self.n_features_in_ = X.shape[1]
        self.estimates_ = self._estimate(X)
        return self

    def _estimate(self, X):
        cfg = self._config(X.shape[1])
        return [estimate_sinusoids(p, self.K, cfg) for p in _pulses(X, self.Ts)]

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_samples(X, 2 * self.K)
        if X.shape[1] != self.n_features_in_:
            raise ValidationError(f"fitted on N={self.n_features_in_} samples, got {X.shape[1]}", "N")
        rows = []
        for est in self._estimate(X):
            order = np.argsort(est.nu, kind="stable")
            rows.append(np.concatenate([est.nu[order], est.psi[order], est.amp[order]]))
        return np.array(rows)

    def predict(self, X):
        return self.transform(X)[:, : self.K]


class ASTDenoiser(TransformerMixin, BaseEstimator):
    """Atomic soft thresholding per pulse.

    ``eta`` defaults to ``sigma * sqrt(N ln N)``; ``sigma`` defaults to a
    residual-based estimate that needs ``K``.  ``n_iter_`` and
    ``converged_`` describe the last ``transform`` call.
    """

    def __init__(self, sigma: float | None = None, eta: float | None = None, K: int | None = None,
                 rho: float = 2.0, max_iters: int = 5000, tol: float = 1e-6):
        self.sigma = sigma
        self.eta = eta
        self.K = K
        self.rho = rho
        self.max_iters = max_iters
        self.tol = tol

    def fit(self, X, y=None):
        check_positive(self.sigma, "sigma", allow_none=True, strict=False)
        check_positive(self.eta, "eta", allow_none=True, strict=False)
        check_positive(self.K, "K", integer=True, allow_none=True)
        check_positive(self.rho, "rho")
        check_positive(self.max_iters, "max_iters", integer=True)
        check_positive(self.tol, "tol")
        if self.sigma is None and self.eta is None and self.K is None:
            raise ValidationError("give sigma, eta or K (to estimate sigma)", "sigma")
        X = check_samples(X, 4)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_samples(X, 4)
        out = np.empty_like(X)
        iters, conv = [], []
        for i, row in enumerate(X):
            eta = self.eta
            if eta is None:
                sigma = self.sigma if self.sigma is not None else estimate_sigma(row, self.K)
                eta = default_eta(sigma, len(row))
            res = ast_denoise(row, ASTConfig(eta, self.rho, self.max_iters, self.tol))
            out[i] = res.denoised
            iters.append(res.iterations)
            conv.append(res.converged)
        self.n_iter_ = np.array(iters)
        self.converged_ = np.array(conv)
        return out


class LTVIdentifier(BaseEstimator):
    """End-to-end delay/Doppler identification from dechirped pulses.

    ``fit(X)`` takes the ``(M, N)`` samples of one pulse train whose chirp
    rates are ``chirp_rates``; ``predict()`` returns the ``(K, 4)`` array of
    ``(tau, f, amp, phi)`` rows; ``flags_`` lists what the matcher reported.

    Parameters
    ----------
    chirp_rates : sequence of float
        Signed rate of each pulse in Hz/s, e.g. ``(3000, -3000, 6000, -6000)``.
    fs : float
        Sampling rate in Hz.
    tau_max, f_max : float
        Delay (s) and Doppler (Hz) bounds of the scene.
    K : int, optional
        Number of targets; estimated from the singular-value gap when omitted.
    sigma2 : float, optional
        Per-sample noise variance.  ``0`` (default) selects the noiseless
        matcher unless ``mode`` says otherwise.
    denoise : bool
        Run AST on every pulse first.
    mode : {"auto", "noiseless", "noisy"}
    robust : bool
        Let the noisy matcher leave one inconsistent pulse out per target.
    """

    def __init__(self, chirp_rates=(3000.0, -3000.0, 6000.0, -6000.0), fs: float = 440.0, tau_max: float = 0.01,
                 f_max: float = 100.0, K: int | None = None, sigma2: float = 0.0, denoise: bool = False,
                 mode: str = "auto", robust: bool = True):
        self.chirp_rates = chirp_rates
        self.fs = fs
        self.tau_max = tau_max
        self.f_max = f_max
        self.K = K
        self.sigma2 = sigma2
        self.denoise = denoise
        self.mode = mode
        self.robust = robust

    def fit(self, X, y=None):
        schedule = check_schedule(self.chirp_rates)
        check_positive(self.fs, "fs")
        check_positive(self.tau_max, "tau_max")
        check_positive(self.f_max, "f_max")
        check_positive(self.K, "K", integer=True, allow_none=True)
        check_positive(self.sigma2, "sigma2", strict=False)
        check_choice(self.mode, "mode", ("auto", "noiseless", "noisy"))
        X = check_samples(X, 2)
        if X.shape[0] != schedule.M:
            raise ValidationError(f"{X.shape[0]} pulses for {schedule.M} chirp rates", "M")
        pulses = _pulses(X, 1.0 / self.fs, float(self.sigma2))
        opts = IdentifyOptions(denoise=bool(self.denoise), mode=self.mode, robust=bool(self.robust))
        self.result_ = identify(pulses, schedule, self.tau_max, self.f_max, self.K, opts)
        self.flags_ = [f.kind for f in self.result_.flags]
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X=None):
        """Triplet table of the fitted train (``X``, when given, is fit first)."""
        if X is not None:
            self.fit(X)
        check_is_fitted(self, "result_")
        tau, f, phi, amp = self.result_.arrays()
        return np.column_stack([tau, f, amp, phi]) if len(tau) else np.zeros((0, 4))

    def fit_predict(self, X, y=None):
        return self.fit(X).predict()

    @property
    def resolved_(self) -> bool:
        check_is_fitted(self, "result_")
        return self.result_.resolved
