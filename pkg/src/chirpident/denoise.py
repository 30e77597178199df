"""Atomic-norm soft thresholding (AST) of one pulse of samples.

Solves

    min_{t,u,x}  1/2 ||x - y||^2 + eta/2 (t + u_1)
    s.t.         [[T(u), x], [x^H, t]]  is positive semidefinite

with ADMM, splitting the PSD constraint onto a separate matrix variable.
``T(u)`` is the Hermitian Toeplitz matrix with first row ``u``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .synth import PulseSamples


@dataclass(frozen=True)
class ASTConfig:
    eta: float
    rho: float = 2.0
    max_iters: int = 5000
    tol: float = 1e-6

    def __post_init__(self):
        if self.eta < 0 or self.rho <= 0 or self.tol <= 0:
            raise ValueError("need eta >= 0, rho > 0, tol > 0")


@dataclass(frozen=True, eq=False)
class ASTResult:
    denoised: np.ndarray
    toeplitz_gen: np.ndarray
    t_scalar: float
    objective_trace: np.ndarray = field(repr=False)
    converged: bool
    iterations: int = 0

    def block_matrix(self) -> np.ndarray:
        return block(self.t_scalar, self.toeplitz_gen, self.denoised)


def default_eta(sigma: float, N: int) -> float:
    if N < 2:
        raise ValueError("N must be at least 2")
    return sigma * np.sqrt(N * np.log(N))


def ast_mse_bound(sigma: float, N: int, amp_sum: float) -> float:
    """Asymptotic per-sample MSE bound ``sigma * sqrt(ln N / N) * sum|c_k|``."""
    return sigma * np.sqrt(np.log(N) / N) * amp_sum


def toeplitz_hermitian(u) -> np.ndarray:
    """``T(u)``: ``u[0]`` on the diagonal, ``u[k]`` on the k-th superdiagonal."""
    u = np.asarray(u, dtype=complex)
    N = len(u)
    i, j = np.indices((N, N))
    k = j - i
    return np.where(k >= 0, u[np.abs(k)], np.conj(u[np.abs(k)]))


def toeplitz_adjoint_mean(A) -> np.ndarray:
    """Least-squares Toeplitz generator of ``A`` (averages along diagonals).

    Entry ``k > 0`` averages the k-th superdiagonal with the conjugated k-th
    subdiagonal; entry 0 is the real mean of the diagonal.
    """
    return _ToeplitzOps(A.shape[0]).generator(A)


class _ToeplitzOps:
    """Index tables reused across ADMM iterations for one size ``N``."""

    def __init__(self, N: int):
        i, j = np.indices((N, N))
        self.N = N
        self.lag = np.abs(j - i).ravel()
        self.upper = (j >= i)
        self.count = np.bincount(self.lag, minlength=N).astype(float)

    def generator(self, A) -> np.ndarray:
        folded = np.where(self.upper, A, np.conj(A)).ravel()
        re = np.bincount(self.lag, weights=folded.real, minlength=self.N)
        im = np.bincount(self.lag, weights=folded.imag, minlength=self.N)
        u = (re + 1j * im) / self.count
        u[0] = u[0].real
        return u

    def matrix(self, u) -> np.ndarray:
        full = u[self.lag].reshape(self.N, self.N)
        return np.where(self.upper, full, np.conj(full))


def block(t, u, x) -> np.ndarray:
    N = len(x)
    B = np.empty((N + 1, N + 1), dtype=complex)
    B[:N, :N] = toeplitz_hermitian(u)
    B[:N, N] = x
    B[N, :N] = np.conj(x)
    B[N, N] = t
    return B


def psd_project(H, herm_tol: float = 1e-10) -> np.ndarray:
    """Nearest positive semidefinite matrix in Frobenius norm.

    Raises
    ------
    ValueError
        If ``H`` is not Hermitian within ``herm_tol`` (relative to its largest entry).
    """
    H = np.asarray(H)
    scale = max(1.0, np.abs(H).max(initial=0.0))
    if np.abs(H - H.conj().T).max(initial=0.0) > herm_tol * scale:
        raise ValueError("psd_project needs a Hermitian matrix")
    return _psd_part((H + H.conj().T) / 2)


def _psd_part(H) -> np.ndarray:
    # only the positive part is needed; iterates are low rank so a value-range solve is cheaper
    w, V = scipy.linalg.eigh(H, subset_by_value=(0.0, np.inf), driver="evr", check_finite=False)
    if w.size == 0:
        return np.zeros_like(H)
    return (V * w) @ V.conj().T


def _objective(y, x, t, u0, eta) -> float:
    return 0.5 * float(np.vdot(x - y, x - y).real) + 0.5 * eta * (t + u0)


_LIFT_GRID = np.logspace(-14, 0, 29)


def _feasible(x, u, y, eta, ops: _ToeplitzOps):
    """Cheapest feasible ``(t, u)`` near an ADMM iterate, keeping ``x``.

    ``T(u)`` is lifted by ``delta * I`` so it is positive definite and ``t``
    is set to the Schur-complement value ``x^H (T + delta I)^{-1} x``; the
    lift is picked from a log grid to minimize the objective.
    """
    w, V = np.linalg.eigh(ops.matrix(u))
    p2 = np.abs(V.conj().T @ x) ** 2
    base = max(0.0, -w[0])
    top = max(abs(w[-1]), float(np.vdot(x, x).real), 1e-300)
    deltas = base + top * _LIFT_GRID
    t = (p2[None, :] / (w[None, :] + deltas[:, None])).sum(axis=1)
    gap = np.asarray(x) - y
    obj = 0.5 * float(np.vdot(gap, gap).real) + 0.5 * eta * (t + u[0].real + deltas)
    i = int(np.argmin(obj))
    t, delta, obj = float(t[i]), float(deltas[i]), float(obj[i])
    u_f = np.array(u, dtype=complex)
    u_f[0] = u_f[0].real + delta
    return t, u_f, obj


# feasibility-probe cadence and residual-balancing schedule
_CHECK_EVERY = 25
_BALANCE_EVERY = 5
_BALANCE_MU = 1.5


def ast_denoise(samples, config: ASTConfig) -> ASTResult:
    """Denoise one pulse by atomic soft thresholding.

    ADMM on the split ``Theta(t, u, x) = Z`` with ``Z`` PSD.  The penalty
    starts at ``config.rho`` and is rebalanced (x2 or /2) every few
    iterations when one residual dominates the other.

    The returned point is the best feasible one found: ``(t, u)`` are lifted
    so the block matrix is PSD, and ``objective_trace[i]`` is the best
    feasible objective seen up to iteration ``i`` (so it never increases).
    ``eta = 0`` returns the input unchanged.
    """
    y = samples.samples if isinstance(samples, PulseSamples) else np.asarray(samples, complex)
    N = len(y)
    if N < 4:
        raise ValueError("AST needs at least 4 samples")
    if config.eta == 0:
        u = np.zeros(N, dtype=complex)
        u[0] = max(float(np.vdot(y, y).real), 1.0)
        return ASTResult(y.copy(), u, 1.0, np.zeros(0), True, 0)

    eta, rho = config.eta, config.rho
    ops = _ToeplitzOps(N)
    abs_tol = config.tol * (N + 1)
    Z = np.zeros((N + 1, N + 1), dtype=complex)
    Lam = np.zeros_like(Z)
    Theta = np.empty_like(Z)
    best = None
    trace = np.empty(config.max_iters)
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        # closed-form (t, u, x) step against W = Z - Lam/rho
        W = Z - Lam / rho
        t = W[N, N].real - eta / (2 * rho)
        x = (y + 2 * rho * W[:N, N]) / (1 + 2 * rho)
        u = ops.generator(W[:N, :N])
        u[0] -= eta / (2 * rho * N)
        Theta[:N, :N] = ops.matrix(u)
        Theta[:N, N] = x
        Theta[N, :N] = np.conj(x)
        Theta[N, N] = t

        Z_old = Z
        # Theta and Lam stay Hermitian and eigh reads one triangle only
        Z = _psd_part(Theta + Lam / rho)
        R = Theta - Z
        Lam += rho * R
        r_primal = np.linalg.norm(R)
        r_dual = rho * np.linalg.norm(Z - Z_old)

        if it < 10 or it % _CHECK_EVERY == 0:
            cand = _feasible(x, u, y, eta, ops)
            if best is None or cand[2] < best[3]:
                best = (x.copy(), cand[1], cand[0], cand[2])
        trace[it - 1] = best[3]
        eps_primal = abs_tol + config.tol * max(np.linalg.norm(Theta), np.linalg.norm(Z))
        eps_dual = abs_tol + config.tol * np.linalg.norm(Lam)
        if r_primal <= eps_primal and r_dual <= eps_dual:
            converged = True
            break
        if it % _BALANCE_EVERY == 0:
            if r_primal > _BALANCE_MU * r_dual:
                rho *= 2.0
            elif r_dual > _BALANCE_MU * r_primal:
                rho /= 2.0

    cand = _feasible(x, u, y, eta, ops)
    if cand[2] <= best[3]:
        best = (x.copy(), cand[1], cand[0], cand[2])
        trace[it - 1] = cand[2]
    return ASTResult(best[0], best[1], best[2], trace[:it].copy(), converged, it)


def denoise_pulse(samples: PulseSamples, sigma: float | None = None, config: ASTConfig | None = None,
                  K: int | None = None) -> PulseSamples:
    """AST-denoise a pulse; ``eta`` defaults to ``sigma*sqrt(N ln N)``.

    ``sigma`` falls back to ``sqrt(samples.sigma2)`` and then to a robust
    residual estimate (which needs ``K``).
    """
    if config is None:
        if sigma is None:
            if samples.sigma2 > 0:
                sigma = float(np.sqrt(samples.sigma2))
            elif K is not None:
                from .specest import estimate_sigma
                sigma = estimate_sigma(samples, K)
            else:
                sigma = 0.0
        config = ASTConfig(eta=default_eta(sigma, samples.N))
    res = ast_denoise(samples, config)
    return samples.with_samples(res.denoised)
