"""Turn unordered per-pulse tone estimates into (delay, Doppler, amplitude) triplets.

Layout conventions used throughout:

* ``beta = [f_1..f_K, tau_1..tau_K]``.
* An *assignment* is an integer array of shape ``(M, K)``; ``assignment[m, k]``
  is the index, inside pulse ``m``'s estimate set, of the component produced
  by output target ``k``.  Row 0 is the identity when pulse 0 is the reference.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import (ChirpProfile, ChirpSchedule, Scene, TargetParams, ValidationError,
                    beat_frequency, beat_phase, chirp_rate_bound, wrap_cycles)
from .specest import SinusoidEstimateSet

# exhaustive search limits
MAX_EXHAUSTIVE_ASSIGNMENTS = 20000
MAX_CONFLICT_GROUP = 4
# cost of leaving one pulse out of a target's fit: chi-square(1) 99.9% point
ROBUST_DROP_PENALTY = 10.83


# --- data types ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ConstraintSystem:
    """Stacked frequency constraints ``A beta = P nu``."""

    B: np.ndarray
    A: np.ndarray
    nu_stack: np.ndarray
    chirps: ChirpSchedule
    K: int
    underdetermined: bool

    @property
    def M(self) -> int:
        return self.B.shape[0]

    def nu_matrix(self) -> np.ndarray:
        """Estimated frequencies as an ``(M, K)`` array in per-pulse order."""
        return self.nu_stack.reshape(self.M, self.K)


@dataclass(frozen=True)
class Hypothesis:
    """Candidate pairing of component ``k`` (first pulse) with ``l`` (second pulse)."""

    k: int
    l: int
    tau_h: float
    f_h: float
    phase_ok: bool | None = None
    phase_residual: float = float("nan")


@dataclass(frozen=True)
class Flag:
    """Diagnostic attached to a match.

    ``kind`` is one of ``"ambiguous"`` (several explanations fit; counts as
    unresolved), ``"unresolved"`` (two targets closer than the tolerance band
    on every pulse), ``"incomplete"`` (fewer than K targets explained),
    ``"out_of_band"`` (best assignment lies outside the tolerance bands) and
    ``"nonconvergence"`` (a denoising solve hit its iteration cap).
    """

    kind: str
    detail: str = ""
    members: tuple = ()

    def to_dict(self) -> dict:
        return {"kind": self.kind, "detail": self.detail, "members": [list(m) if isinstance(m, tuple)
                                                                     else m for m in self.members]}


UNRESOLVED_KINDS = ("ambiguous", "unresolved", "incomplete")


@dataclass(frozen=True, eq=False)
class MatchResult:
    triplets: tuple[TargetParams, ...]
    residual: float
    flags: tuple[Flag, ...] = ()
    pulses_used: int = 0
    assignment: np.ndarray | None = field(default=None, repr=False)

    @property
    def K(self) -> int:
        return len(self.triplets)

    @property
    def ambiguity_flags(self) -> tuple[Flag, ...]:
        return tuple(f for f in self.flags if f.kind in UNRESOLVED_KINDS)

    @property
    def resolved(self) -> bool:
        return not self.ambiguity_flags

    def arrays(self):
        """``(tau, f, phi, amp)`` as float arrays."""
        t = self.triplets
        return (np.array([x.tau for x in t]), np.array([x.f for x in t]),
                np.array([x.phi for x in t]), np.array([x.amp for x in t]))

    def with_flags(self, extra) -> "MatchResult":
        return MatchResult(self.triplets, self.residual, self.flags + tuple(extra),
                           self.pulses_used, self.assignment)

    def to_dict(self) -> dict:
        tau, f, phi, amp = self.arrays()
        return {"tau": tau.tolist(), "f": f.tolist(), "phi": phi.tolist(), "amp": amp.tolist(),
                "residual": float(self.residual), "flags": [fl.to_dict() for fl in self.flags]}

    @classmethod
    def from_dict(cls, d: dict) -> "MatchResult":
        trip = tuple(TargetParams(float(a), float(b), float(d_), float(c))
                     for a, b, c, d_ in zip(d["tau"], d["f"], d["phi"], d["amp"]))
        flags = tuple(Flag(x["kind"], x.get("detail", ""),
                           tuple(tuple(m) if isinstance(m, list) else m for m in x.get("members", [])))
                      for x in d.get("flags", []))
        return cls(trip, float(d["residual"]), flags)


# --- constraint system --------------------------------------------------------------

def constraint_matrix_B(chirps: ChirpSchedule) -> np.ndarray:
    return np.column_stack([np.ones(chirps.M), -2.0 * chirps.rates])


def build_constraints(chirps: ChirpSchedule, estimates) -> ConstraintSystem:
    """Stack the per-pulse constraints ``[1, -2 fc^m] (x) I_K``.

    Raises
    ------
    ValidationError
        When the pulses disagree on ``K`` or the counts of chirps and
        estimate sets differ.
    """
    estimates = list(estimates)
    if len(estimates) != chirps.M:
        raise ValidationError(f"{len(estimates)} estimate sets for {chirps.M} chirps", "M")
    Ks = {e.K for e in estimates}
    if len(Ks) != 1:
        raise ValidationError(f"pulses disagree on K: {sorted(Ks)}", "K")
    K = Ks.pop()
    B = constraint_matrix_B(chirps)
    A = np.kron(B, np.eye(K))
    nu = np.concatenate([e.nu for e in estimates]) if K else np.zeros(0)
    under = chirps.M < 2 or np.linalg.matrix_rank(B) < 2
    return ConstraintSystem(B, A, nu, chirps, K, bool(under))


def gram_matrix(chirps: ChirpSchedule) -> np.ndarray:
    B = constraint_matrix_B(chirps)
    return B.T @ B


def _fit_operator(B: np.ndarray):
    """Pseudoinverse of ``B`` (2 x M); diagonal Gram shortcut when columns are orthogonal."""
    if np.linalg.matrix_rank(B) < 2:
        raise ValidationError("all chirp rates are equal; delay and Doppler are not separable", "fc")
    G = B.T @ B
    if G[0, 1] == 0.0:
        return B.T / np.diag(G)[:, None]
    return np.linalg.solve(G, B.T)


def ls_fit_parameters(system: ConstraintSystem, assignment) -> tuple[np.ndarray, float]:
    """Least-squares ``beta`` for a fixed assignment, and the residual norm ``||A beta - P nu||``."""
    assignment = np.asarray(assignment, dtype=int)
    M, K = system.M, system.K
    if assignment.shape != (M, K):
        raise ValidationError(f"assignment shape {assignment.shape}, expected {(M, K)}", "assignment")
    pinv = _fit_operator(system.B)
    V = np.take_along_axis(system.nu_matrix(), assignment, axis=1)   # (M, K): pulse m, target k
    coef = pinv @ V                                                    # (2, K): rows f, tau
    beta = np.concatenate([coef[0], coef[1]])
    resid = system.B @ coef - V
    return beta, float(np.linalg.norm(resid))


# --- pairwise hypotheses --------------------------------------------------------------

def candidate_intersections(est1: SinusoidEstimateSet, est2: SinusoidEstimateSet, fc1: float,
                            tau_max: float, f_max: float, tol_tau: float = 0.0,
                            tol_f: float = 0.0) -> list[Hypothesis]:
    """All feasible ``(k, l)`` intersections of a ``(+fc1, -fc1)`` pulse pair.

    A hypothesis survives when ``-tol_tau <= tau_h <= tau_max + tol_tau`` and
    ``|f_h| < f_max + tol_f`` (a tiny absolute slack absorbs rounding).
    """
    if fc1 == 0:
        raise ValueError("fc1 must be nonzero")
    nu1, nu2 = est1.nu, est2.nu
    tau_h = (nu1[:, None] - nu2[None, :]) / (-4.0 * fc1)
    f_h = (nu1[:, None] + nu2[None, :]) / 2.0
    eps_t = max(tol_tau, 1e-12 * max(tau_max, 1e-300))
    eps_f = max(tol_f, 1e-12 * max(f_max, 1.0))
    ok = (tau_h >= -eps_t) & (tau_h <= tau_max + eps_t) & (np.abs(f_h) < f_max + eps_f)
    return [Hypothesis(int(k), int(l), float(tau_h[k, l]), float(f_h[k, l]))
            for k, l in zip(*np.nonzero(ok))]


def expected_phase_difference(tau: float, chirp1: ChirpProfile, chirp2: ChirpProfile) -> float:
    """Model value of ``psi1 - psi2`` (cycles, unwrapped) for delay ``tau``."""
    return (chirp1.fc - chirp2.fc) * tau**2 - (chirp1.f0 - chirp2.f0) * tau


def phase_match_check(h: Hypothesis, psi1: float, psi2: float, fc1: float,
                      tol_cycles: float = 1e-6, f0_diff: float = 0.0) -> tuple[bool, float]:
    """Test ``tau_h**2 == (psi1 - psi2) / (2 fc1)`` on the nearest phase branch.

    Returns ``(passed, residual)`` with the residual in units of ``tau**2``
    (s^2); it passes when ``|residual| <= tol_cycles / (2|fc1|)``.
    ``f0_diff`` is ``f0_1 - f0_2`` for pulses with different chirp offsets.
    """
    if fc1 == 0:
        raise ValueError("fc1 must be nonzero")
    predicted = 2.0 * fc1 * h.tau_h**2 - f0_diff * h.tau_h
    gap = float(wrap_cycles(psi1 - psi2 - predicted))
    resid = -gap / (2.0 * fc1)
    return abs(gap) <= tol_cycles, resid


def with_phase_tests(hyps, est1: SinusoidEstimateSet, est2: SinusoidEstimateSet, chirp1: ChirpProfile,
                     chirp2: ChirpProfile, tol_cycles: float) -> list[Hypothesis]:
    out = []
    for h in hyps:
        ok, r = phase_match_check(h, est1.psi[h.k], est2.psi[h.l], chirp1.fc, tol_cycles,
                                  chirp1.f0 - chirp2.f0)
        out.append(Hypothesis(h.k, h.l, h.tau_h, h.f_h, ok, r))
    return out


def enumerate_complete_matchings(hyps, K: int, limit: int | None = None) -> list[tuple[Hypothesis, ...]]:
    """All sets of ``K`` hypotheses using every component of both pulses exactly once."""
    by_k: dict[int, list[Hypothesis]] = {}
    for h in hyps:
        by_k.setdefault(h.k, []).append(h)
    out: list[tuple[Hypothesis, ...]] = []

    def rec(k, used, acc):
        if limit is not None and len(out) >= limit:
            return
        if k == K:
            out.append(tuple(acc))
            return
        for h in by_k.get(k, ()):
            if h.l not in used:
                used.add(h.l)
                acc.append(h)
                rec(k + 1, used, acc)
                acc.pop()
                used.discard(h.l)

    rec(0, set(), [])
    return out


def count_complete_matchings(hyps, K: int) -> int:
    return len(enumerate_complete_matchings(hyps, K))


# --- noiseless matching ------------------------------------------------------------------

def _eliminate(edges: set[tuple[int, int]], accepted: dict[int, int]) -> set[tuple[int, int]]:
    """Accept forced pairings (a component with a single candidate) until nothing changes."""
    edges = set(edges)
    changed = True
    while changed:
        changed = False
        ks: dict[int, list] = {}
        ls: dict[int, list] = {}
        for k, l in edges:
            ks.setdefault(k, []).append(l)
            ls.setdefault(l, []).append(k)
        forced = [(k, v[0]) for k, v in ks.items() if len(v) == 1]
        forced += [(v[0], l) for l, v in ls.items() if len(v) == 1]
        for k, l in forced:
            if (k, l) not in edges:
                continue
            accepted[k] = l
            edges = {(a, b) for a, b in edges if a != k and b != l}
            changed = True
            break
    return edges


def _near(point, hyps, tol_tau: float, tol_f: float):
    """Hypothesis in ``hyps`` closest to ``point`` within the tolerances, or ``None``."""
    best, best_d = None, np.inf
    for h in hyps:
        dt, df = abs(h.tau_h - point[0]), abs(h.f_h - point[1])
        if dt <= tol_tau and df <= tol_f:
            d = dt / max(tol_tau, 1e-300) + df / max(tol_f, 1e-300)
            if d < best_d:
                best, best_d = h, d
    return best


def _assign_points(points, hyps, tol_tau: float, tol_f: float, amps=None, amp_a=None, amp_b=None):
    """One hypothesis per point (greedy by normalized distance), no component used twice.

    When ``amps`` (magnitude per point) and the pair's per-component
    magnitudes are given, magnitude disagreement breaks ties between
    hypotheses at the same location.  Points with no admissible hypothesis
    get ``None``.
    """
    if not points or not hyps:
        return [None] * len(points)
    big = 1e12
    cost = np.full((len(points), len(hyps)), big)
    for i, (t, f) in enumerate(points):
        for j, h in enumerate(hyps):
            dt, df = abs(h.tau_h - t), abs(h.f_h - f)
            if dt <= tol_tau and df <= tol_f:
                cost[i, j] = dt / max(tol_tau, 1e-300) + df / max(tol_f, 1e-300) + abs(h.phase_residual or 0.0)
                if amps is not None:
                    cost[i, j] += 1e-3 * (abs(amp_a[h.k] - amps[i]) + abs(amp_b[h.l] - amps[i]))
    out: list = [None] * len(points)
    used_k: set = set()
    used_l: set = set()
    # cheapest first; a pick may not reuse a point or a component
    order = np.argsort(cost, axis=None, kind="stable")
    for flat in order:
        i, j = divmod(int(flat), len(hyps))
        h = hyps[j]
        if cost[i, j] >= big:
            break
        if out[i] is None and h.k not in used_k and h.l not in used_l:
            out[i] = h
            used_k.add(h.k)
            used_l.add(h.l)
    return out


def _conflict_groups(edges):
    """Connected components of the bipartite conflict graph, as edge lists."""
    edges = list(edges)
    parent = {}

    def find(x):
        parent.setdefault(x, x)
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for k, l in edges:
        parent[find(("k", k))] = find(("l", l))
    groups: dict = {}
    for e in edges:
        groups.setdefault(find(("k", e[0])), []).append(e)
    return list(groups.values())


def match_noiseless(estimates, chirps: ChirpSchedule, tau_max: float, f_max: float,
                    phase_tol: float = 1e-6, point_tol: float = 1e-6) -> MatchResult:
    """Pair components across sign-paired pulses using phases and extra chirp pairs.

    The first sign pair proposes hypotheses; each must pass the phase test.
    Components with a single surviving partner are accepted and removed
    (greedy elimination).  Conflicts left over are pruned by asking every
    other sign pair for a hypothesis at the same ``(tau, f)`` point
    (``point_tol`` is relative to ``tau_max`` and ``f_max``), then by
    exhaustive search over conflict groups of at most four targets.
    Anything still undecided is flagged and left out of the result.
    """
    estimates = list(estimates)
    system = build_constraints(chirps, estimates)
    K = system.K
    pairs = chirps.pairs()
    if not pairs:
        raise ValidationError("noiseless matching needs at least one (+fc, -fc) pulse pair", "fc")
    tol_tau = point_tol * tau_max if tau_max > 0 else point_tol
    tol_f = point_tol * max(f_max, 1.0)

    pair_hyps = []
    for a, b in pairs:
        hy = candidate_intersections(estimates[a], estimates[b], chirps[a].fc, tau_max, f_max)
        hy = with_phase_tests(hy, estimates[a], estimates[b], chirps[a], chirps[b], phase_tol)
        pair_hyps.append([h for h in hy if h.phase_ok])

    # the pair with the fewest conflicts after elimination proposes the targets
    trials = []
    for hy in pair_hyps:
        acc: dict[int, int] = {}
        rest = _eliminate({(h.k, h.l) for h in hy}, acc)
        trials.append((len(rest), acc, rest))
    ib = min(range(len(pairs)), key=lambda i: trials[i][0])
    _, accepted, edges = trials[ib]
    lookup = {(h.k, h.l): h for h in pair_hyps[ib]}
    others = [i for i in range(len(pairs)) if i != ib]

    if edges and others:
        supported = {e for e in edges
                     if all(_near((lookup[e].tau_h, lookup[e].f_h), pair_hyps[i], tol_tau, tol_f) is not None
                            for i in others)}
        edges = _eliminate(supported, accepted)

    flags = []
    for group in _conflict_groups(edges):
        ks = sorted({k for k, _ in group})
        ls = sorted({l for _, l in group})
        choice = None
        if len(ks) == len(ls) and len(ks) <= MAX_CONFLICT_GROUP:
            remap = {k: i for i, k in enumerate(ks)}
            sub = [Hypothesis(remap[k], l, lookup[(k, l)].tau_h, lookup[(k, l)].f_h) for k, l in group]
            full = enumerate_complete_matchings(sub, len(ks))
            if len(full) == 1:
                choice = [(ks[h.k], h.l) for h in full[0]]
        if choice is None:
            flags.append(Flag("ambiguous", f"{len(group)} competing pairings after {len(pairs)} pulse pairs",
                              tuple((int(k), int(l), lookup[(k, l)].tau_h, lookup[(k, l)].f_h)
                                    for k, l in sorted(group))))
        else:
            accepted.update(dict(choice))

    # carry every accepted target through all pulses
    a0, b0 = pairs[ib]
    keys = sorted(accepted)
    rows = {k: {a0: k, b0: accepted[k]} for k in keys}
    points = [(lookup[(k, accepted[k])].tau_h, lookup[(k, accepted[k])].f_h) for k in keys]
    amps = [(estimates[a0].amp[k] + estimates[b0].amp[accepted[k]]) / 2 for k in keys]
    for i in others:
        a, b = pairs[i]
        picks = _assign_points(points, pair_hyps[i], tol_tau, tol_f, amps, estimates[a].amp, estimates[b].amp)
        for k, h in zip(keys, picks):
            if h is not None:
                rows[k][a], rows[k][b] = h.k, h.l

    used = [m for m in range(chirps.M) if all(m in r for r in rows.values())]
    if len(rows) < K:
        flags.append(Flag("incomplete", f"{len(rows)} of {K} targets explained"))
    if not rows:
        return MatchResult((), float("nan"), tuple(flags), len(used))
    sub_chirps = ChirpSchedule(tuple(chirps[m] for m in used))
    sub_est = [estimates[m] for m in used]
    assign = np.array([[rows[k][m] for k in sorted(rows)] for m in used], dtype=int)
    return _finish(sub_est, sub_chirps, assign, flags)


def _finish(estimates, chirps: ChirpSchedule, assignment, flags, mask=None, sigma=None) -> MatchResult:
    """LS-fit ``(tau, f)`` and recover phase/amplitude for a fixed assignment.

    ``mask[m, k]`` false leaves pulse ``m`` out of target ``k``'s fit; the
    fit is then weighted by ``1/sigma`` per pulse.
    """
    Kt = assignment.shape[1]
    nu = np.stack([e.nu[assignment[m]] for m, e in enumerate(estimates)])
    B = constraint_matrix_B(chirps)
    if mask is None or mask.all():
        system = ConstraintSystem(B, np.kron(B, np.eye(Kt)), nu.ravel(), chirps, Kt, False)
        beta, resid = ls_fit_parameters(system, np.tile(np.arange(Kt), (chirps.M, 1)))
        rows = [np.arange(chirps.M)] * Kt
    else:
        w = 1.0 / np.asarray(sigma, dtype=float)
        beta = np.empty(2 * Kt)
        sq = 0.0
        rows = []
        for k in range(Kt):
            r = np.flatnonzero(mask[:, k])
            coef = np.linalg.lstsq(B[r] * w[r, None], nu[r, k] * w[r], rcond=None)[0]
            beta[k], beta[Kt + k] = coef
            sq += float(np.sum((B[r] @ coef - nu[r, k]) ** 2))
            rows.append(r)
        resid = float(np.sqrt(sq))
    triplets = []
    for k in range(Kt):
        tau, f = beta[Kt + k], beta[k]
        r = rows[k]
        sub = ChirpSchedule(tuple(chirps[m] for m in r)) if len(r) < chirps.M else chirps
        psi = [estimates[m].psi[assignment[m, k]] for m in r]
        amp = [estimates[m].amp[assignment[m, k]] for m in r]
        phi, a = recover_phase_amplitude(tau, psi, amp, sub)
        triplets.append(TargetParams(float(tau), float(f), float(a), float(phi)))
    return MatchResult(tuple(triplets), resid, tuple(flags), chirps.M, np.asarray(assignment))


# --- phase and amplitude -------------------------------------------------------------

def _circular_mean(cycles, weights=None) -> float:
    z = np.exp(2j * np.pi * np.asarray(cycles, dtype=float))
    if weights is not None:
        z = z * np.asarray(weights)
    return float(np.angle(z.sum()) / (2 * np.pi)) % 1.0


def recover_phase_amplitude(tau: float, psi, amp, chirps: ChirpSchedule) -> tuple[float, float]:
    """Target phase (cycles, in [0, 1)) and magnitude from matched per-pulse estimates.

    Each sign pair gives ``(psi_a + psi_b) / 2`` modulo one half; the half
    cycle is settled by the single-pulse prediction ``psi_a - fc_a tau^2 +
    f0_a tau`` (offset terms cancel in the pair sum only when ``f0`` is equal
    on both pulses; otherwise their mean is removed explicitly).  Pairs are
    combined by circular mean.  Pulses outside any sign pair contribute via
    the single-pulse prediction.  The magnitude is the mean of ``amp``.
    """
    psi = np.asarray(psi, dtype=float)
    amp = np.asarray(amp, dtype=float)
    rates = chirps.rates
    f0 = np.array([c.f0 for c in chirps])
    single = (psi - rates * tau**2 + f0 * tau) % 1.0
    ests = []
    paired = set()
    for a, b in chirps.pairs():
        half = ((psi[a] + psi[b] + (f0[a] + f0[b]) * tau) / 2.0) % 1.0
        guide = _circular_mean(single[[a, b]])
        branch = half if abs(wrap_cycles(half - guide)) <= 0.25 else (half + 0.5) % 1.0
        ests += [branch, branch]
        paired.update((a, b))
    ests += [single[m] for m in range(len(psi)) if m not in paired]
    phi = _circular_mean(ests) if ests else 0.0
    if abs(phi - 1.0) < 1e-15:
        phi = 0.0
    return phi, float(np.mean(amp)) if len(amp) else 0.0


# --- noisy matching ---------------------------------------------------------------

def _exhaustive(nu, B, sigma, drop_penalty: float | None = None, box=None):
    """Score every assignment by its noise-weighted stacked residual.

    With ``drop_penalty`` set, each target may instead leave out one pulse
    at that fixed cost (when the remaining rates still separate delay and
    Doppler).  ``box = (tau_max, f_max)`` adds the squared distance, in
    standard deviations of the fitted parameters, by which a target falls
    outside ``[0, tau_max] x [-f_max, f_max]``.  Returns
    ``(score, assignments, order, per_target_cost, dropped)`` where
    ``dropped[n, k]`` is the left-out pulse or ``-1``.
    """
    M, K = nu.shape
    perms = np.array(list(itertools.permutations(range(K))), dtype=int)
    combos = np.array(list(itertools.product(range(len(perms)), repeat=M - 1)), dtype=int)
    n = len(combos)
    assign = np.empty((n, M, K), dtype=int)
    assign[:, 0, :] = np.arange(K)
    for m in range(1, M):
        assign[:, m, :] = perms[combos[:, m - 1]]
    V = np.take_along_axis(np.broadcast_to(nu[None], (n, M, K)), assign, axis=2) / sigma[None, :, None]
    Bw = B / sigma[:, None]

    def cost(rows):
        Bk = Bw[rows]
        Vk = V[:, rows, :]
        r2 = np.einsum("nmk,mj,njk->nk", Vk, _residual_projector(Bk), Vk)
        if box is None:
            return r2
        coef = np.einsum("jm,nmk->njk", np.linalg.pinv(Bk), Vk)       # (n, 2, K): f, tau
        sd = np.sqrt(np.diag(np.linalg.pinv(Bk.T @ Bk)))
        tau_out = np.clip(-coef[:, 1], 0, None) + np.clip(coef[:, 1] - box[0], 0, None)
        f_out = np.clip(np.abs(coef[:, 0]) - box[1], 0, None)
        return r2 + (tau_out / sd[1]) ** 2 + (f_out / sd[0]) ** 2

    r2 = cost(np.arange(M))
    dropped = -np.ones((n, K), dtype=int)
    if drop_penalty is not None and M >= 3:
        for m in range(M):
            keep = np.flatnonzero(np.arange(M) != m)
            if np.linalg.matrix_rank(Bw[keep]) < 2:
                continue
            r2m = cost(keep) + drop_penalty
            better = r2m < r2
            r2 = np.where(better, r2m, r2)
            dropped = np.where(better, m, dropped)
    score = r2.sum(axis=1)
    order = np.argsort(score, kind="stable")
    return score, assign, order, r2, dropped


def _residual_projector(Bw):
    return np.eye(len(Bw)) - Bw @ np.linalg.pinv(Bw)


def _hungarian_assignment(nu, B, chirps: ChirpSchedule, sigma, tau_max, f_max, band):
    """Polynomial-time assignment for large ``K`` or ``M``.

    Pulse 0 components are the reference.  For the first sign pair, each
    ``(k, l)`` point is scored against the nearest point of the second sign
    pair; a minimum-cost matching fixes pulse 1.  Remaining pulses are added
    one at a time by minimum-cost matching against the current fit.
    """
    M, K = nu.shape
    pairs = chirps.pairs()
    assign = -np.ones((M, K), dtype=int)
    assign[0] = np.arange(K)
    a, b = pairs[0] if pairs and pairs[0][0] == 0 else (0, 1)
    fc = chirps.rates[a]
    tau_h = (nu[a][:, None] - nu[b][None, :]) / (-4.0 * fc)
    f_h = (nu[a][:, None] + nu[b][None, :]) / 2.0
    s_tau = band * np.hypot(sigma[a], sigma[b]) / (4 * abs(fc))
    s_f = band * np.hypot(sigma[a], sigma[b]) / 2
    cost = ((np.clip(-tau_h, 0, None) + np.clip(tau_h - tau_max, 0, None)) / max(s_tau, 1e-300)) ** 2
    cost += (np.clip(np.abs(f_h) - f_max, 0, None) / max(s_f, 1e-300)) ** 2
    if len(pairs) > 1:
        c, d = pairs[1]
        fc2 = chirps.rates[c]
        t2 = ((nu[c][:, None] - nu[d][None, :]) / (-4.0 * fc2)).ravel()
        g2 = ((nu[c][:, None] + nu[d][None, :]) / 2.0).ravel()
        s2t = band * np.hypot(sigma[c], sigma[d]) / (4 * abs(fc2))
        s2f = band * np.hypot(sigma[c], sigma[d]) / 2
        dist = (((tau_h[..., None] - t2) / max(np.hypot(s_tau, s2t), 1e-300)) ** 2
                + ((f_h[..., None] - g2) / max(np.hypot(s_f, s2f), 1e-300)) ** 2)
        cost = cost + dist.min(axis=-1)
    _, cols = linear_sum_assignment(cost)
    assign[b] = cols
    done = [a, b]
    for m in [m for m in range(M) if m not in done]:
        sub_B = B[done]
        if np.linalg.matrix_rank(sub_B) < 2:
            pred = np.tile(nu[done].mean(axis=0), 1)
        else:
            coef = np.linalg.lstsq(sub_B, np.stack([nu[q][assign[q]] for q in done]), rcond=None)[0]
            pred = B[m] @ coef
        cm = ((nu[m][None, :] - pred[:, None]) / sigma[m]) ** 2
        _, cols = linear_sum_assignment(cm)
        assign[m] = cols
        done.append(m)
    return assign


def match_noisy(estimates, chirps: ChirpSchedule, tau_max: float, f_max: float, sigma_nu,
                band: float = 3.0, robust: bool = False) -> MatchResult:
    """Minimum stacked-residual assignment across all pulses, phases unused.

    ``sigma_nu`` is the per-pulse frequency standard deviation in Hz (scalar
    or length-M).  Assignments are searched exhaustively when there are at
    most ``MAX_EXHAUSTIVE_ASSIGNMENTS`` of them, otherwise by sequential
    minimum-cost matching.

    ``robust=True`` lets each target leave out the one pulse whose estimate
    disagrees with the others (typically a pulse where two beat tones nearly
    coincide and the estimator merges them).  Leaving a pulse out costs
    ``ROBUST_DROP_PENALTY`` in the normalized residual, and the target is
    then fit on its remaining pulses.

    Flags
    -----
    ambiguous
        a different assignment also fits inside the tolerance band and moves
        some target by more than the band.
    unresolved
        two output targets lie within ``band`` standard deviations of each
        other on every pulse.
    out_of_band
        the best assignment itself fails the band test (reported, not fatal).
    pulse_dropped
        robust mode left pulses out; members are ``(target, pulse)`` (informational).
    """
    estimates = list(estimates)
    system = build_constraints(chirps, estimates)
    if system.underdetermined:
        raise ValidationError("noisy matching needs at least two distinct chirp rates", "fc")
    M, K = system.M, system.K
    sigma = np.broadcast_to(np.asarray(sigma_nu, dtype=float), (M,)).copy()
    nu = system.nu_matrix()
    scale = max(np.abs(nu).max(initial=0.0), f_max, 1.0)
    sigma = np.maximum(sigma, 1e-12 * scale)
    B = system.B
    dof = M - 2
    flags = []
    if K == 0:
        return MatchResult((), 0.0, (), M)

    n_assign = math.factorial(K) ** (M - 1)
    thresh = band**2 * max(dof, 1)          # per-target chi-square style cut
    if n_assign <= MAX_EXHAUSTIVE_ASSIGNMENTS:
        score, assigns, order, r2, dropped = _exhaustive(nu, B, sigma, ROBUST_DROP_PENALTY if robust else None,
                                                        (tau_max, f_max))
        best = assigns[order[0]]
        mask = np.ones((M, K), dtype=bool)
        for k, m in enumerate(dropped[order[0]]):
            if m >= 0:
                mask[m, k] = False
        drops = [(k, int(m)) for k, m in enumerate(dropped[order[0]]) if m >= 0]
        if drops:
            flags.append(Flag("pulse_dropped", "pulses left out of single-target fits", tuple(drops)))
        if dof > 0:
            own = r2[order[0]] - np.where(dropped[order[0]] >= 0, ROBUST_DROP_PENALTY, 0.0)
            if np.any(own > thresh):
                flags.append(Flag("out_of_band", "best assignment exceeds the tolerance band"))
            beta0 = _beta_for(nu, B, best, sigma, dropped[order[0]])
            tol = _beta_tolerance(chirps, sigma, band)
            for j in order[1:]:
                # only alternatives consistent on every pulse compete
                if np.any(r2[j] > thresh) or np.any(dropped[j] >= 0):
                    continue
                beta1 = _beta_for(nu, B, assigns[j], sigma, dropped[j])
                if _materially_different(beta0, beta1, K, tol):
                    flags.append(Flag("ambiguous", "another assignment fits within the tolerance band",
                                      tuple(map(tuple, assigns[j].tolist()))))
                    break
    else:
        best = _hungarian_assignment(nu, B, chirps, sigma, tau_max, f_max, band)
        mask = None

    res = _finish(estimates, chirps, best, flags, mask, sigma)
    # resolution check: two targets inseparable on every pulse
    nu_fit = np.stack([e.nu[best[m]] for m, e in enumerate(estimates)])
    for i, j in itertools.combinations(range(K), 2):
        if np.all(np.abs(nu_fit[:, i] - nu_fit[:, j]) <= band * sigma):
            res = res.with_flags([Flag("unresolved", "targets closer than the tolerance band on every pulse",
                                       ((i, j),))])
    return res


def _beta_for(nu, B, assign, sigma=None, dropped=None):
    """``(2, K)`` fit for one assignment, honoring per-target dropped pulses."""
    V = np.take_along_axis(nu, assign, axis=1)
    if dropped is None or np.all(dropped < 0):
        return _fit_operator(B) @ V
    w = 1.0 / sigma if sigma is not None else np.ones(len(B))
    out = np.empty((2, V.shape[1]))
    for k in range(V.shape[1]):
        keep = np.arange(len(B)) != dropped[k]
        out[:, k] = np.linalg.lstsq(B[keep] * w[keep, None], V[keep, k] * w[keep], rcond=None)[0]
    return out


def _beta_tolerance(chirps, sigma, band):
    B = constraint_matrix_B(chirps)
    cov = np.linalg.pinv(B.T @ np.diag(1 / sigma**2) @ B)
    return band * np.sqrt(np.diag(cov))


def _materially_different(beta0, beta1, K, tol) -> bool:
    """Do the two fitted target sets differ beyond ``tol`` as unordered sets?"""
    p0 = beta0.T
    p1 = beta1.T
    cost = np.abs((p0[:, None, :] - p1[None, :, :]) / np.maximum(tol, 1e-300)).max(axis=2)
    r, c = linear_sum_assignment(cost)
    return bool(cost[r, c].max() > 1.0)


# --- adaptive chirp selection ---------------------------------------------------------

def hypothesis_slopes(points) -> np.ndarray:
    """Chirp rate that maps each pair of ``(tau, f)`` points onto one beat frequency.

    Two points share a beat tone under rate ``fc`` iff ``df = 2 fc dtau``, so
    the slope is ``df / (2 dtau)`` (same units as a chirp rate).  Pairs with
    equal delays give ``inf`` and are skipped.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    out = []
    for (t1, f1), (t2, f2) in itertools.combinations(pts, 2):
        if t1 != t2:
            out.append((f2 - f1) / (2.0 * (t2 - t1)))
    return np.asarray(out)


def next_chirp_rate(slopes, history, tau_max: float, n_grid: int = 256,
                    max_rate: float | None = None) -> float:
    """Admissible positive rate farthest (minimum distance) from every conflict slope.

    Candidates are the grid ``bound * i / n_grid`` for ``i = 1..n_grid`` with
    ``bound = 1 / tau_max**2``, lowered to ``max_rate`` when given (e.g. the
    Nyquist limit of the receiver).  A sign-paired continuation sends ``+fc``
    and ``-fc``, so distances are taken against ``|slope|``.  Rates already
    in ``history`` are excluded.  With no slopes, or when every grid point
    ties, the last rate is doubled (capped at the bound).
    """
    bound = chirp_rate_bound(tau_max)
    if max_rate is not None:
        bound = min(bound, float(max_rate))
    hist = np.abs(np.asarray(list(history), dtype=float))
    grid = bound * np.arange(1, n_grid + 1) / n_grid
    if hist.size:
        grid = grid[~np.isclose(grid[:, None], hist[None, :], rtol=1e-12, atol=0).any(axis=1)]
    last = hist[-1] if hist.size else bound / 4
    fallback = float(min(2.0 * last, bound))
    if hist.size and np.isclose(fallback, hist, rtol=1e-12, atol=0).any():
        # doubling would repeat a used rate: take the largest unused grid rate
        fallback = float(grid[-1]) if grid.size else fallback
    slopes = np.abs(np.asarray(slopes, dtype=float))
    slopes = slopes[np.isfinite(slopes)]
    if slopes.size == 0 or grid.size == 0:
        return fallback
    dist = np.abs(grid[:, None] - slopes[None, :]).min(axis=1)
    if np.ptp(dist) == 0:
        return fallback
    return float(grid[int(np.argmax(dist))])


# --- helpers -----------------------------------------------------------------------

def estimates_from_scene(scene: Scene, chirps: ChirpSchedule) -> list[SinusoidEstimateSet]:
    """Exact per-pulse ``(nu, psi, amp)`` implied by a scene (noise-free oracle)."""
    out = []
    for c in chirps:
        nu = [beat_frequency(t, c) for t in scene.targets]
        psi = [beat_phase(t, c) for t in scene.targets]
        amp = [t.amp for t in scene.targets]
        out.append(SinusoidEstimateSet.from_arrays(nu, psi, amp, c.m))
    return out


def associate(true_scene: Scene, result: MatchResult) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost pairing of true and estimated targets on normalized ``(tau, f)``.

    Returns ``(true_idx, est_idx)``; unmatched targets on either side are dropped.
    """
    if not true_scene.targets or not result.triplets:
        return np.zeros(0, int), np.zeros(0, int)
    tt = np.array([[t.tau, t.f] for t in true_scene.targets])
    ee = np.array([[t.tau, t.f] for t in result.triplets])
    norm = np.array([max(true_scene.tau_max, 1e-300), max(true_scene.f_max, 1e-300)])
    d = np.linalg.norm((tt[:, None, :] - ee[None, :, :]) / norm, axis=2)
    r, c = linear_sum_assignment(d)
    return r, c


__all__ = [
    "ConstraintSystem", "Hypothesis", "Flag", "MatchResult", "UNRESOLVED_KINDS",
    "build_constraints", "constraint_matrix_B", "gram_matrix", "ls_fit_parameters",
    "candidate_intersections", "phase_match_check", "with_phase_tests", "expected_phase_difference",
    "enumerate_complete_matchings", "count_complete_matchings", "match_noiseless", "match_noisy",
    "recover_phase_amplitude", "hypothesis_slopes", "next_chirp_rate", "estimates_from_scene",
    "associate", "MAX_EXHAUSTIVE_ASSIGNMENTS", "MAX_CONFLICT_GROUP", "ROBUST_DROP_PENALTY",
]
