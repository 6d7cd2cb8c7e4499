"""Ciphertext-only attacks on randomly transformed QP streams.

The adversary sees, per step, the transformed QP ``(H~, G~, f~, e~)`` and the
optimizer ``y*`` it computed itself. Everything here works from that data
alone; ground truth appears only in tests and the harness metrics.

Two quantities survive any key:

    M = G~ H~^-1 G~'          (= G H^-1 G')
    v = G~ H~^-1 f~ + e~      (= G H^-1 f + e)

Constant ``M`` across steps hints at constant ``H, G``; constant ``v`` over a
set of steps hints at repeated ``f, e`` there. Guesses for ``H, G`` and the
keys ``R_k`` come from an SVD of ``M`` or, for MPC-shaped constraint
matrices ``[I; -I; *]``, directly from the top block of ``G~``. The affine
parts ``e, f, r`` are pinned down up to ``l`` degrees of freedom by linear
systems across steps; an anchor guess for one plaintext optimizer removes
the rest.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from .cipher import Ciphertext, Guess, check_consistency
from .numerics import EPS_RANK, solve_underdetermined, svd

log = logging.getLogger(__name__)

SPEC_TOL = 1e-6
STRUCTURE_TOL = 1e-8
MATCH_TOL = 1e-8


class AttackError(Exception):
    pass


class SingularHTilde(AttackError):
    pass


class RankDeficientInvariant(AttackError):
    pass


class StructureMismatch(AttackError):
    pass


class SingularRHat(AttackError):
    pass


class UnderdeterminedAfterAnchor(AttackError):
    pass


class AmbiguousMatching(AttackError):
    pass


@dataclass
class InvariantPair:
    M: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class SpecReport:
    spec1: bool
    spec3_sets: list[list[int]]
    period_estimate: int | None
    tolerance_used: float
    m_deviation: float = 0.0

    def to_dict(self):
        return {"spec1": self.spec1, "spec3_sets": self.spec3_sets,
                "period_estimate": self.period_estimate,
                "tolerance_used": self.tolerance_used, "m_deviation": self.m_deviation}


@dataclass
class ReconstructionResult:
    guesses: list[Guess]
    steps: list[int]
    e_fix_hat: np.ndarray | None
    anchor_used: np.ndarray
    rank_report: tuple[int, int]
    z_hat: list[np.ndarray] = field(default_factory=list)


@dataclass
class PermutationMap:
    """Recovered constraint permutations, keyed by step.

    ``delta[k]`` relates step ``k`` to the reference step (``None`` where the
    matching is ambiguous); ``absolute[k]`` is the full permutation ``P_k``.
    ``ambiguity_sets[k]`` lists groups of rows of step ``k`` that could not
    be told apart.
    """

    reference_step: int
    delta: dict[int, np.ndarray | None]
    absolute: dict[int, np.ndarray | None]
    ambiguity_sets: dict[int, list[list[int]]]

    @property
    def resolved(self) -> bool:
        return all(d is not None for d in self.delta.values())

    def to_dict(self):
        conv = lambda p: None if p is None else p.tolist()  # noqa: E731
        return {
            "reference_step": self.reference_step,
            "delta": {str(k): conv(p) for k, p in self.delta.items()},
            "absolute": {str(k): conv(p) for k, p in self.absolute.items()},
            "ambiguity_sets": {str(k): s for k, s in self.ambiguity_sets.items()},
        }


# ---------------------------------------------------------------------------
# invariants and specification indicators


def _chol(H: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(0.5 * (H + H.T))
    except np.linalg.LinAlgError as exc:
        raise SingularHTilde("transformed Hessian is not positive definite") from exc


def invariants(c: Ciphertext) -> InvariantPair:
    L = _chol(c.H)
    W = sla.solve_triangular(L, c.G.T, lower=True)
    M = W.T @ W
    v = W.T @ sla.solve_triangular(L, c.f, lower=True) + c.e
    return InvariantPair(0.5 * (M + M.T), v, c.step)


def _rel_dist(a: np.ndarray, b: np.ndarray) -> float:
    scale = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / scale) if scale > 0 else float(np.linalg.norm(a))


def cluster_constant(vectors: Sequence[np.ndarray], steps: Sequence[int], tol: float) -> list[list[int]]:
    """Greedy representative clustering.

    The first unassigned vector seeds a set; every later unassigned vector
    within relative distance ``tol`` of the seed joins it. Only sets with at
    least two members are returned.
    """
    assigned = [False] * len(vectors)
    sets = []
    for i, seed in enumerate(vectors):
        if assigned[i]:
            continue
        assigned[i] = True
        members = [steps[i]]
        for j in range(i + 1, len(vectors)):
            if not assigned[j] and _rel_dist(vectors[j], seed) <= tol:
                assigned[j] = True
                members.append(steps[j])
        if len(members) >= 2:
            sets.append(members)
    return sets


def estimate_period(vectors: Sequence[np.ndarray], tol: float) -> int | None:
    """Smallest shift ``d >= 2`` after which the sequence repeats.

    For each shift the mean relative distance ``|v_{k+d} - v_k|`` is taken
    over the trailing half of the overlap so a start-up transient does not
    mask the periodic regime. A sequence that already repeats at ``d = 1`` is
    stationary and has no period.
    """
    V = np.asarray(vectors)
    T = len(V)
    scale = max(np.linalg.norm(V, axis=1).mean(), np.finfo(float).tiny)

    def repeats(d):
        overlap = T - d
        if overlap < 2:
            return False
        start = overlap // 2
        dist = np.linalg.norm(V[start + d:] - V[start:overlap], axis=1) / scale
        return dist.mean() <= tol

    if T < 3 or repeats(1):
        return None
    for d in range(2, T - 1):
        if repeats(d):
            return d
    return None


def detect_specs(pairs: Sequence[InvariantPair], tol: float = SPEC_TOL,
                 period_tol: float | None = None) -> SpecReport:
    """Indicators for constant ``H, G`` (spec1) and repeated ``f, e`` (sets).

    These are necessary conditions only: passing them does not prove the
    plaintext has the structure.
    """
    if len(pairs) < 2:
        raise ValueError("need at least two invariant pairs")
    M0 = pairs[0].M
    dev = max(_rel_dist(p.M, M0) for p in pairs)
    steps = [p.step for p in pairs]
    vs = [p.v for p in pairs]
    return SpecReport(
        spec1=dev <= tol,
        spec3_sets=cluster_constant(vs, steps, tol),
        period_estimate=estimate_period(vs, tol if period_tol is None else period_tol),
        tolerance_used=tol,
        m_deviation=dev,
    )


# ---------------------------------------------------------------------------
# guesses for H, G and the keys


def _sign_normalize(U: np.ndarray) -> np.ndarray:
    # largest-magnitude entry positive; near-ties go to the lowest row index
    U = U.copy()
    for j in range(U.shape[1]):
        col = np.abs(U[:, j])
        i = int(np.flatnonzero(col >= (1.0 - 1e-9) * col.max())[0])
        if U[i, j] < 0:
            U[:, j] = -U[:, j]
    return U


def tied_spectrum(singular_values, l: int, rtol: float = 1e-8) -> bool:
    """True if two of the leading ``l`` singular values coincide."""
    s = np.asarray(singular_values[:l])
    gaps = np.abs(np.diff(s))
    return bool(np.any(gaps <= rtol * s[0]))


def _complete(c: Ciphertext, H_hat, G_hat, R_hat, provenance: str, **meta) -> Guess:
    # the particular solution f^ = R^-T f~, e^ = e~, r^ = 0 keeps the guess consistent
    try:
        f_hat = np.linalg.solve(R_hat.T, c.f)
    except np.linalg.LinAlgError as exc:
        raise SingularRHat("guessed key is singular") from exc
    return Guess(H_hat, G_hat, f_hat, c.e.copy(), R_hat, np.zeros(c.l), provenance, dict(meta))


def svd_guess(c: Ciphertext) -> Guess:
    """Consistent ``(H^, G^, R^)`` from the SVD of ``M``.

    ``H^ = diag(s_1..s_l)^-1``, ``G^`` = leading ``l`` left singular vectors,
    ``R^ = G^' G~``. When leading singular values coincide the singular
    subspace basis is not unique, so guesses from different steps may differ
    by a rotation; ``meta["tied"]`` records this.
    """
    l = c.l
    pair = invariants(c)
    res = svd(pair.M)
    if res.numeric_rank < l:
        raise RankDeficientInvariant(f"invariant has numeric rank {res.numeric_rank} < l={l}")
    U = _sign_normalize(res.U[:, :l])
    s = res.singular_values[:l]
    tied = tied_spectrum(s, l)
    if tied:
        log.info("step %d: tied singular values, svd guess basis is not unique", c.step)
    G_hat = U
    H_hat = np.diag(1.0 / s)
    R_hat = G_hat.T @ c.G
    return _complete(c, H_hat, G_hat, R_hat, "svd", tied=tied)


def structure_guess(c: Ciphertext, tol: float = STRUCTURE_TOL) -> Guess:
    """Read the key off an MPC-shaped ``G = [I; -I; *]``.

    Then ``G~ = [R; -R; *R]``, so the top block is the key itself.
    """
    l = c.l
    if c.q < 2 * l:
        raise StructureMismatch("fewer than 2l constraints")
    top, second = c.G[:l], c.G[l:2 * l]
    scale = max(1.0, np.abs(top).max())
    if np.abs(top + second).max() > tol * scale:
        raise StructureMismatch("second l-row block is not the negation of the first")
    R_hat = top.copy()
    if np.linalg.cond(R_hat) > 1e12:
        raise SingularRHat("top block of G~ is singular")
    G_hat = np.linalg.solve(R_hat.T, c.G.T).T
    G_hat[:l] = np.eye(l)
    G_hat[l:2 * l] = -np.eye(l)
    Rinv = np.linalg.inv(R_hat)
    H_hat = Rinv.T @ c.H @ Rinv
    return _complete(c, 0.5 * (H_hat + H_hat.T), G_hat, R_hat, "structure")


def guess_base(c: Ciphertext, method: str = "auto") -> Guess:
    """``structure`` / ``svd`` guess; ``auto`` tries structure first."""
    if method == "structure":
        return structure_guess(c)
    if method == "svd":
        return svd_guess(c)
    try:
        return structure_guess(c)
    except (StructureMismatch, SingularRHat):
        return svd_guess(c)


def align_guesses(ciphertexts: Sequence[Ciphertext], base: Guess) -> list[Guess]:
    """Per-step guesses that share ``H^_0, G^_0`` from ``base``.

    Under constant ``H, G`` the keys follow from ``G^_0`` and each ``G~_k``:
    ``R^_k = pinv(G^_0) G~_k``.
    """
    pinv = np.linalg.pinv(base.G)
    out = []
    for c in ciphertexts:
        R_hat = pinv @ c.G
        out.append(_complete(c, base.H.copy(), base.G.copy(), R_hat, base.provenance,
                             **base.meta))
    return out


# ---------------------------------------------------------------------------
# affine parts: e, f, r


def _solve_RT(R_hat, x):
    try:
        return np.linalg.solve(R_hat.T, x)
    except np.linalg.LinAlgError as exc:
        raise SingularRHat("guessed key is singular") from exc


@dataclass(frozen=True)
class UnknownLayout:
    """Column layout ``(e, f, r_1, ..., r_s)`` of the multi-instance system."""

    q: int
    l: int
    s: int

    @property
    def e(self) -> slice:
        return slice(0, self.q)

    @property
    def f(self) -> slice:
        return slice(self.q, self.q + self.l)

    def r(self, i: int) -> slice:
        start = self.q + self.l * (1 + i)
        return slice(start, start + self.l)

    @property
    def n_unknowns(self) -> int:
        return self.q + self.l * (self.s + 1)


def build_multi_instance_system(ciphertexts: Sequence[Ciphertext], guesses: Sequence[Guess]):
    """Stack the per-step relations for shared ``e, f`` over a set of steps.

    Returns ``(A, b, layout)`` with ``(q+l)s`` rows and ``q+l(s+1)`` columns.
    All guesses must share ``H^_0`` and ``G^_0``.
    """
    s = len(ciphertexts)
    if s < 1 or len(guesses) != s:
        raise ValueError("need one guess per ciphertext")
    q, l = ciphertexts[0].q, ciphertexts[0].l
    H0, G0 = guesses[0].H, guesses[0].G
    for c, g in zip(ciphertexts, guesses):
        if c.G.shape != (q, l) or g.R.shape != (l, l) or g.G.shape != (q, l):
            raise ValueError("shape mismatch in multi-instance data")
    lay = UnknownLayout(q, l, s)
    A = np.zeros(((q + l) * s, lay.n_unknowns))
    b = np.zeros((q + l) * s)
    for i, (c, g) in enumerate(zip(ciphertexts, guesses)):
        rows = slice(i * q, (i + 1) * q)
        A[rows, lay.e] = np.eye(q)
        A[rows, lay.r(i)] = -G0
        b[rows] = c.e
        rows = slice(q * s + i * l, q * s + (i + 1) * l)
        A[rows, lay.f] = g.R.T
        A[rows, lay.r(i)] = g.R.T @ H0
        b[rows] = c.f
    return A, b, lay


def anchor_rows(layout: UnknownLayout, i: int, R_hat, y_star, z_anchor):
    """``l`` extra rows fixing ``r^_i = z_anchor - R^_i y*_i``."""
    A = np.zeros((layout.l, layout.n_unknowns))
    A[:, layout.r(i)] = np.eye(layout.l)
    return A, np.asarray(z_anchor, dtype=float) - R_hat @ np.asarray(y_star, dtype=float)


def reconstruct_with_anchor(ciphertexts: Sequence[Ciphertext], y_stars: Sequence[np.ndarray],
                            guesses: Sequence[Guess], z_anchor,
                            q_fix: int | None = None,
                            eps_rank: float = EPS_RANK) -> ReconstructionResult:
    """Close the missing ``l`` equations with a guess of the optimizer.

    For each step: ``r^ = z_anchor - R^ y*``, ``e^ = e~ + G^_0 r^``,
    ``f^ = R^^-T f~ - H^_0 r^``.
    """
    z_anchor = np.asarray(z_anchor, dtype=float)
    H0, G0 = guesses[0].H, guesses[0].G
    out = []
    for c, y, g in zip(ciphertexts, y_stars, guesses):
        r_hat = z_anchor - g.R @ y
        e_hat = c.e + G0 @ r_hat
        f_hat = _solve_RT(g.R, c.f) - H0 @ r_hat
        out.append(Guess(H0.copy(), G0.copy(), f_hat, e_hat, g.R.copy(), r_hat, "reconstructed"))
    A, _, lay = build_multi_instance_system(ciphertexts, guesses)
    Aa, _ = anchor_rows(lay, 0, guesses[0].R, y_stars[0], z_anchor)
    _, rank, nullity = solve_underdetermined(np.vstack([A, Aa]), np.zeros(A.shape[0] + lay.l),
                                             eps_rank)
    e_fix = None
    if q_fix is not None:
        e_fix = np.mean([g.e[:q_fix] for g in out], axis=0)
    return ReconstructionResult(
        guesses=out,
        steps=[c.step for c in ciphertexts],
        e_fix_hat=e_fix,
        anchor_used=z_anchor,
        rank_report=(rank, nullity),
        z_hat=[g.R @ y + g.r for g, y in zip(out, y_stars)],
    )


def build_spec2_system(ciphertexts: Sequence[Ciphertext], guesses: Sequence[Guess], q_fix: int):
    """Per-step relations with only the leading ``q_fix`` entries of ``e`` shared.

    Unknowns, in order: ``e_fix``, then per step ``(e_var_k, f_k, r_k)``.
    """
    s = len(ciphertexts)
    q, l = ciphertexts[0].q, ciphertexts[0].l
    q_var = q - q_fix
    H0, G0 = guesses[0].H, guesses[0].G
    width = q_var + 2 * l
    n = q_fix + width * s
    A = np.zeros(((q + l) * s, n))
    b = np.zeros((q + l) * s)
    for i, (c, g) in enumerate(zip(ciphertexts, guesses)):
        col = q_fix + width * i
        ev, fv, rv = slice(col, col + q_var), slice(col + q_var, col + q_var + l), \
            slice(col + q_var + l, col + width)
        row = (q + l) * i
        A[row:row + q_fix, :q_fix] = np.eye(q_fix)
        A[row + q_fix:row + q, ev] = np.eye(q_var)
        A[row:row + q, rv] = -G0
        b[row:row + q] = c.e
        A[row + q:row + q + l, fv] = g.R.T
        A[row + q:row + q + l, rv] = g.R.T @ H0
        b[row + q:row + q + l] = c.f
    return A, b


def extend_spec2(ciphertexts: Sequence[Ciphertext], y_stars: Sequence[np.ndarray],
                 guesses: Sequence[Guess], solved_index: int, solved_r,
                 q_fix: int, eps_rank: float = EPS_RANK) -> ReconstructionResult:
    """Propagate one solved instance to every step via the shared ``e_fix``.

    ``solved_index`` points into ``ciphertexts``; ``solved_r`` is that step's
    reconstructed ``r^``. The per-step unknowns ``e_var_k`` and ``f_k`` enter
    with invertible coefficients (``I`` and ``R^_k'``) and are eliminated, so
    the rank test and solve run on the reduced system in ``(e_fix, r_1..r_s)``
    plus the ``l`` anchor rows.
    """
    s = len(ciphertexts)
    q, l = ciphertexts[0].q, ciphertexts[0].l
    if not l < q_fix <= q:
        raise ValueError(f"need l < q_fix <= q, got q_fix={q_fix}")
    H0, G0 = guesses[0].H, guesses[0].G
    Gf = G0[:q_fix]
    n = q_fix + l * s
    A = np.zeros((q_fix * s + l, n))
    b = np.zeros(q_fix * s + l)
    for i, c in enumerate(ciphertexts):
        rows = slice(i * q_fix, (i + 1) * q_fix)
        A[rows, :q_fix] = np.eye(q_fix)
        A[rows, q_fix + i * l:q_fix + (i + 1) * l] = -Gf
        b[rows] = c.e[:q_fix]
    A[q_fix * s:, q_fix + solved_index * l:q_fix + (solved_index + 1) * l] = np.eye(l)
    b[q_fix * s:] = solved_r
    sol, rank, nullity = solve_underdetermined(A, b, eps_rank)
    if nullity:
        raise UnderdeterminedAfterAnchor(f"reduced system has {nullity} free directions")
    e_fix = sol[:q_fix]
    out, z_hat = [], []
    for i, (c, y, g) in enumerate(zip(ciphertexts, y_stars, guesses)):
        r_hat = sol[q_fix + i * l:q_fix + (i + 1) * l]
        e_hat = np.concatenate([e_fix, c.e[q_fix:] + G0[q_fix:] @ r_hat])
        f_hat = _solve_RT(g.R, c.f) - H0 @ r_hat
        out.append(Guess(H0.copy(), G0.copy(), f_hat, e_hat, g.R.copy(), r_hat, "reconstructed"))
        z_hat.append(g.R @ y + r_hat)
    eliminated = (q - q_fix + l) * s
    return ReconstructionResult(
        guesses=out,
        steps=[c.step for c in ciphertexts],
        e_fix_hat=e_fix,
        anchor_used=np.asarray(solved_r, dtype=float),
        rank_report=(rank + eliminated, nullity),
        z_hat=z_hat,
    )


def all_consistent(result: ReconstructionResult, ciphertexts: Sequence[Ciphertext],
                   tol: float = 1e-6) -> bool:
    return all(check_consistency(g, c, tol)[0] for g, c in zip(result.guesses, ciphertexts))


# ---------------------------------------------------------------------------
# permutations


def _candidates(A: np.ndarray, B: np.ndarray, a: np.ndarray | None, b: np.ndarray | None,
                tol: float, vtol: float) -> list[set[int]]:
    scale = max(np.abs(A).max(), np.abs(B).max(), np.finfo(float).tiny)
    SA, SB = np.sort(A, axis=1), np.sort(B, axis=1)
    close = np.abs(SA[:, None, :] - SB[None, :, :]).max(axis=2) <= tol * scale
    if a is not None:
        vscale = max(np.linalg.norm(b), np.finfo(float).tiny)
        close &= np.abs(a[:, None] - b[None, :]) <= vtol * vscale
    return [set(np.flatnonzero(row).tolist()) for row in close]


def _refine(A: np.ndarray, B: np.ndarray, cand: list[set[int]], tol: float) -> list[set[int]]:
    """Prune candidates using entries against rows that are already fixed."""
    scale = max(np.abs(A).max(), np.abs(B).max(), np.finfo(float).tiny)
    cand = [set(c) for c in cand]
    changed = True
    while changed:
        changed = False
        fixed = {i: next(iter(c)) for i, c in enumerate(cand) if len(c) == 1}
        taken = set(fixed.values())
        if not fixed:
            break
        src = np.array(list(fixed.keys()))
        dst = np.array(list(fixed.values()))
        for i, c in enumerate(cand):
            if len(c) <= 1:
                continue
            keep = {j for j in c if j not in taken
                    and np.abs(A[i, src] - B[j, dst]).max() <= tol * scale}
            if keep != c:
                cand[i] = keep
                changed = True
    return cand


def match_permutation(Mk: np.ndarray, M0: np.ndarray, vk: np.ndarray | None = None,
                      v0: np.ndarray | None = None, tol: float = MATCH_TOL,
                      vtol: float = 1e-6):
    """Find ``delta`` with ``Mk = M0[delta][:, delta]`` (and ``vk = v0[delta]``).

    Returns ``(delta, ambiguity_sets)``; ``delta`` is ``None`` whenever some
    row cannot be pinned to a single partner.
    """
    cand = _refine(Mk, M0, _candidates(Mk, M0, vk, v0, tol, vtol), tol)
    if any(len(c) == 0 for c in cand):
        raise AmbiguousMatching("a row has no admissible partner; data are not a permutation")
    if all(len(c) == 1 for c in cand):
        delta = np.array([next(iter(c)) for c in cand])
        if len(set(delta.tolist())) == delta.size:
            return delta, []
    groups: dict[frozenset, list[int]] = {}
    for i, c in enumerate(cand):
        if len(c) > 1:
            groups.setdefault(frozenset(c), []).append(i)
    return None, sorted(sorted(g) for g in groups.values())


def resolve_permutations(pairs: Sequence[InvariantPair], P_ref, reference_step: int | None = None,
                         k_set: Sequence[int] | None = None, tol: float = MATCH_TOL,
                         vtol: float = 1e-6) -> PermutationMap:
    """Relative and absolute constraint permutations from permuted invariants.

    ``P_ref`` is the known absolute permutation at ``reference_step`` (the
    first step by default). Rows are matched on sorted-row fingerprints of
    ``M'`` and refined by entries against already matched rows. For steps in
    ``k_set`` (steps sharing ``f, e`` with the reference) the ``v'`` entries
    are used as well; ``reference_step`` must then belong to ``k_set``.
    """
    by_step = {p.step: p for p in pairs}
    if reference_step is None:
        reference_step = pairs[0].step
    ref = by_step[reference_step]
    P_ref = np.asarray(P_ref, dtype=int)
    use_v = set(k_set or ())
    if use_v and reference_step not in use_v:
        raise ValueError("the reference step must belong to k_set for the v' refinement")

    delta, absolute, amb = {}, {}, {}
    for p in pairs:
        vk = v0 = None
        if p.step in use_v:
            vk, v0 = p.v, ref.v
        d, groups = match_permutation(p.M, ref.M, vk, v0, tol, vtol)
        delta[p.step] = d
        absolute[p.step] = None if d is None else P_ref[d]
        if groups:
            amb[p.step] = groups
    return PermutationMap(reference_step, delta, absolute, amb)
