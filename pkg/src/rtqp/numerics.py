"""Dense linear-algebra and QP kernels.

All routines take and return plain numpy arrays and keep no state, so they
are safe to call from several threads at once.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg as sla

# numeric rank threshold, relative to the largest singular value
EPS_RANK = 1e-10
# constraint i counts as active iff |G z - e|_i <= ACTIVE_TOL * (1 + |e_i|)
ACTIVE_TOL = 1e-7


class NumericsError(Exception):
    """Base class for failures of the numerical kernels."""


class Infeasible(NumericsError):
    pass


class NotPositiveDefinite(NumericsError):
    pass


class MaxIterations(NumericsError):
    pass


class ConvergenceFailure(NumericsError):
    pass


@dataclass(frozen=True)
class QPSolution:
    """Primal/dual pair of a strictly convex inequality-constrained QP.

    ``dual`` holds the multipliers of ``G z <= e`` in the convention
    ``H z + f + G.T @ dual = 0``.
    """

    primal: np.ndarray
    dual: np.ndarray
    active_set: tuple[int, ...]
    kkt_residual: float


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray
    singular_values: np.ndarray
    V: np.ndarray
    numeric_rank: int


class LstsqResult(NamedTuple):
    solution: np.ndarray
    rank: int
    nullspace_dim: int


def _as_qp(H, G, f, e):
    H = np.asarray(H, dtype=float)
    G = np.asarray(G, dtype=float)
    f = np.asarray(f, dtype=float).reshape(-1)
    e = np.asarray(e, dtype=float).reshape(-1)
    l = H.shape[0]
    if H.shape != (l, l) or G.ndim != 2 or G.shape[1] != l or f.size != l or e.size != G.shape[0]:
        raise ValueError(
            f"inconsistent QP shapes H{H.shape} G{G.shape} f{f.shape} e{e.shape}"
        )
    return H, G, f, e


def _cholesky(H: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(0.5 * (H + H.T))
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("Cholesky factorization of H failed") from exc


def active_constraints(G, e, z, tol: float = ACTIVE_TOL) -> tuple[int, ...]:
    """Indices of constraints of ``G z <= e`` that hold with equality at ``z``."""
    slack = np.asarray(e) - np.asarray(G) @ np.asarray(z)
    return tuple(int(i) for i in np.flatnonzero(np.abs(slack) <= tol * (1.0 + np.abs(e))))


def kkt_residual(H, G, f, e, z, lam) -> float:
    """Largest violation among stationarity, feasibility, sign and complementarity."""
    H, G, f, e = _as_qp(H, G, f, e)
    slack = e - G @ z
    stat = H @ z + f + G.T @ lam
    parts = [
        np.max(np.abs(stat), initial=0.0),
        np.max(-slack, initial=0.0),
        np.max(-lam, initial=0.0),
        np.max(np.abs(lam * slack), initial=0.0),
    ]
    return float(max(parts))


def solve_qp(H, G, f, e, max_iter: int | None = None) -> QPSolution:
    """Minimize ``0.5 z'Hz + f'z`` subject to ``G z <= e`` for SPD ``H``.

    Dual active-set method of Goldfarb and Idnani: start from the unconstrained
    minimizer and add the most violated constraint (lowest index on ties) until
    the iterate is feasible, dropping constraints whose multipliers would turn
    negative on the way. The working-set factorization is recomputed from
    scratch after each change, which is cheap at the sizes used here.

    Raises
    ------
    NotPositiveDefinite
        If ``H`` admits no Cholesky factor.
    Infeasible
        If the constraints have no common point.
    MaxIterations
        If the working set keeps changing past ``max_iter`` updates.
    """
    H, G, f, e = _as_qp(H, G, f, e)
    l, q = H.shape[0], G.shape[0]
    if max_iter is None:
        max_iter = 50 * (l + q) + 100

    L = _cholesky(H)
    Linv = sla.solve_triangular(L, np.eye(l), lower=True)
    Hinv = Linv.T @ Linv
    z = -Hinv @ f

    row_norm = np.linalg.norm(G, axis=1)
    active: list[int] = []
    u = np.zeros(0)

    def basis(act):
        # J = L^-T Q with Q from the QR of L^-1 N, N the active normals -G_i^T
        if not act:
            return Linv.T, np.zeros((0, 0))
        N = -G[act].T
        Q, R = np.linalg.qr(Linv @ N, mode="complete")
        return Linv.T @ Q, R[: len(act), :]

    J, R = basis(active)
    iters = 0
    while True:
        slack = e - G @ z
        feas_tol = 1e-11 * (1.0 + np.abs(e) + row_norm * np.linalg.norm(z))
        viol = np.where(slack < -feas_tol, slack, np.inf)
        if active:
            viol[active] = np.inf
        if not np.isfinite(viol).any():
            break
        p = int(np.argmin(viol))
        n_p = -G[p]
        u_p = 0.0

        while True:
            iters += 1
            if iters > max_iter:
                raise MaxIterations(f"no convergence after {max_iter} working-set updates")
            na = len(active)
            d = J.T @ n_p
            d2 = d[na:]
            step_dir = J[:, na:] @ d2
            r = sla.solve_triangular(R, d[:na]) if na else np.zeros(0)

            t1, k_drop = np.inf, -1
            for j in range(na):
                if r[j] > 0.0:
                    ratio = u[j] / r[j]
                    if ratio < t1:
                        t1, k_drop = ratio, j

            curv = float(d2 @ d2)
            s_p = float(e[p] - G[p] @ z)
            if curv <= 1e-20 * float(d @ d):
                t2 = np.inf
            else:
                t2 = max(-s_p, 0.0) / curv

            t = min(t1, t2)
            if not np.isfinite(t):
                raise Infeasible(f"constraint {p} cannot be satisfied together with the working set")

            if np.isfinite(t2):
                z = z + t * step_dir
            u = u - t * r
            u_p += t
            if t2 <= t1:
                active.append(p)
                u = np.append(u, u_p)
                J, R = basis(active)
                break
            active.pop(k_drop)
            u = np.delete(u, k_drop)
            J, R = basis(active)

    z, lam = _polish(H, G, f, e, active, z, u)
    return QPSolution(
        primal=z,
        dual=lam,
        active_set=active_constraints(G, e, z),
        kkt_residual=kkt_residual(H, G, f, e, z, lam),
    )


def _polish(H, G, f, e, active, z, u):
    """Re-solve the equality-constrained KKT system on the final working set."""
    l, q = H.shape[0], G.shape[0]
    lam = np.zeros(q)
    if not active:
        return z, lam
    GA = G[active]
    na = len(active)
    K = np.block([[H, GA.T], [GA, np.zeros((na, na))]])
    rhs = np.concatenate([-f, e[active]])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        lam[active] = u
        return z, lam
    lam[active] = np.maximum(sol[l:], 0.0)
    return sol[:l], lam


def solve_dual_qp(H, G, f, e, max_iter: int | None = None) -> np.ndarray:
    """Multipliers from the explicitly formed dual problem.

    Solves ``min_{lam >= 0} 0.5 lam' M lam + c' lam`` with ``M = G H^-1 G'`` and
    ``c = G H^-1 f + e`` by a primal active-set method on the bounds. ``M`` is
    only positive semidefinite when ``q > l``; on a singular free block the step
    is taken along a zero-curvature descent direction instead of Newton's.
    """
    H, G, f, e = _as_qp(H, G, f, e)
    q = G.shape[0]
    L = _cholesky(H)
    W = sla.solve_triangular(L, G.T, lower=True)
    M = W.T @ W
    c = W.T @ sla.solve_triangular(L, f, lower=True) + e
    if max_iter is None:
        max_iter = 20 * q + 100

    scale = max(1.0, np.max(np.abs(c)), np.max(np.abs(M)))
    gtol = 1e-12 * scale
    lam = np.zeros(q)
    free = np.zeros(q, dtype=bool)

    for _ in range(max_iter):
        F = np.flatnonzero(free)
        if F.size:
            g_F = M[np.ix_(F, F)] @ lam[F] + c[F] + M[np.ix_(F, ~free)] @ lam[~free]
            w, V = np.linalg.eigh(M[np.ix_(F, F)])
            pos = w > 1e-12 * max(1.0, w[-1])
            coef = V.T @ g_F
            null_part = V[:, ~pos] @ coef[~pos]
            ray = np.linalg.norm(null_part) > 1e-10 * max(1.0, np.linalg.norm(g_F))
            if ray:
                d = -null_part
            else:
                d = -V[:, pos] @ (coef[pos] / w[pos])
            neg = d < 0.0
            alpha = np.inf if ray else 1.0
            block = -1
            if neg.any():
                ratios = -lam[F][neg] / d[neg]
                j = int(np.argmin(ratios))
                if ratios[j] < alpha:
                    alpha, block = ratios[j], int(F[neg][j])
            if not np.isfinite(alpha):
                raise Infeasible("dual objective unbounded below")
            lam[F] = lam[F] + alpha * d
            if block >= 0:
                lam[block] = 0.0
                free[block] = False
                lam[F] = np.maximum(lam[F], 0.0)
                continue
        g = M @ lam + c
        cand = np.where(~free & (g < -gtol), g, np.inf)
        if not np.isfinite(cand).any():
            return lam
        free[int(np.argmin(cand))] = True
    raise MaxIterations(f"dual active-set did not terminate in {max_iter} iterations")


def primal_from_dual(H, G, f, lam) -> np.ndarray:
    """Recover ``z = -H^-1 (f + G' lam)`` from dual multipliers."""
    H = np.asarray(H, dtype=float)
    L = _cholesky(H)
    return -sla.cho_solve((L, True), np.asarray(f) + np.asarray(G).T @ lam)


def svd(M, eps_rank: float = EPS_RANK) -> SvdResult:
    """Full SVD with a relative numeric-rank estimate."""
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    try:
        U, s, Vt = np.linalg.svd(M, full_matrices=True)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(str(exc)) from exc
    rank = int(np.sum(s > eps_rank * s[0])) if s.size and s[0] > 0 else 0
    return SvdResult(U=U, singular_values=s, V=Vt.T, numeric_rank=rank)


def numeric_rank(A, eps_rank: float = EPS_RANK) -> int:
    s = np.linalg.svd(np.asarray(A, dtype=float), compute_uv=False)
    return int(np.sum(s > eps_rank * s[0])) if s.size and s[0] > 0 else 0


def solve_underdetermined(A, b, eps_rank: float = EPS_RANK) -> LstsqResult:
    """Minimum-norm least-squares solution of ``A x = b``.

    Never raises on rank deficiency; callers read ``rank`` and
    ``nullspace_dim`` to decide whether the answer is unique.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).reshape(-1)
    n = A.shape[1]
    if A.size == 0:
        return LstsqResult(np.zeros(n), 0, n)
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    rank = int(np.sum(s > eps_rank * s[0])) if s[0] > 0 else 0
    x = Vt[:rank].T @ ((U[:, :rank].T @ b) / s[:rank])
    return LstsqResult(x, rank, n - rank)


def nullspace(A, eps_rank: float = EPS_RANK) -> np.ndarray:
    """Orthonormal basis (columns) of the numerical null space of ``A``."""
    A = np.asarray(A, dtype=float)
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    rank = int(np.sum(s > eps_rank * s[0])) if s.size and s[0] > 0 else 0
    return Vt[rank:].T
