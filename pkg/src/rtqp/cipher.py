"""Random affine transformation (RT) of quadratic programs.

The client substitutes ``z = R y + r`` in

    min 0.5 z'Hz + f'z   s.t.  G z <= e

and ships the transformed data

    H~ = R'HR,  G~ = GR,  f~ = R'(f + Hr),  e~ = e - Gr

to the solver. Optionally the constraint rows are shuffled by a permutation
``p`` (``G~' = G~[p]``, ``e~' = e~[p]``); the cost is never permuted.

Permutations are stored as index arrays: applying ``p`` to a vector ``x``
gives ``x[p]``, i.e. the permutation matrix is ``np.eye(q)[p]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .numerics import numeric_rank

MAX_KEY_CONDITION = 1e8
MAX_RESAMPLE = 100
CONSISTENCY_TOL = 1e-6


class CipherError(Exception):
    pass


class ShapeMismatch(CipherError, ValueError):
    pass


class ResampleLimitExceeded(CipherError):
    pass


class SingularComposer(CipherError):
    pass


def _arr(x) -> np.ndarray:
    return np.array(x, dtype=float)


@dataclass
class QPInstance:
    H: np.ndarray
    G: np.ndarray
    f: np.ndarray
    e: np.ndarray
    step: int = 0

    def __post_init__(self):
        self.H, self.G, self.f, self.e = _arr(self.H), _arr(self.G), _arr(self.f), _arr(self.e)

    @property
    def l(self) -> int:
        return self.H.shape[0]

    @property
    def q(self) -> int:
        return self.G.shape[0]

    def to_dict(self) -> dict[str, Any]:
        return {"H": self.H.tolist(), "G": self.G.tolist(), "f": self.f.tolist(),
                "e": self.e.tolist(), "step": self.step}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> QPInstance:
        return cls(d["H"], d["G"], d["f"], d["e"], int(d.get("step", 0)))


@dataclass
class TransformKey:
    R: np.ndarray
    r: np.ndarray
    P: np.ndarray | None = None
    step: int = 0

    def __post_init__(self):
        self.R, self.r = _arr(self.R), _arr(self.r)
        if self.P is not None:
            self.P = np.asarray(self.P, dtype=int)
            if sorted(self.P.tolist()) != list(range(self.P.size)):
                raise ValueError("P is not a permutation")

    def permutation_matrix(self) -> np.ndarray | None:
        return None if self.P is None else np.eye(self.P.size)[self.P]

    def to_dict(self) -> dict[str, Any]:
        return {"R": self.R.tolist(), "r": self.r.tolist(),
                "P": None if self.P is None else self.P.tolist(), "step": self.step}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TransformKey:
        return cls(d["R"], d["r"], d.get("P"), int(d.get("step", 0)))

    @classmethod
    def identity(cls, l: int, step: int = 0) -> TransformKey:
        return cls(np.eye(l), np.zeros(l), None, step)


@dataclass
class Ciphertext:
    """What the cloud sees for one QP: (H~, G~, f~, e~)."""

    H: np.ndarray
    G: np.ndarray
    f: np.ndarray
    e: np.ndarray
    permuted: bool = False
    step: int = 0

    def __post_init__(self):
        self.H, self.G, self.f, self.e = _arr(self.H), _arr(self.G), _arr(self.f), _arr(self.e)

    @property
    def l(self) -> int:
        return self.H.shape[0]

    @property
    def q(self) -> int:
        return self.G.shape[0]

    def to_dict(self) -> dict[str, Any]:
        return {"H": self.H.tolist(), "G": self.G.tolist(), "f": self.f.tolist(),
                "e": self.e.tolist(), "permuted": self.permuted, "step": self.step}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Ciphertext:
        return cls(d["H"], d["G"], d["f"], d["e"], bool(d.get("permuted", False)),
                   int(d.get("step", 0)))


@dataclass
class Guess:
    """Candidate plaintext and key for one ciphertext."""

    H: np.ndarray
    G: np.ndarray
    f: np.ndarray
    e: np.ndarray
    R: np.ndarray
    r: np.ndarray
    provenance: str = "trivial"
    meta: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k).tolist() for k in ("H", "G", "f", "e", "R", "r")} | {
            "provenance": self.provenance}


def keygen(l: int, q: int, range_lo: float = -10.0, range_hi: float = 10.0,
           permute: bool = False, rng_seed=None, step: int = 0) -> TransformKey:
    """Draw a key with entries uniform on ``[range_lo, range_hi]``.

    ``R`` is redrawn until its condition number is at most 1e8. ``rng_seed``
    may be anything ``np.random.default_rng`` accepts, including a Generator.
    """
    if not range_lo < range_hi:
        raise ValueError("range_lo must be below range_hi")
    if l < 1 or q < 1:
        raise ValueError("l and q must be positive")
    rng = np.random.default_rng(rng_seed)
    for _ in range(MAX_RESAMPLE):
        R = rng.uniform(range_lo, range_hi, size=(l, l))
        if np.linalg.cond(R) <= MAX_KEY_CONDITION:
            break
    else:
        raise ResampleLimitExceeded(f"no well-conditioned R after {MAX_RESAMPLE} draws")
    r = rng.uniform(range_lo, range_hi, size=l)
    P = rng.permutation(q) if permute else None
    return TransformKey(R, r, P, step)


def encrypt(p: QPInstance, key: TransformKey, check: bool = True) -> Ciphertext:
    l, q = p.l, p.q
    R, r = key.R, key.r
    if R.shape != (l, l) or r.shape != (l,) or p.G.shape != (q, l) or p.f.shape != (l,) \
            or p.e.shape != (q,) or (key.P is not None and key.P.size != q):
        raise ShapeMismatch("key does not fit the QP dimensions")
    Ht = R.T @ p.H @ R
    Ht = 0.5 * (Ht + Ht.T)
    Gt = p.G @ R
    ft = R.T @ (p.f + p.H @ r)
    et = p.e - p.G @ r
    if key.P is not None:
        Gt, et = Gt[key.P], et[key.P]
    c = Ciphertext(Ht, Gt, ft, et, key.P is not None, p.step)
    if check:
        validate_ciphertext(c)
    return c


def validate_ciphertext(c: Ciphertext) -> None:
    """Raise ``ValueError`` unless H~ is positive definite and G~ has rank l."""
    try:
        np.linalg.cholesky(c.H)
    except np.linalg.LinAlgError as exc:
        raise ValueError("transformed Hessian is not positive definite") from exc
    if numeric_rank(c.G) != c.l:
        raise ValueError("transformed constraint matrix lost full column rank")


def decrypt_solution(y_star, key: TransformKey) -> np.ndarray:
    y_star = np.asarray(y_star, dtype=float)
    if y_star.shape != key.r.shape:
        raise ShapeMismatch(f"optimizer has shape {y_star.shape}, key expects {key.r.shape}")
    return key.R @ y_star + key.r


def permute_back(c: Ciphertext, P) -> Ciphertext:
    """Undo a row permutation: returns the unpermuted ciphertext for ``P``."""
    P = np.asarray(P, dtype=int)
    inv = np.argsort(P)
    return Ciphertext(c.H, c.G[inv], c.f, c.e[inv], False, c.step)


def trivial_guess(c: Ciphertext) -> Guess:
    l = c.l
    return Guess(c.H.copy(), c.G.copy(), c.f.copy(), c.e.copy(), np.eye(l), np.zeros(l), "trivial")


def compose_guess(g: Guess, R_tilde, r_tilde) -> Guess:
    """Move a consistent guess along the family of equally consistent ones."""
    Rt = np.asarray(R_tilde, dtype=float)
    rt = np.asarray(r_tilde, dtype=float)
    try:
        Rt_inv = np.linalg.inv(Rt)
    except np.linalg.LinAlgError as exc:
        raise SingularComposer("composing matrix is singular") from exc
    if not np.all(np.isfinite(Rt_inv)) or np.linalg.cond(Rt) > 1e14:
        raise SingularComposer("composing matrix is numerically singular")
    H = Rt.T @ g.H @ Rt
    return Guess(
        H=0.5 * (H + H.T),
        G=g.G @ Rt,
        f=Rt.T @ (g.f + g.H @ rt),
        e=g.e - g.G @ rt,
        R=Rt_inv @ g.R,
        r=Rt_inv @ (g.r - rt),
        provenance="composed",
    )


def _rel(target, approx) -> float:
    denom = np.linalg.norm(target) + np.linalg.norm(approx)
    return 0.0 if denom == 0 else float(np.linalg.norm(target - approx) / denom)


def consistency_residuals(g: Guess, c: Ciphertext) -> dict[str, float]:
    """Scaled residuals of the four transformation equations.

    Each entry is ``|a - b| / (|a| + |b|)`` for the observed ciphertext part
    ``a`` and the part ``b`` the guess predicts.
    """
    if g.H.shape != c.H.shape or g.G.shape != c.G.shape or g.e.shape != c.e.shape:
        raise ShapeMismatch("guess and ciphertext shapes differ")
    return {
        "H": _rel(c.H, g.R.T @ g.H @ g.R),
        "G": _rel(c.G, g.G @ g.R),
        "f": _rel(c.f, g.R.T @ (g.f + g.H @ g.r)),
        "e": _rel(c.e, g.e - g.G @ g.r),
    }


def check_consistency(g: Guess, c: Ciphertext, tol: float = CONSISTENCY_TOL,
                      parts=("H", "G", "f", "e")) -> tuple[bool, dict[str, float]]:
    res = consistency_residuals(g, c)
    return all(res[k] <= tol for k in parts), res
