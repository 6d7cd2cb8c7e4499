"""Linear MPC client producing one condensed QP per sampling instant.

Decision variable: ``z = (u(k), ..., u(k+N-1))``. Cost per step::

    sum_{i=1..N} |y(k+i) - y_ref(k+i)|_Q^2 + sum_{i=0..N-1} |u(k+i) - u(k+i-1)|_R^2

The output term starts at ``k+1`` because ``y(k)`` does not depend on ``z``.
Constraint rows are ordered ``[z <= z_hi; -z <= -z_lo]`` followed, for each
prediction step ``i = 1..N``, by the upper and then the lower state bounds
on ``x(k+i)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cipher import Ciphertext, QPInstance, TransformKey, decrypt_solution, encrypt, keygen
from .episode import EpisodeLog, StepRecord
from .numerics import NumericsError, solve_qp

KeySource = Callable[[int, int, int], TransformKey]


class EpisodeAborted(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"closed loop aborted at k={step}: {cause}")
        self.step = step
        self.cause = cause


@dataclass
class PlantModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    x_lo: np.ndarray
    x_hi: np.ndarray
    u_lo: np.ndarray
    u_hi: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "C", "x_lo", "x_hi", "u_lo", "u_hi"):
            setattr(self, name, np.array(getattr(self, name), dtype=float))
        n, m = self.B.shape
        if self.A.shape != (n, n) or self.C.shape[1] != n:
            raise ValueError("inconsistent plant dimensions")
        if self.x_lo.shape != (n,) or self.x_hi.shape != (n,) or np.any(self.x_lo >= self.x_hi):
            raise ValueError("state bounds must satisfy x_lo < x_hi")
        if self.u_lo.shape != (m,) or self.u_hi.shape != (m,) or np.any(self.u_lo >= self.u_hi):
            raise ValueError("input bounds must satisfy u_lo < u_hi")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]


def mobile_robot() -> PlantModel:
    """Planar double integrator with position outputs (x1, x3)."""
    A = np.kron(np.eye(2), [[1.0, 1.0], [0.0, 1.0]])
    B = np.kron(np.eye(2), [[0.5], [1.0]])
    C = np.array([[1.0, 0, 0, 0], [0, 0, 1.0, 0]])
    x_hi = np.array([20.0, 5.0, 20.0, 5.0])
    u_hi = np.array([1.0, 1.0])
    return PlantModel(A, B, C, -x_hi, x_hi, -u_hi, u_hi)


@dataclass(frozen=True)
class Setpoint:
    value: tuple[float, ...] = (0.0, 0.0)


@dataclass(frozen=True)
class Circle:
    radius: float = 10.0
    period: int = 20
    direction: int = 1  # +1 counterclockwise
    phase: float = 0.0


@dataclass
class MPCConfig:
    N: int = 5
    Q: np.ndarray = field(default_factory=lambda: np.eye(2))
    R: np.ndarray = field(default_factory=lambda: 0.1 * np.eye(2))
    reference: Setpoint | Circle = field(default_factory=Setpoint)

    def __post_init__(self):
        self.Q = np.array(self.Q, dtype=float)
        self.R = np.array(self.R, dtype=float)
        if self.N < 1:
            raise ValueError("horizon must be at least 1")
        if np.linalg.eigvalsh(0.5 * (self.Q + self.Q.T)).min() < 0:
            raise ValueError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(0.5 * (self.R + self.R.T)).min() <= 0:
            raise ValueError("R must be positive definite")


@dataclass
class PlantState:
    x: np.ndarray
    u_prev: np.ndarray
    k: int = 0


def reference(cfg: MPCConfig, k: int, horizon: int = 1) -> np.ndarray:
    """Reference samples at times ``k, ..., k+horizon-1`` as rows."""
    if k < 0:
        raise ValueError("time index must be nonnegative")
    ref = cfg.reference
    times = np.arange(k, k + horizon, dtype=float)
    if isinstance(ref, Setpoint):
        return np.tile(np.asarray(ref.value, dtype=float), (horizon, 1))
    angle = ref.phase + ref.direction * 2.0 * np.pi * times / ref.period
    return ref.radius * np.column_stack([np.cos(angle), np.sin(angle)])


@dataclass(frozen=True)
class _Prediction:
    Phi: np.ndarray    # (nN, n): stacked A^i
    Gamma: np.ndarray  # (nN, mN): input-to-state map
    H: np.ndarray
    G: np.ndarray
    Cbar: np.ndarray
    Qbar: np.ndarray
    D: np.ndarray
    Rbar: np.ndarray


def _prediction(model: PlantModel, cfg: MPCConfig) -> _Prediction:
    n, m, N = model.n, model.m, cfg.N
    A, B = model.A, model.B
    powers = [np.eye(n)]
    for _ in range(N):
        powers.append(A @ powers[-1])
    Phi = np.vstack(powers[1:])
    Gamma = np.zeros((n * N, m * N))
    for i in range(N):
        for j in range(i + 1):
            Gamma[i * n:(i + 1) * n, j * m:(j + 1) * m] = powers[i - j] @ B

    Cbar = np.kron(np.eye(N), model.C)
    Qbar = np.kron(np.eye(N), cfg.Q)
    Rbar = np.kron(np.eye(N), cfg.R)
    D = np.eye(m * N) - np.eye(m * N, k=-m)
    Gy = Cbar @ Gamma
    H = 2.0 * (Gy.T @ Qbar @ Gy + D.T @ Rbar @ D)
    H = 0.5 * (H + H.T)

    l = m * N
    blocks = [np.eye(l), -np.eye(l)]
    for i in range(N):
        Gi = Gamma[i * n:(i + 1) * n]
        blocks += [Gi, -Gi]
    G = np.vstack(blocks)
    return _Prediction(Phi, Gamma, H, G, Cbar, Qbar, D, Rbar)


class CondensedMPC:
    """Precomputed condensation for one (model, config) pair."""

    def __init__(self, model: PlantModel, cfg: MPCConfig):
        self.model = model
        self.cfg = cfg
        self._pred = _prediction(model, cfg)
        N = cfg.N
        self.z_hi = np.tile(model.u_hi, N)
        self.z_lo = np.tile(model.u_lo, N)

    @property
    def l(self) -> int:
        return self.model.m * self.cfg.N

    @property
    def q(self) -> int:
        return 2 * self.l + 2 * self.model.n * self.cfg.N

    @property
    def q_fix(self) -> int:
        return 2 * self.l

    def qp(self, state: PlantState) -> QPInstance:
        pr, model, N = self._pred, self.model, self.cfg.N
        n, m = model.n, model.m
        x = np.asarray(state.x, dtype=float)
        free = pr.Phi @ x
        yref = reference(self.cfg, state.k + 1, N).reshape(-1)
        d0 = np.zeros(m * N)
        d0[:m] = state.u_prev
        Gy = pr.Cbar @ pr.Gamma
        f = 2.0 * (Gy.T @ pr.Qbar @ (pr.Cbar @ free - yref) - pr.D.T @ pr.Rbar @ d0)
        eps = []
        for i in range(N):
            xi = free[i * n:(i + 1) * n]
            eps += [model.x_hi - xi, -model.x_lo + xi]
        e = np.concatenate([self.z_hi, -self.z_lo, *eps])
        return QPInstance(pr.H.copy(), pr.G.copy(), f, e, state.k)


def build_condensed_qp(model: PlantModel, cfg: MPCConfig, state: PlantState) -> QPInstance:
    return CondensedMPC(model, cfg).qp(state)


def random_keys(seed=None, lo: float = -10.0, hi: float = 10.0, permute: bool = False) -> KeySource:
    """Fresh independent key per step, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)

    def source(k: int, l: int, q: int) -> TransformKey:
        return keygen(l, q, lo, hi, permute, rng, step=k)

    return source


def identity_keys(k: int, l: int, q: int) -> TransformKey:
    return TransformKey.identity(l, k)


def closed_loop(model: PlantModel, cfg: MPCConfig, x0, u_prev0, T: int,
                key_source: KeySource = identity_keys,
                solver: Callable[[Ciphertext], np.ndarray] | None = None) -> EpisodeLog:
    """Run ``T`` steps of client-encrypt / cloud-solve / client-decrypt.

    ``solver`` stands in for the cloud and maps a ciphertext to ``y*``; the
    default is :func:`rtqp.numerics.solve_qp`. Whether constraints are
    permuted is a property of the keys ``key_source`` hands out.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    if solver is None:
        def solver(c: Ciphertext) -> np.ndarray:
            return solve_qp(c.H, c.G, c.f, c.e).primal

    mpc = CondensedMPC(model, cfg)
    x = np.array(x0, dtype=float)
    u_prev = np.array(u_prev0, dtype=float)
    records = []
    for k in range(T):
        state = PlantState(x.copy(), u_prev.copy(), k)
        qp = mpc.qp(state)
        key = key_source(k, mpc.l, mpc.q)
        c = encrypt(qp, key)
        try:
            y_star = solver(c)
        except NumericsError as exc:
            raise EpisodeAborted(k, exc) from exc
        z_star = decrypt_solution(y_star, key)
        u = z_star[:model.m]
        records.append(StepRecord(
            k=k, qp=qp, key=key, ciphertext=c, y_star=y_star, z_star=z_star,
            x=x.copy(), u=u.copy(), y_ref=reference(cfg, k, 1)[0],
        ))
        x = model.A @ x + model.B @ u
        u_prev = u
    return EpisodeLog(records=records, config={"N": cfg.N, "m": model.m, "l": mpc.l,
                                               "q": mpc.q, "q_fix": mpc.q_fix})
