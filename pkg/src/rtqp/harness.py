"""Scenario runs, the end-to-end attack pipeline and its ground-truth metrics.

``run_scenario`` drives the encrypted MPC loop on the planar robot and writes
the episode to disk. ``run_attack`` replays the adversary on an episode: it
touches only the adversary view (ciphertexts, ``y*`` and optionally one
known permutation) until the final metric step, where the logged ground
truth is compared against the reconstruction.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import attack as atk
from .cipher import (Ciphertext, QPInstance, TransformKey, decrypt_solution, encrypt,
                     keygen, permute_back)
from .episode import EpisodeLog, StepRecord
from .mpc import Circle, MPCConfig, Setpoint, closed_loop, mobile_robot, random_keys
from .numerics import EPS_RANK, solve_qp

log = logging.getLogger(__name__)

SCENARIOS = ("setpoint", "tracking")
X0 = (10.0, -2.0, 10.0, 2.0)
U_PREV0 = (0.0, 0.0)

# defaults per scenario: logged steps, constancy tolerance, circle phase
_DEFAULTS = {
    "setpoint": {"steps": 21, "constancy": 5e-2, "phase": 0.0},
    "tracking": {"steps": 61, "constancy": 1e-3, "phase": -math.pi / 20},
}


class AttackAbort(RuntimeError):
    """The attack pipeline stopped; ``stage`` names where."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"attack aborted at stage '{stage}': {message}")
        self.stage = stage
        self.message = message


@dataclass
class ScenarioConfig:
    """One closed-loop experiment.

    ``steps`` counts logged sampling instants ``k = 0 .. steps-1``.
    ``circle_phase`` shifts the tracking reference; the default samples the
    circle half an interval early so that the second input component is
    close to zero on the repeating steps.
    """

    scenario: str = "setpoint"
    steps: int | None = None
    permute: bool = False
    key_range: tuple[float, float] = (-10.0, 10.0)
    seed: int | None = 0
    tolerances: dict[str, float] = field(default_factory=dict)
    output_dir: str | None = None
    circle_phase: float | None = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        d = _DEFAULTS[self.scenario]
        if self.steps is None:
            self.steps = d["steps"]
        if self.circle_phase is None:
            self.circle_phase = d["phase"]
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        lo, hi = (float(x) for x in self.key_range)
        if not lo < hi:
            raise ValueError("key_range must satisfy lo < hi")
        self.key_range = (lo, hi)
        tol = {"constancy": d["constancy"], "consistency": 1e-6, "rank": EPS_RANK}
        unknown = set(self.tolerances) - set(tol)
        if unknown:
            raise ValueError(f"unknown tolerance keys {sorted(unknown)}")
        tol.update({k: float(v) for k, v in self.tolerances.items()})
        self.tolerances = tol

    def mpc_config(self) -> MPCConfig:
        if self.scenario == "setpoint":
            return MPCConfig(reference=Setpoint())
        return MPCConfig(reference=Circle(phase=self.circle_phase))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["key_range"] = list(self.key_range)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ScenarioConfig:
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> ScenarioConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class AttackOptions:
    """Knobs of :func:`run_attack`.

    anchor
        ``"zero"``, ``"oracle"`` (true optimizer at the anchor step, a sanity
        check only) or an explicit vector. The anchor is read in the
        coordinates of the guess, which match the plaintext ones only for a
        structure guess; after an svd guess even the oracle anchor yields a
        consistent but different plaintext.
    k_set
        Steps assumed to share ``f, e``; detected when ``None``.
    known_permutation_step
        Step whose absolute permutation the adversary knows. Defaults to the
        first step of the chosen ``k_set``.
    match_tol, vtol
        Row matching tolerances for ``M'`` and ``v'``. ``match_tol`` sits above
        the 1e-8 library default because the invariants of a step whose key
        has condition number ``c`` carry errors of order ``c**2 * eps``.
        ``vtol`` defaults to ``constancy_tol``.
    """

    anchor: str | Sequence[float] = "zero"
    constancy_tol: float = 1e-6
    consistency_tol: float = 1e-6
    rank_tol: float = EPS_RANK
    period_tol: float | None = None
    k_set: Sequence[int] | None = None
    known_permutation_step: int | None = None
    match_tol: float = 1e-6
    vtol: float | None = None
    guess_method: str = "auto"
    q_fix: int | None = None

    @classmethod
    def from_scenario(cls, cfg: ScenarioConfig, **kw) -> AttackOptions:
        t = cfg.tolerances
        return cls(constancy_tol=t["constancy"], consistency_tol=t["consistency"],
                   rank_tol=t["rank"], **kw)


@dataclass
class AttackMetrics:
    """Attack outcome against ground truth.

    ``signed_error[i]`` is ``u_hat - u`` at ``steps[i]``; ``abs_error`` its
    magnitude. ``offset`` and ``offset_std`` are the per-component mean and
    standard deviation of the signed error.
    """

    steps: list[int]
    signed_error: np.ndarray
    abs_error: np.ndarray
    offset: np.ndarray
    offset_std: np.ndarray
    u_hat: np.ndarray
    u_true: np.ndarray
    spec: atk.SpecReport
    k_set: list[int]
    anchor_step: int
    anchor: np.ndarray
    rank_report: tuple[int, int]
    consistent: bool
    guess_provenance: str
    permutation_recovery_rate: float | None = None
    permutation_ambiguity: dict[int, list[list[int]]] = field(default_factory=dict)

    @property
    def max_abs_error(self) -> float:
        return float(self.abs_error.max()) if self.abs_error.size else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "steps": self.steps,
            "signed_error": self.signed_error.tolist(),
            "abs_error": self.abs_error.tolist(),
            "max_abs_error": self.max_abs_error,
            "offset": self.offset.tolist(),
            "offset_std": self.offset_std.tolist(),
            "spec": self.spec.to_dict(),
            "k_set": self.k_set,
            "anchor_step": self.anchor_step,
            "anchor": self.anchor.tolist(),
            "rank_report": list(self.rank_report),
            "consistent": self.consistent,
            "guess_provenance": self.guess_provenance,
            "permutation_recovery_rate": self.permutation_recovery_rate,
            "permutation_ambiguity": {str(k): v for k, v in self.permutation_ambiguity.items()},
        }


# ---------------------------------------------------------------------------
# scenarios


def run_scenario(cfg: ScenarioConfig) -> tuple[EpisodeLog, dict[str, Path]]:
    """Simulate the encrypted loop and write the episode files.

    Returns the log and a mapping from file kind to path (empty when
    ``cfg.output_dir`` is ``None``).
    """
    lo, hi = cfg.key_range
    keys = random_keys(cfg.seed, lo, hi, cfg.permute)
    ep = closed_loop(mobile_robot(), cfg.mpc_config(), X0, U_PREV0, cfg.steps, keys)
    ep.config["scenario"] = cfg.to_dict()
    files = {}
    if cfg.output_dir is not None:
        files = write_episode_files(ep, cfg.output_dir)
    return ep, files


def final_output(ep: EpisodeLog) -> np.ndarray:
    """Robot position after the last logged input was applied."""
    model = mobile_robot()
    last = ep.records[-1]
    return model.C @ (model.A @ last.x + model.B @ last.u)


def write_episode_files(ep: EpisodeLog, output_dir) -> dict[str, Path]:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"trajectory": out / "trajectory.csv",
             "ciphertext_norms": out / "ciphertext_norms.csv",
             "episode": out / "episode.json"}
    with paths["trajectory"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "x1", "x2", "x3", "x4", "u1", "u2", "yref1", "yref2"])
        for rec in ep.records:
            w.writerow([rec.k, *map(repr, rec.x.tolist()), *map(repr, rec.u.tolist()),
                        *map(repr, rec.y_ref.tolist())])
    with paths["ciphertext_norms"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "v_norm"])
        for rec in ep.records:
            w.writerow([rec.k, repr(float(np.linalg.norm(atk.invariants(rec.ciphertext).v)))])
    ep.save(paths["episode"])
    return paths


def random_stream(T: int, l: int = 10, q: int = 60, seed=None, vary_H: bool = False,
                  vary_G: bool = False, permute: bool = False,
                  repeat: Sequence[int] = (), q_fix: int = 0) -> EpisodeLog:
    """Episode of unrelated random QPs, e.g. for a negative control.

    ``H`` and ``G`` are drawn once unless ``vary_H`` / ``vary_G`` ask for a
    fresh draw per step; ``f`` is fresh and ``e`` keeps the QP feasible
    around a random interior point in the unit box. Steps listed in
    ``repeat`` all reuse the ``f, e`` drawn for the first of them. The
    leading ``q_fix`` entries of ``e`` are shared by all steps; they get
    enough slack to hold for any point of the box.
    """
    rng = np.random.default_rng(seed)

    def draw_H():
        A = rng.standard_normal((l, l))
        return A @ A.T + l * np.eye(l)

    H, G = draw_H(), rng.standard_normal((q, l))
    if vary_G and q_fix:
        raise ValueError("a shared e block needs a constant G")
    repeat = set(repeat)
    shared = e_fix = None
    records = []
    for k in range(T):
        if vary_H:
            H = draw_H()
        if vary_G:
            G = rng.standard_normal((q, l))
        z0 = rng.uniform(-1.0, 1.0, l)
        f, e = rng.standard_normal(l) * 10, G @ z0 + rng.uniform(0.1, 1.0, q)
        if q_fix:
            if e_fix is None:
                e_fix = np.abs(G[:q_fix]).sum(axis=1) + 0.5
            e[:q_fix] = e_fix
        if k in repeat:
            if shared is None:
                shared = (f, e)
            f, e = shared
        qp = QPInstance(H, G, f.copy(), e.copy(), k)
        key = keygen(l, q, permute=permute, rng_seed=rng, step=k)
        c = encrypt(qp, key)
        y = solve_qp(c.H, c.G, c.f, c.e).primal
        z = decrypt_solution(y, key)
        records.append(StepRecord(k, qp, key, c, y, z, np.zeros(0), z.copy(), np.zeros(0)))
    return EpisodeLog(records, {"m": l, "l": l, "q": q, "q_fix": q_fix, "random_stream": True})


# ---------------------------------------------------------------------------
# attack pipeline


def _fingerprint(p: atk.InvariantPair) -> atk.InvariantPair:
    # row-order free summary of a permuted invariant pair
    return atk.InvariantPair(np.sort(p.M, axis=None), np.sort(p.v), p.step)


def choose_k_set(sets: Sequence[Sequence[int]]) -> list[int] | None:
    """Largest detected set; ties go to the set seeded earliest."""
    if not sets:
        return None
    return list(max(sets, key=len))


def _anchor_vector(anchor, ep: EpisodeLog, step_index: int, l: int) -> np.ndarray:
    if isinstance(anchor, str):
        if anchor == "zero":
            return np.zeros(l)
        if anchor == "oracle":
            return ep.records[step_index].z_star.copy()
        raise ValueError(f"unknown anchor policy {anchor!r}")
    z = np.asarray(anchor, dtype=float)
    if z.shape != (l,):
        raise ValueError(f"anchor must have length {l}")
    return z


def run_attack(ep: EpisodeLog, options: AttackOptions | None = None,
               output_dir=None) -> AttackMetrics:
    """Ciphertext-only reconstruction of the applied inputs.

    Raises
    ------
    AttackAbort
        With ``stage`` one of ``invariants``, ``detect``, ``permutation``,
        ``guess`` or ``reconstruct``.
    """
    opt = options or AttackOptions()
    if len(ep) < 2:
        raise AttackAbort("detect", "need at least two logged steps")
    view = ep.adversary_view()
    cs, ys = view.ciphertexts, view.y_stars
    steps = view.steps
    index = {k: i for i, k in enumerate(steps)}
    permuted = any(c.permuted for c in cs)

    try:
        pairs = [atk.invariants(c) for c in cs]
    except atk.AttackError as exc:
        raise AttackAbort("invariants", str(exc)) from exc

    # detection; permuted rows are compared through order-free fingerprints
    det_pairs = [_fingerprint(p) for p in pairs] if permuted else pairs
    spec = atk.detect_specs(det_pairs, opt.constancy_tol, opt.period_tol)
    log.info("spec1=%s sets=%s period=%s", spec.spec1, spec.spec3_sets, spec.period_estimate)
    if not spec.spec1:
        raise AttackAbort("guess", f"no constant H, G indicator (max M deviation "
                                   f"{spec.m_deviation:.3g} > {opt.constancy_tol:g})")
    k_set = list(opt.k_set) if opt.k_set is not None else choose_k_set(spec.spec3_sets)
    if not k_set or len(k_set) < 1:
        raise AttackAbort("detect", "no set of steps with constant v")

    recovery, ambiguity = None, {}
    usable = list(range(len(cs)))
    if permuted:
        ref = opt.known_permutation_step if opt.known_permutation_step is not None else k_set[0]
        known = ep.adversary_view(index[ref]).known_permutation
        if known is None:
            raise AttackAbort("permutation", f"no permutation recorded at step {ref}")
        kv = k_set if ref in k_set else None
        try:
            vtol = opt.constancy_tol if opt.vtol is None else opt.vtol
            pm = atk.resolve_permutations(pairs, known[1], ref, kv, opt.match_tol, vtol)
        except atk.AmbiguousMatching as exc:
            raise AttackAbort("permutation", str(exc)) from exc
        ambiguity = pm.ambiguity_sets
        usable = [i for i, k in enumerate(steps) if pm.absolute[k] is not None]
        missing = [k for k in k_set if pm.absolute[k] is None]
        if missing:
            raise AttackAbort("permutation", f"steps {missing} of the constant set stay ambiguous")
        cs = [permute_back(c, pm.absolute[c.step]) if i in usable else c
              for i, c in enumerate(cs)]
        truth = [ep.records[i].key.P for i in range(len(cs))]
        recovery = float(np.mean([pm.absolute[k] is not None and np.array_equal(pm.absolute[k], P)
                                  for k, P in zip(steps, truth)]))

    try:
        base = atk.guess_base(cs[index[k_set[0]]], opt.guess_method)
    except atk.AttackError as exc:
        raise AttackAbort("guess", str(exc)) from exc
    use_cs = [cs[i] for i in usable]
    use_ys = [ys[i] for i in usable]
    guesses = atk.align_guesses(use_cs, base)
    pos = {c.step: j for j, c in enumerate(use_cs)}

    anchor_step = k_set[-1]
    l = cs[0].l
    z_anchor = _anchor_vector(opt.anchor, ep, index[anchor_step], l)
    q_fix = opt.q_fix if opt.q_fix is not None else int(ep.config.get("q_fix", 0))
    try:
        kpos = [pos[k] for k in k_set]
        rec = atk.reconstruct_with_anchor([use_cs[j] for j in kpos], [use_ys[j] for j in kpos],
                                          [guesses[j] for j in kpos], z_anchor,
                                          q_fix or None, opt.rank_tol)
        if q_fix > l:
            # a shared leading block of e carries the solved step to every step
            solved_r = rec.guesses[k_set.index(anchor_step)].r
            rec = atk.extend_spec2(use_cs, use_ys, guesses, pos[anchor_step], solved_r, q_fix,
                                   opt.rank_tol)
        else:
            log.info("q_fix=%d <= l: inputs are reconstructed on the constant set only", q_fix)
            use_cs = [use_cs[j] for j in kpos]
    except atk.AttackError as exc:
        raise AttackAbort("reconstruct", str(exc)) from exc

    m = int(ep.config.get("m", l))
    rec_steps = [c.step for c in use_cs]
    u_hat = np.array([z[:m] for z in rec.z_hat])
    u_true = np.array([ep.records[index[k]].u[:m] for k in rec_steps])
    err = u_hat - u_true
    metrics = AttackMetrics(
        steps=rec_steps,
        signed_error=err,
        abs_error=np.abs(err),
        offset=err.mean(axis=0),
        offset_std=err.std(axis=0),
        u_hat=u_hat,
        u_true=u_true,
        spec=spec,
        k_set=k_set,
        anchor_step=anchor_step,
        anchor=z_anchor,
        rank_report=rec.rank_report,
        consistent=atk.all_consistent(rec, use_cs, opt.consistency_tol),
        guess_provenance=base.provenance,
        permutation_recovery_rate=recovery,
        permutation_ambiguity=ambiguity,
    )
    if output_dir is not None:
        write_metrics(metrics, output_dir)
    return metrics


def write_metrics(metrics: AttackMetrics, output_dir) -> dict[str, Path]:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": out / "metrics.json", "reconstructed": out / "reconstructed_inputs.csv"}
    paths["metrics"].write_text(json.dumps(metrics.to_dict(), indent=2))
    m = metrics.u_hat.shape[1]
    with paths["reconstructed"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", *(f"u{j + 1}_hat" for j in range(m)), *(f"u{j + 1}" for j in range(m)),
                    *(f"err{j + 1}" for j in range(m))])
        for k, uh, ut, e in zip(metrics.steps, metrics.u_hat, metrics.u_true,
                                metrics.signed_error):
            w.writerow([k, *map(repr, uh.tolist()), *map(repr, ut.tolist()),
                        *map(repr, e.tolist())])
    return paths


# ---------------------------------------------------------------------------
# self test


def selftest(n: int = 20, seed: int = 0) -> list[tuple[str, bool]]:
    """Quick invariant and round-trip checks on random instances."""
    from .numerics import solve_dual_qp

    rng = np.random.default_rng(seed)
    checks = {"roundtrip": True, "invariants": True, "duals": True, "json": True}
    for _ in range(n):
        l, q = 10, 60
        A = rng.standard_normal((l, l))
        H = A @ A.T + l * np.eye(l)
        G = rng.standard_normal((q, l))
        qp = QPInstance(H, G, 10 * rng.standard_normal(l), G @ rng.standard_normal(l) + 1.0)
        key = keygen(l, q, permute=False, rng_seed=rng)
        c = encrypt(qp, key)
        z = solve_qp(qp.H, qp.G, qp.f, qp.e)
        y = solve_qp(c.H, c.G, c.f, c.e)
        checks["roundtrip"] &= bool(np.abs(decrypt_solution(y.primal, key) - z.primal).max() <= 1e-6)
        p0 = atk.invariants(Ciphertext(qp.H, qp.G, qp.f, qp.e))
        p1 = atk.invariants(c)
        checks["invariants"] &= bool(
            np.linalg.norm(p1.M - p0.M) <= 1e-8 * np.linalg.norm(p0.M)
            and np.linalg.norm(p1.v - p0.v) <= 1e-8 * np.linalg.norm(p0.v))
        lam = solve_dual_qp(c.H, c.G, c.f, c.e)
        checks["duals"] &= bool(np.abs(lam - z.dual).max() <= 1e-6)
        k2 = TransformKey.from_dict(json.loads(json.dumps(key.to_dict())))
        checks["json"] &= bool(np.array_equal(k2.R, key.R) and np.array_equal(k2.r, key.r))
    return list(checks.items())
