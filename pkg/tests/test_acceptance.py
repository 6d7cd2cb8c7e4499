"""Acceptance gate: one test per criterion, one summary line each.

The lines are printed at the end of the pytest session (see conftest.py).
"""
import time

import numpy as np

from conftest import ACCEPTANCE, random_qp
from rtqp import attack as atk
from rtqp.cipher import check_consistency, decrypt_solution, encrypt, keygen
from rtqp.harness import AttackOptions, ScenarioConfig, random_stream, run_attack, run_scenario
from rtqp.numerics import solve_dual_qp, solve_qp, solve_underdetermined

L, Q = 10, 60


def record(n, title, ok, detail):
    line = f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


def test_criterion_1_cipher_correctness():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        p = random_qp(rng, L, Q)
        key = keygen(L, Q, rng_seed=rng)
        c = encrypt(p, key)
        z = solve_qp(p.H, p.G, p.f, p.e).primal
        y = solve_qp(c.H, c.G, c.f, c.e).primal
        worst = max(worst, np.abs(decrypt_solution(y, key) - z).max())
    dt = time.perf_counter() - t0
    record(1, "cipher round trip", worst <= 1e-6 and dt < 10.0,
           f"max |z - (R y + r)|_inf = {worst:.2e} (<= 1e-6), {dt:.2f} s (< 10 s)")


def test_criterion_2_invariants_and_duals():
    rng = np.random.default_rng(202)
    dM = dv = dlam = 0.0
    for _ in range(100):
        p = random_qp(rng, L, Q)
        key = keygen(L, Q, rng_seed=rng)
        c = encrypt(p, key)
        Hinv = np.linalg.inv(p.H)
        M, v = p.G @ Hinv @ p.G.T, p.G @ Hinv @ p.f + p.e
        pair = atk.invariants(c)
        dM = max(dM, np.linalg.norm(pair.M - M, "fro") / np.linalg.norm(M, "fro"))
        dv = max(dv, np.linalg.norm(pair.v - v) / np.linalg.norm(v))
        lam = solve_qp(p.H, p.G, p.f, p.e).dual
        lam_t = solve_qp(c.H, c.G, c.f, c.e).dual
        lam_d = solve_dual_qp(c.H, c.G, c.f, c.e)
        dlam = max(dlam, np.abs(lam - lam_t).max(), np.abs(lam - lam_d).max())
    ok = dM <= 1e-8 and dv <= 1e-8 and dlam <= 1e-6
    record(2, "invariants and duals", ok,
           f"rel dev M {dM:.1e}, v {dv:.1e} (<= 1e-8); dual gap {dlam:.1e} (<= 1e-6)")


def test_criterion_3_svd_guess(setpoint_log, tracking_log):
    worst = 0.0
    for rec in setpoint_log.records + tracking_log.records:
        _, res = check_consistency(atk.svd_guess(rec.ciphertext), rec.ciphertext)
        worst = max(worst, res["H"], res["G"])
    # distinct spectrum under constant H, G: cross-instance equality
    gs = [atk.svd_guess(r.ciphertext) for r in random_stream(20, seed=303).records]
    distinct = not any(g.meta["tied"] for g in gs)
    dH = max(np.abs(g.H - gs[0].H).max() / np.abs(gs[0].H).max() for g in gs)
    dG = max(np.abs(g.G - gs[0].G).max() for g in gs)
    # robot instance: tied spectrum, so only H^ is compared and G^ is skipped
    rg = [atk.svd_guess(r.ciphertext) for r in setpoint_log.records]
    dH_robot = max(np.abs(g.H - rg[0].H).max() / np.abs(rg[0].H).max() for g in rg)
    tied = all(g.meta["tied"] for g in rg)
    ok = worst <= 1e-6 and distinct and dH <= 1e-6 and dG <= 1e-6 and dH_robot <= 1e-6
    record(3, "svd guess", ok,
           f"max consistency residual {worst:.1e} on {len(setpoint_log) + len(tracking_log)} MPC steps; "
           f"distinct-spectrum stream dH {dH:.1e}, dG {dG:.1e}; robot dH {dH_robot:.1e} "
           f"(G^ check skipped, tied spectrum={tied})")


def test_criterion_4_rank_structure(setpoint_log):
    cs = [r.ciphertext for r in setpoint_log.records]
    ys = [r.y_star for r in setpoint_log.records]
    gs = atk.align_guesses(cs, atk.structure_guess(cs[8]))
    report, ok = [], True
    for s in (1, 2, 3):
        idx = list(range(8, 8 + s))
        A, b, lay = atk.build_multi_instance_system([cs[i] for i in idx], [gs[i] for i in idx])
        sol = solve_underdetermined(A, b, 1e-10)
        Aa, ba = atk.anchor_rows(lay, 0, gs[idx[0]].R, ys[idx[0]], np.zeros(L))
        full = solve_underdetermined(np.vstack([A, Aa]), np.concatenate([b, ba]), 1e-10)
        ok &= sol.rank == Q + L * s and sol.nullspace_dim == L and full.nullspace_dim == 0
        report.append(f"s={s}: rank {sol.rank}/{Q + L * s}, null {sol.nullspace_dim}, "
                      f"anchored null {full.nullspace_dim}")
    record(4, "rank structure", ok, "; ".join(report))


def test_criterion_5_setpoint_experiment():
    t0 = time.perf_counter()
    cfg = ScenarioConfig("setpoint", seed=5)
    ep, _ = run_scenario(cfg)
    m = run_attack(ep, AttackOptions.from_scenario(cfg))
    dt = time.perf_counter() - t0
    has_K1 = any(set(range(8, 21)) <= set(K) for K in m.spec.spec3_sets)
    ok = m.spec.spec1 and has_K1 and m.max_abs_error <= 1e-3 and dt < 30.0
    record(5, "setpoint experiment", ok,
           f"spec1={m.spec.spec1}, K={m.k_set} (contains 8..20: {has_K1}, tol "
           f"{cfg.tolerances['constancy']:g}), max input error {m.max_abs_error:.2e} over "
           f"{len(m.steps)} steps (<= 1e-3), {dt:.2f} s (< 30 s)")


def _tracking(phase):
    cfg = ScenarioConfig("tracking", seed=6, circle_phase=phase)
    ep, _ = run_scenario(cfg)
    return run_attack(ep, AttackOptions.from_scenario(cfg))


def test_criterion_6_tracking_experiment():
    m = _tracking(None)
    has_K2 = any({10, 30, 50} <= set(K) for K in m.spec.spec3_sets)
    e2 = float(m.abs_error[:, 1].mean())
    ok = m.spec.period_estimate == 20 and has_K2 and np.all(m.offset_std <= 1e-3) and e2 <= 5e-2
    # for transparency: the same run with the reference sampled at phase 0
    m0 = _tracking(0.0)
    e2_0 = float(m0.abs_error[:, 1].mean())
    record(6, "tracking experiment", ok,
           f"period {m.spec.period_estimate}, K={m.k_set}, offset {np.round(m.offset, 4).tolist()} "
           f"std {m.offset_std.max():.1e} (<= 1e-3), component-2 mean |err| {e2:.1e} (<= 5e-2); "
           f"phase-0 reference: K={m0.k_set}, component-2 mean |err| {e2_0:.2f}")


def test_criterion_7_permutations(tracking_log_permuted):
    ep = random_stream(50, seed=707, permute=True)
    pairs = [atk.invariants(r.ciphertext) for r in ep.records]
    pm = atk.resolve_permutations(pairs, ep.records[0].key.P)
    exact = sum(pm.absolute[r.k] is not None and np.array_equal(pm.absolute[r.k], r.key.P)
                for r in ep.records)
    tp = tracking_log_permuted
    pairs = [atk.invariants(r.ciphertext) for r in tp.records]
    P10 = tp.records[10].key.P
    plain = atk.resolve_permutations(pairs, P10, 10, tol=1e-6)
    n_amb = len(plain.ambiguity_sets)
    refined = atk.resolve_permutations(pairs, P10, 10, [10, 30, 50], tol=1e-6, vtol=1e-3)
    fixed = sum(refined.absolute[k] is not None and np.array_equal(refined.absolute[k],
                                                                 tp.records[k].key.P)
                for k in (10, 30, 50))
    ok = exact == 50 and n_amb > 0 and all(k in plain.ambiguity_sets for k in (10, 30, 50)) \
        and fixed == 3
    record(7, "permutations", ok,
           f"generic stream {exact}/50 exact; robot: {n_amb}/{len(tp)} steps report ambiguity "
           f"sets with M' alone, v' refinement on K={{10,30,50}} resolves {fixed}/3 exactly")


def test_criterion_8_negative_control():
    false_pos = 0
    flagged = 0
    for seed in range(20):
        ep = random_stream(50, seed=800 + seed, vary_H=True)
        pairs = [atk.invariants(r.ciphertext) for r in ep.records]
        rep = atk.detect_specs(pairs, 1e-6)
        flagged += rep.spec1
        M0 = pairs[0].M
        false_pos += sum(np.linalg.norm(p.M - M0) <= 1e-6 * np.linalg.norm(M0) for p in pairs[1:])
    ok = flagged == 0 and false_pos == 0
    record(8, "negative control", ok,
           f"spec1 reported in {flagged}/20 episodes, {false_pos} of 980 steps within 1e-6 of M_0")
