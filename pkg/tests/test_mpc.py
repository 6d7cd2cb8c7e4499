import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rtqp.attack import invariants
from rtqp.cipher import decrypt_solution
from rtqp.mpc import (Circle, CondensedMPC, EpisodeAborted, MPCConfig, PlantModel, PlantState,
                      Setpoint, build_condensed_qp, closed_loop, identity_keys, mobile_robot,
                      random_keys, reference)
from rtqp.numerics import solve_qp

X0 = np.array([10.0, -2.0, 10.0, 2.0])


def rollout(model, x, z, N):
    """States x(k+1..k+N) by direct simulation."""
    m = model.m
    xs = []
    for i in range(N):
        x = model.A @ x + model.B @ z[i * m:(i + 1) * m]
        xs.append(x)
    return xs


def stage_cost(model, cfg, state, z):
    """Tracking plus rate cost evaluated by simulation, no condensation."""
    N, m = cfg.N, model.m
    refs = reference(cfg, state.k + 1, N)
    cost, u_prev = 0.0, state.u_prev
    for i, x in enumerate(rollout(model, state.x, z, N)):
        dy = model.C @ x - refs[i]
        u = z[i * m:(i + 1) * m]
        cost += dy @ cfg.Q @ dy + (u - u_prev) @ cfg.R @ (u - u_prev)
        u_prev = u
    return cost


def test_dimensions():
    mpc = CondensedMPC(mobile_robot(), MPCConfig())
    assert (mpc.l, mpc.q, mpc.q_fix) == (10, 60, 20)
    qp = mpc.qp(PlantState(X0, np.zeros(2), 0))
    assert qp.H.shape == (10, 10) and qp.G.shape == (60, 10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["setpoint", "circle"]))
def test_condensation_matches_rollout(seed, ref):
    rng = np.random.default_rng(seed)
    model = mobile_robot()
    cfg = MPCConfig(reference=Setpoint() if ref == "setpoint" else Circle())
    state = PlantState(rng.uniform(-5, 5, 4), rng.uniform(-1, 1, 2), int(rng.integers(0, 40)))
    qp = build_condensed_qp(model, cfg, state)
    z1, z2 = rng.standard_normal(10), rng.standard_normal(10)
    # the QP objective equals half the simulated cost up to a z-independent constant
    obj = lambda z: 0.5 * z @ qp.H @ z + qp.f @ z  # noqa: E731
    d_qp = obj(z1) - obj(z2)
    d_sim = stage_cost(model, cfg, state, z1) - stage_cost(model, cfg, state, z2)
    assert d_qp == pytest.approx(d_sim, rel=1e-9, abs=1e-9)
    # constraint rows: input bounds, then per step upper and lower state bounds
    xs = rollout(model, state.x, z1, cfg.N)
    want = [z1 - 1.0, -z1 - 1.0]
    for x in xs:
        want += [x - model.x_hi, model.x_lo - x]
    assert np.allclose(qp.G @ z1 - qp.e, np.concatenate(want), atol=1e-10)


def test_constant_H_G_and_fixed_e():
    mpc = CondensedMPC(mobile_robot(), MPCConfig(reference=Circle()))
    a = mpc.qp(PlantState(X0, np.zeros(2), 0))
    b = mpc.qp(PlantState(np.array([1.0, 0.5, -3.0, 0.0]), np.array([0.2, -0.1]), 7))
    assert np.array_equal(a.H, b.H) and np.array_equal(a.G, b.G)
    assert np.array_equal(a.e[:mpc.q_fix], b.e[:mpc.q_fix])
    assert not np.allclose(a.e[mpc.q_fix:], b.e[mpc.q_fix:])
    assert not np.allclose(a.f, b.f)
    l = mpc.l
    assert np.array_equal(a.G[:l], np.eye(l)) and np.array_equal(a.G[l:2 * l], -np.eye(l))


def test_equilibrium_solution_is_zero():
    qp = build_condensed_qp(mobile_robot(), MPCConfig(), PlantState(np.zeros(4), np.zeros(2), 0))
    assert np.array_equal(qp.f, np.zeros(10))
    assert qp.e.min() >= 0
    assert np.abs(solve_qp(qp.H, qp.G, qp.f, qp.e).primal).max() <= 1e-12


def test_reference():
    assert np.array_equal(reference(MPCConfig(), 13, 3), np.zeros((3, 2)))
    cfg = MPCConfig(reference=Circle())
    assert reference(cfg, 0)[0] == pytest.approx([10.0, 0.0])
    assert reference(cfg, 20)[0] == pytest.approx(reference(cfg, 0)[0], abs=1e-12)
    # counterclockwise: a quarter period later the reference sits on the +y axis
    assert reference(cfg, 5)[0] == pytest.approx([0.0, 10.0], abs=1e-12)
    r = reference(cfg, 3, 5)
    assert r.shape == (5, 2) and r[2] == pytest.approx(reference(cfg, 5)[0])
    with pytest.raises(ValueError):
        reference(cfg, -1)


def test_validation():
    m = mobile_robot()
    with pytest.raises(ValueError):
        PlantModel(m.A, m.B, m.C, m.x_hi, m.x_lo, m.u_lo, m.u_hi)
    with pytest.raises(ValueError):
        PlantModel(m.A[:3], m.B, m.C, m.x_lo, m.x_hi, m.u_lo, m.u_hi)
    with pytest.raises(ValueError):
        MPCConfig(N=0)
    with pytest.raises(ValueError):
        MPCConfig(R=np.zeros((2, 2)))


def test_identity_keys_send_plaintext():
    ep = closed_loop(mobile_robot(), MPCConfig(), X0, np.zeros(2), 5, identity_keys)
    for rec in ep.records:
        for name in ("H", "G", "f", "e"):
            assert np.array_equal(getattr(rec.ciphertext, name), getattr(rec.qp, name))
        assert np.array_equal(rec.y_star, rec.z_star)


def test_setpoint_closed_loop(setpoint_log):
    model = mobile_robot()
    ep = setpoint_log
    assert len(ep) == 21 and [r.k for r in ep.records] == list(range(21))
    for rec in ep.records:
        assert np.allclose(decrypt_solution(rec.y_star, rec.key), rec.z_star, rtol=0, atol=0)
        assert np.array_equal(rec.u, rec.z_star[:2])
        assert np.all(rec.x <= model.x_hi + 1e-6) and np.all(rec.x >= model.x_lo - 1e-6)
        assert np.all(np.abs(rec.u) <= 1 + 1e-6)
        assert np.array_equal(rec.qp.H, ep.records[0].qp.H)
        assert np.array_equal(rec.qp.G, ep.records[0].qp.G)
    # outputs settle: the running maximum of |y| over the tail falls below 1e-3
    y = np.array([np.linalg.norm(model.C @ r.x) for r in ep.records])
    tail_max = np.maximum.accumulate(y[::-1])[::-1]
    assert tail_max[11] <= 0.1 and tail_max[17] <= 3e-3
    # on {8..20} the invariant v is constant up to the transient of the second axis
    v = [invariants(r.ciphertext).v for r in ep.records]
    rel = [np.linalg.norm(v[k] - v[8]) / np.linalg.norm(v[8]) for k in range(8, 21)]
    assert max(rel) <= 5e-2


def test_tracking_v_norm_repeats(tracking_log):
    v = np.array([np.linalg.norm(invariants(r.ciphertext).v) for r in tracking_log.records])
    assert abs(v[30] - v[10]) <= 1e-3 * v[10]
    assert abs(v[50] - v[10]) <= 1e-3 * v[10]


def test_infeasible_state_aborts():
    x0 = np.array([19.9, 5.0, 0.0, 0.0])  # x1 overshoots 20 whatever the input
    with pytest.raises(EpisodeAborted) as info:
        closed_loop(mobile_robot(), MPCConfig(), x0, np.zeros(2), 3, random_keys(0))
    assert info.value.step == 0
    with pytest.raises(ValueError):
        closed_loop(mobile_robot(), MPCConfig(), X0, np.zeros(2), 0)


def test_random_keys_reproducible():
    a = closed_loop(mobile_robot(), MPCConfig(), X0, np.zeros(2), 3, random_keys(4, permute=True))
    b = closed_loop(mobile_robot(), MPCConfig(), X0, np.zeros(2), 3, random_keys(4, permute=True))
    for ra, rb in zip(a.records, b.records):
        assert np.array_equal(ra.key.P, rb.key.P) and np.array_equal(ra.ciphertext.G, rb.ciphertext.G)
        assert ra.ciphertext.permuted
    assert a.config == {"N": 5, "m": 2, "l": 10, "q": 60, "q_fix": 20}
