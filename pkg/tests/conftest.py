import numpy as np
import pytest

from rtqp.cipher import QPInstance
from rtqp.harness import ScenarioConfig, run_scenario

# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def random_qp(rng, l=10, q=60, step=0) -> QPInstance:
    """SPD H, full-rank G and a strictly feasible right-hand side."""
    A = rng.standard_normal((l, l))
    H = A @ A.T + l * np.eye(l)
    G = rng.standard_normal((q, l))
    z0 = rng.standard_normal(l)
    return QPInstance(H, G, 10.0 * rng.standard_normal(l), G @ z0 + rng.uniform(0.1, 1.0, q), step)


def reference_qp(H, G, f, e):
    """Independent oracle: interior-point solve through cvxpy/Clarabel."""
    cp = pytest.importorskip("cvxpy")
    z = cp.Variable(H.shape[0])
    cons = [G @ z <= e]
    prob = cp.Problem(cp.Minimize(0.5 * cp.quad_form(z, cp.psd_wrap(H)) + f @ z), cons)
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)
    return np.asarray(z.value), np.asarray(cons[0].dual_value)


@pytest.fixture(scope="session")
def setpoint_log():
    return run_scenario(ScenarioConfig("setpoint", seed=1))[0]


@pytest.fixture(scope="session")
def tracking_log():
    return run_scenario(ScenarioConfig("tracking", seed=1))[0]


@pytest.fixture(scope="session")
def tracking_log_permuted():
    return run_scenario(ScenarioConfig("tracking", seed=2, permute=True))[0]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
