import numpy as np
import pytest
from scipy.linalg import solve_discrete_lyapunov

from stochmpc.model import (
    Allocation,
    ChanceConstraintSpec,
    LtiSystem,
    Polytope,
    QuadraticStageCost,
    TerminalIngredients,
    check_terminal_admissibility,
    lyapunov_residuals,
    terminal_cost_from_lyapunov,
    validate_closed_loop_stability,
)

import oracles
from problems import integrator_problem


def test_system_shapes_validated():
    with pytest.raises(ValueError):
        LtiSystem([[1.0, 0.0]], [[1.0]], [[1.0]])
    with pytest.raises(ValueError):
        LtiSystem([[1.0]], [[1.0], [1.0]], [[1.0]])
    with pytest.raises(ValueError):
        LtiSystem([[1.0]], [[1.0]], [[-1.0]])
    with pytest.raises(ValueError):
        LtiSystem(np.eye(2), np.ones((2, 1)), [[1.0, 0.5], [0.0, 1.0]])


def test_arrays_are_read_only():
    sys = LtiSystem([[1.0]], [[1.0]], [[1.0]])
    with pytest.raises(ValueError):
        sys.A[0, 0] = 2.0


def test_closed_loop_and_spectral_radius():
    sys = LtiSystem([[1.0]], [[1.0]], [[1.0]])
    np.testing.assert_allclose(sys.closed_loop([[-0.5]]), [[0.5]])
    assert validate_closed_loop_stability(sys, [[-0.5]]) == pytest.approx(0.5)
    assert validate_closed_loop_stability(sys, [[0.0]]) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        sys.closed_loop([[1.0, 2.0]])


def test_stage_cost_evaluation():
    c = QuadraticStageCost([[2.0]], [1.0], [[3.0]], [-1.0])
    assert c([2.0], [1.0]) == pytest.approx(2 * 4 + 2 + 3 - 1)
    with pytest.raises(ValueError):
        QuadraticStageCost([[-1.0]], [0.0], [[0.0]], [0.0])


def test_polytope_membership():
    box = Polytope([[1.0], [-1.0]], [1.0, 1.0])
    assert box.contains([0.5]) and not box.contains([1.5])
    assert box.contains([1.0 + 1e-10], tol=1e-9)
    assert box.contains_origin()
    pt = Polytope.singleton([1.0, 2.0])
    assert pt.is_singleton and pt.dim == 2
    assert pt.contains([1.0, 2.0]) and not pt.contains([1.0, 2.1])


def test_chance_levels():
    sys, cost, chance = integrator_problem()
    np.testing.assert_allclose(chance.levels(), [0.8061, 0.8061])
    per_row = ChanceConstraintSpec(chance.set, 0.8, Allocation.PER_ROW, (0.9, 0.95))
    np.testing.assert_allclose(per_row.levels(), [0.9, 0.95])
    with pytest.raises(ValueError):
        ChanceConstraintSpec(chance.set, 1.0)
    with pytest.raises(ValueError):
        ChanceConstraintSpec(chance.set, 0.8, "per-row", (0.9,))


def test_terminal_weight_integrator():
    sys, cost, _ = integrator_problem()
    Pf, pf = terminal_cost_from_lyapunov(sys, [[-0.5]], cost)
    assert Pf[0, 0] == pytest.approx(oracles.PF_TABLE1, abs=1e-10)
    np.testing.assert_allclose(pf, [0.0])


def test_terminal_weight_matches_scipy_lyapunov():
    rng = np.random.default_rng(4)
    for _ in range(20):
        A = rng.normal(size=(3, 3))
        B = rng.normal(size=(3, 2))
        K = rng.normal(size=(2, 3)) * 0.1
        AK = A + B @ K
        A = A / (1.2 * max(np.max(np.abs(np.linalg.eigvals(AK))), 1.0))
        sys = LtiSystem(A, B, np.eye(3))
        if validate_closed_loop_stability(sys, K) >= 0.95:
            continue
        M = rng.normal(size=(3, 3))
        cost = QuadraticStageCost(M @ M.T, rng.normal(size=3), np.eye(2), rng.normal(size=2))
        Pf, pf = terminal_cost_from_lyapunov(sys, K, cost)
        AK = sys.closed_loop(K)
        ref = solve_discrete_lyapunov(AK.T, cost.Q + K.T @ cost.R @ K)
        np.testing.assert_allclose(Pf, ref, atol=1e-9)
        pf_ref = np.linalg.solve(np.eye(3) - AK.T, cost.q + K.T @ cost.r)
        np.testing.assert_allclose(pf, pf_ref, atol=1e-9)
        assert max(lyapunov_residuals(sys, K, cost, Pf, pf)) < 1e-10


def test_terminal_weight_requires_schur():
    sys, cost, _ = integrator_problem()
    with pytest.raises(ValueError):
        terminal_cost_from_lyapunov(sys, [[0.0]], cost)


def _ingredients(Xf, Kf=-0.5):
    return TerminalIngredients(Xf=Xf, Kf=[[Kf]], Pf=[[4 / 3]], pf=[0.0], K=[[-0.5]])


def test_admissibility_origin_and_box():
    sys, _, _ = integrator_problem()
    zbar = Polytope([[0.0, 1.0], [0.0, -1.0]], [0.25, 0.25])
    assert check_terminal_admissibility(sys, _ingredients(Polytope.singleton([0.0])), zbar)
    small = Polytope([[1.0], [-1.0]], [0.5, 0.5])
    assert check_terminal_admissibility(sys, _ingredients(small), zbar)
    big = Polytope([[1.0], [-1.0]], [10.0, 10.0])
    report = check_terminal_admissibility(sys, _ingredients(big), zbar)
    assert not report and any("tightened row" in f for f in report.failures)


def test_admissibility_detects_non_invariance():
    sys, _, _ = integrator_problem()
    zbar = Polytope([[0.0, 1.0], [0.0, -1.0]], [5.0, 5.0])
    # Kf = +0.5 makes A + B Kf = 1.5, which leaves any bounded box
    report = check_terminal_admissibility(sys, _ingredients(Polytope([[1.0], [-1.0]], [1.0, 1.0]), Kf=0.5), zbar)
    assert not report and any("invariance" in f for f in report.failures)
    off_origin = _ingredients(Polytope.singleton([1.0]))
    assert not check_terminal_admissibility(sys, off_origin, zbar)


def test_admissibility_unbounded_halfspace():
    sys = LtiSystem([[0.75]], [[1.0]], [[1.0]])
    term = TerminalIngredients(Xf=Polytope([[-1.0]], [0.0]), Kf=[[0.0]], Pf=[[0.0]], pf=[0.0], K=[[0.0]])
    zbar = Polytope([[-1.0, 0.0]], [0.0])
    assert check_terminal_admissibility(sys, term, zbar)
