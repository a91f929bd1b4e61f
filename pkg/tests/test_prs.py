import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochmpc.model import ChanceConstraintSpec, Polytope
from stochmpc.prs import (
    PrsMode,
    PrsShape,
    PrsSpec,
    chebyshev_level,
    chi2_level,
    propagate_variance,
    row_tightening,
    standard_normal_quantile,
    tighten,
)

import oracles
from problems import halfspace_problem, integrator_problem


def test_oracle_values_frozen():
    for name, value in oracles.FROZEN.items():
        assert getattr(oracles, name) == pytest.approx(value, abs=1e-12), name


@pytest.mark.parametrize("p", [0.5, 0.8061, 0.814, 0.90305, 0.95, 0.999, 1e-4])
def test_normal_quantile_against_erf_bisection(p):
    assert standard_normal_quantile(p) == pytest.approx(oracles.normal_quantile(p), abs=1e-9)


@pytest.mark.parametrize("p", [0.5, 0.814, 0.95])
@pytest.mark.parametrize("dof", [1, 2])
def test_chi2_level_against_closed_form(p, dof):
    assert chi2_level(p, dof) == pytest.approx(oracles.chi2_quantile(p, dof), rel=1e-9)


def test_levels_reject_out_of_range():
    for f in (standard_normal_quantile, lambda p: chebyshev_level(p, 1), lambda p: chi2_level(p, 1)):
        with pytest.raises(ValueError):
            f(1.0)
        with pytest.raises(ValueError):
            f(0.0)


def test_stationary_variances():
    v = propagate_variance([[0.5]], [[1.0]], 10)
    assert v.sigma_inf[0, 0] == pytest.approx(oracles.SIGMA_INF_TABLE1, abs=1e-11)
    assert v.converged_at is not None and v.converged_at > 10
    v = propagate_variance([[0.75]], [[1.0]], 10)
    assert v.sigma_inf[0, 0] == pytest.approx(oracles.SIGMA_INF_APPB, abs=1e-11)
    np.testing.assert_allclose(v.sigmas[:3, 0, 0], [0.0, 1.0, 1.5625])
    assert v.at(10**6)[0, 0] == pytest.approx(16 / 7, abs=1e-11)


def test_non_schur_limit_rejected():
    v = propagate_variance([[1.0]], [[1.0]], 5, stationary=False)
    np.testing.assert_allclose(v.sigmas[:, 0, 0], np.arange(6))
    with pytest.raises(IndexError):
        v.at(6)
    with pytest.raises(ValueError):
        propagate_variance([[1.0]], [[1.0]], 5, stationary=True)


@st.composite
def schur_pairs(draw):
    n = draw(st.integers(1, 3))
    vals = st.floats(-1.0, 1.0, allow_nan=False)
    A = np.array(draw(st.lists(vals, min_size=n * n, max_size=n * n))).reshape(n, n)
    rho = max(np.max(np.abs(np.linalg.eigvals(A))), 1e-3)
    A = A * draw(st.floats(0.1, 0.97)) / rho
    M = np.array(draw(st.lists(vals, min_size=n * n, max_size=n * n))).reshape(n, n)
    return A, M @ M.T + 1e-3 * np.eye(n)


@settings(max_examples=60, deadline=None)
@given(schur_pairs())
def test_variance_loewner_monotone(pair):
    A, W = pair
    v = propagate_variance(A, W, 25)
    for k in range(25):
        assert np.min(np.linalg.eigvalsh(v.sigmas[k + 1] - v.sigmas[k])) >= -1e-9
    assert np.min(np.linalg.eigvalsh(v.sigma_inf - v.sigmas[-1])) >= -1e-9


@settings(max_examples=100, deadline=None)
@given(
    st.floats(0.05, 0.995),
    st.sampled_from(list(PrsShape)),
    st.floats(0.1, 5.0),
    st.floats(-2.0, 2.0).filter(lambda x: abs(x) > 1e-3),
)
def test_chebyshev_margins_dominate_gaussian(p, shape, sigma, c):
    g = row_tightening([c], [], np.zeros((0, 1)), [[sigma]], p, PrsSpec(PrsMode.GAUSSIAN, shape))
    ch = row_tightening([c], [], np.zeros((0, 1)), [[sigma]], p, PrsSpec(PrsMode.CHEBYSHEV, shape))
    assert ch >= g - 1e-12


def test_integrator_input_margin():
    _, _, chance = integrator_problem()
    v = propagate_variance([[0.5]], [[1.0]], 10)
    t = tighten(chance, [[-0.5]], v, PrsSpec())
    np.testing.assert_allclose(t.margins_inf, [oracles.TABLE1_U_MARGIN] * 2, atol=1e-12)
    np.testing.assert_allclose(t.offsets(3), [1 - oracles.TABLE1_U_MARGIN] * 2, atol=1e-12)
    assert t.horizon == 1


@pytest.mark.parametrize(
    "shape, margin",
    [("symmetric", oracles.APPB_SYM_MARGIN), ("one-sided", oracles.APPB_ONE_SIDED_MARGIN),
     ("ellipsoidal", oracles.APPB_SYM_MARGIN)],
)
def test_halfspace_example_margins(shape, margin):
    _, _, chance = halfspace_problem()
    v = propagate_variance([[0.75]], [[1.0]], 10)
    t = tighten(chance, [[0.0]], v, PrsSpec(shape=shape))
    assert t.margins_inf[0] == pytest.approx(margin, abs=1e-12)


def test_ellipsoidal_two_dimensional_level():
    spec = PrsSpec(shape="ellipsoidal")
    sigma = np.diag([2.0, 0.5])
    d = row_tightening([1.0, 0.0], [], np.zeros((0, 2)), sigma, 0.9, spec)
    assert d == pytest.approx(np.sqrt(2.0) * np.sqrt(oracles.chi2_quantile(0.9, 2)), rel=1e-9)


def test_time_varying_margins_grow():
    _, _, chance = integrator_problem()
    v = propagate_variance([[0.5]], [[1.0]], 60)
    t = tighten(chance, [[-0.5]], v, PrsSpec(stationary=False))
    assert t.margins[0, 0] == 0.0
    assert np.all(np.diff(t.margins[0]) >= -1e-15)
    assert t.margins[0, -1] == pytest.approx(oracles.TABLE1_U_MARGIN, abs=1e-9)
    assert t.margin(10**6)[0] == pytest.approx(oracles.TABLE1_U_MARGIN, abs=1e-12)


def test_zero_direction_rows_need_no_covariance():
    _, _, chance = integrator_problem()
    v = propagate_variance([[1.0]], [[1.0]], 10, stationary=False)
    t = tighten(chance, [[0.0]], v, PrsSpec(stationary=True))
    np.testing.assert_allclose(t.margins_inf, [0.0, 0.0])
    state_row = ChanceConstraintSpec(Polytope([[1.0, 0.0]], [1.0]), 0.8)
    with pytest.raises(ValueError):
        tighten(state_row, [[0.0]], v, PrsSpec(stationary=True))


def test_empty_tightened_set_rejected():
    chance = ChanceConstraintSpec(Polytope([[0.0, 1.0], [0.0, -1.0]], [0.1, 0.1]), 0.95)
    v = propagate_variance([[0.5]], [[1.0]], 10)
    with pytest.raises(ValueError, match="empty"):
        tighten(chance, [[-0.5]], v, PrsSpec())
