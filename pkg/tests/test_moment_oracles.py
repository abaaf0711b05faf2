import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from app.errors import DomainError, InvalidArgumentError
from app.services import moment_oracles as mo


def test_first_chain_expectations():
    assert mo.I_n_chain(0, 0.7) == pytest.approx(0.7)
    assert mo.I_n_chain(1, 0.7) == pytest.approx(0.7 ** 3 / 6)
    assert mo.I_n_chain(3, 0.0) == 0.0
    # alive-only chain: t^2 e^(rate t)
    assert mo.J_n_chain(0, 0.7, 2.0) == pytest.approx(0.49 * math.exp(1.4))


def test_negative_order_is_rejected():
    with pytest.raises(DomainError):
        mo.I_n_chain(-1, 1.0)
    with pytest.raises(DomainError):
        mo.J_n_chain(1, 1.0, 0.0)


@pytest.mark.parametrize("c", [0.5, 2.0])
def test_chain_series_is_sinh(c):
    t, f = 0.7, 1.3
    assert mo.chain_series_solution(t, f, c) == pytest.approx(f * math.sinh(math.sqrt(c) * t) / math.sqrt(c), rel=1e-12)


def test_chain_series_negative_coefficient_is_sine():
    assert mo.chain_series_solution(0.9, 1.0, -1.0) == pytest.approx(math.sin(0.9), rel=1e-12)


@pytest.mark.parametrize("p", [2, 3, 4])
def test_depril_matches_repeated_convolution(p):
    seq = [1.0, 0.5, 0.25, -0.1, 0.3, 0.05]
    expected = np.array([1.0])
    for _ in range(p):
        expected = np.convolve(expected, seq)
    got = mo.depril_convolution_power(seq, p, 5)
    np.testing.assert_allclose(got, expected[:6], rtol=1e-12, atol=1e-14)


def test_depril_needs_nonzero_lead():
    with pytest.raises(DomainError):
        mo.depril_convolution_power([0.0, 1.0], 2, 3)


def test_first_a_and_b_terms():
    assert mo.a_sequence(2, 1)[1] == pytest.approx(1.0 / 12.0)
    assert mo.b_sequence(2, 1)[1] == pytest.approx(1.0 / 210.0)
    with pytest.raises(InvalidArgumentError):
        mo.a_sequence(1, 3)


@pytest.mark.parametrize("p", [2, 3])
def test_tree_series_solves_the_constant_data_ode(p):
    t, f, c = 0.6, 0.4, 0.7
    sol = solve_ivp(lambda s, y: [y[1], c * y[0] ** p], (0.0, t), [0.0, f], rtol=1e-12, atol=1e-14)
    assert mo.tree_series_solution(t, f, c, p) == pytest.approx(sol.y[0, -1], rel=1e-9)


@pytest.mark.parametrize("p", [2, 3, 5])
def test_moment_bound_audits_hold(p):
    audits = mo.audit_moment_bounds(p, 25)
    failed = [a for a in audits if not a.passed]
    assert not failed, failed


def test_q_generating_function_ode():
    assert mo.generating_residual(3) < 1e-9


def test_moment_table_shapes():
    chain = mo.moment_table(1, 1.0, 0.5, 6)
    assert len(chain.I) == len(chain.J) == len(chain.pmf) == 7
    assert chain.a == []
    tree = mo.moment_table(2, 1.0, 0.5, 6)
    assert len(tree.a) == 7
    assert tree.mean == pytest.approx(math.expm1(0.5))
    assert tree.I[1] == pytest.approx(0.5 ** 4 / 12)


def test_conditioned_chain_matches_closed_form():
    res = mo.chain_weight_moments(1, 0.8, 1.0, M=6000, seed=13)
    target = mo.I_n_chain(1, 0.8)
    assert abs(res["mean"] - target) < 5 * res["mean_std_error"]
    second = mo.J_n_chain(1, 0.8, 1.0)
    assert abs(res["second"] - second) < 5 * res["second_std_error"]


def test_conditioned_tree_matches_closed_form():
    res = mo.tree_weight_moments(1, 2, 0.8, 1.0, M=6000, seed=21)
    target = mo.I_np(1, 2, 0.8)
    assert abs(res["mean"] - target) < 5 * res["mean_std_error"]
    assert res["kept"] > 0


def test_zero_horizon_chains_are_all_kept_with_zero_weight():
    res = mo.chain_weight_moments(0, 0.0, 1.0, M=10, seed=1)
    assert res["kept"] == 10
    assert res["mean"] == 0.0
    assert res["mean_std_error"] == 0.0
    assert res["conditional_mean"] == 0.0


def test_conditioned_moments_need_two_samples():
    with pytest.raises(InvalidArgumentError):
        mo.chain_weight_moments(0, 0.5, 1.0, M=1, seed=1)
