import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from pydantic import ValidationError
from scipy.special import gammaln

from app.errors import InvalidArgumentError
from app.models.wave_models import BranchingConfig, LifetimeLaw
from app.services import branching_engine as be
from app.services.stochastic_kernels import sample_rng


def _cfg(p, t=1.0, d=1, rate=1.0, cap=1_000_000):
    return BranchingConfig(p=p, t=t, x=np.zeros(d), law=LifetimeLaw(rate=rate), d=d, particle_cap=cap)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_chain_is_a_single_line_ending_alive(d):
    cfg = _cfg(1, t=1.5, d=d)
    for i in range(30):
        tree = be.simulate(cfg, sample_rng(3, i))
        be.check_tree_invariants(tree, cfg)
        assert tree.alive_set.tolist() == [tree.size - 1]
        assert tree.branch_count == tree.size - 1


@pytest.mark.parametrize("p", [2, 3])
def test_tree_alive_count(p):
    cfg = _cfg(p, t=0.8, d=2)
    for i in range(30):
        tree = be.simulate(cfg, sample_rng(1, i))
        be.check_tree_invariants(tree, cfg)
        assert tree.alive_set.size == (p - 1) * tree.branch_count + 1
        assert np.all(tree.death[tree.alive] == 0.8)


def test_zero_horizon_gives_a_lone_root():
    tree = be.simulate(_cfg(2, t=0.0), sample_rng(0, 0))
    assert tree.size == 1
    assert tree.alive[0]
    np.testing.assert_array_equal(tree.position[0], tree.root)


def test_simulation_is_reproducible():
    cfg = _cfg(2, t=1.0, d=3)
    a = be.simulate(cfg, sample_rng(9, 4))
    b = be.simulate(cfg, sample_rng(9, 4))
    np.testing.assert_array_equal(a.position, b.position)
    np.testing.assert_array_equal(a.parent, b.parent)


def test_wrong_arity_is_rejected():
    with pytest.raises(InvalidArgumentError):
        be.simulate_chain(_cfg(2), sample_rng(0, 0))
    with pytest.raises(InvalidArgumentError):
        be.simulate_tree(_cfg(1), sample_rng(0, 0))


def test_root_must_match_dimension():
    with pytest.raises(ValidationError):
        BranchingConfig(p=2, t=1.0, x=np.zeros(2), d=3)


def test_tree_arrays_are_frozen():
    tree = be.simulate(_cfg(2), sample_rng(0, 0))
    with pytest.raises(ValueError):
        tree.death[0] = 5.0


def test_particle_cap_truncates_and_keeps_consistency():
    cfg = _cfg(2, t=5.0, cap=20)
    truncated = [be.simulate(cfg, sample_rng(0, i)) for i in range(20)]
    truncated = [tr for tr in truncated if tr.truncated]
    assert truncated
    for tree in truncated:
        assert tree.size <= 20
        be.check_tree_invariants(tree, cfg)


def test_dump_and_parse_preserve_structure():
    tree = be.simulate(_cfg(2, t=1.2, d=2), sample_rng(2, 7))
    back = be.parse_tree_dump(be.dump_tree(tree))
    np.testing.assert_array_equal(back.parent, tree.parent)
    np.testing.assert_array_equal(back.alive, tree.alive)
    np.testing.assert_array_equal(back.position, tree.position)
    np.testing.assert_array_equal(back.death, tree.death)


@pytest.mark.parametrize("p", [2, 3, 5])
def test_q_recursion_matches_closed_form(p):
    q = be.q_coefficients(p, 25)
    assert q[0] == 1.0
    for n, q_n in enumerate(q):
        assert q_n == pytest.approx(be.q_closed_form(p, n), rel=1e-10)


def test_binary_q_is_all_ones():
    assert be.q_coefficients(2, 10) == pytest.approx([1.0] * 11)


@given(
    p=st.integers(min_value=2, max_value=4),
    rt=st.floats(min_value=0.05, max_value=0.6),
)
def test_pmf_sums_to_one_and_matches_moments(p, rt):
    pmf = np.array([be.branch_count_pmf(n, p, 1.0, rt) for n in range(400)])
    assert math.fsum(pmf) == pytest.approx(1.0, abs=1e-9)
    n = np.arange(400)
    mean, second = be.branch_count_moments(p, 1.0, rt)
    assert math.fsum(n * pmf) == pytest.approx(mean, rel=1e-8)
    assert math.fsum(n * n * pmf) == pytest.approx(second, rel=1e-8)


def test_pmf_beyond_recursion_uses_gamma_form():
    n = be.PMF_RECURRENCE_LIMIT
    below = be.branch_count_pmf(n, 3, 1.0, 1.0)
    alpha = 0.5
    direct = math.exp(gammaln(n + alpha) - gammaln(alpha) - gammaln(n + 1) - 1.0 + n * math.log(-math.expm1(-2.0)))
    assert below == pytest.approx(direct, rel=1e-9)
    assert be.branch_count_pmf(n + 1, 3, 1.0, 1.0) > 0


def test_chain_count_is_poisson():
    assert be.count_pmf(2, 1, 2.0, 0.5) == pytest.approx(math.exp(-1.0) / 2.0)
    assert be.count_moments(1, 2.0, 0.5) == pytest.approx((1.0, 2.0))


def test_zero_time_pmf_is_a_point_mass():
    assert be.branch_count_pmf(0, 2, 1.0, 0.0) == 1.0
    assert be.branch_count_pmf(3, 2, 1.0, 0.0) == 0.0


@pytest.mark.parametrize("p", [1, 2])
def test_lawcheck_agrees_with_exact_law(p):
    rep = be.branch_count_lawcheck(p, 1.0, 0.5, 4000, seed=5)
    assert rep.truncated == 0
    assert sum(rep.counts) == 4000
    assert rep.tv_distance < 0.05
    assert abs(rep.empirical_mean - rep.analytic_mean) < 5 * rep.mean_std_error


def test_lawcheck_independent_of_worker_count(monkeypatch):
    monkeypatch.setattr(be.settings, "CHUNK_SIZE", 100)
    one = be.branch_count_lawcheck(2, 1.0, 0.5, 450, seed=2, workers=1)
    two = be.branch_count_lawcheck(2, 1.0, 0.5, 450, seed=2, workers=2)
    assert one.counts == two.counts


def test_lawcheck_rejects_empty_run():
    with pytest.raises(InvalidArgumentError):
        be.branch_count_lawcheck(2, 1.0, 0.5, 0, seed=0)
