import math

import numpy as np
import pytest

from app.errors import DomainError, InvalidArgumentError, QuadratureError, WellPosednessError
from app.models.wave_models import PicardGrid, WaveProblem
from app.services import reference_solutions as rs
from app.services.moment_oracles import tree_series_solution


def _const(value):
    return lambda x: np.full(np.shape(x)[:-1], value, dtype=float)


def _const_st(value):
    return lambda s, x: np.full(np.shape(x)[:-1], value, dtype=float)


def _cos(x):
    return np.cos(np.asarray(x)[..., 0])


def test_adaptive_simpson_smooth_integrand():
    value, err = rs.adaptive_simpson(math.sin, 0.0, math.pi, 1e-12)
    assert value == pytest.approx(2.0, abs=1e-11)
    assert err < 1e-11
    assert rs.adaptive_simpson(math.sin, 1.0, 1.0, 1e-12) == (0.0, 0.0)


def test_adaptive_simpson_reports_unresolved_jumps():
    with pytest.raises(QuadratureError) as info:
        rs.adaptive_simpson(lambda y: 1.0 if y > 1.0 / 3.0 else 0.0, 0.0, 1.0, 1e-14, max_depth=3)
    assert info.value.achieved > 0


def test_dalembert_cosine():
    assert rs.dalembert(_cos, None, 0.7, 0.3) == pytest.approx(math.cos(0.3) * math.sin(0.7), abs=1e-8)


def test_dalembert_constant_data():
    assert rs.dalembert(_const(1.0), None, 0.6, 2.0) == pytest.approx(0.6, abs=1e-10)
    assert rs.dalembert(_const(0.0), _const_st(1.0), 0.6, -1.0) == pytest.approx(0.18, abs=1e-9)
    assert rs.dalembert(_cos, _const_st(1.0), 0.0, 0.4) == 0.0


def test_dalembert_rejects_negative_time():
    with pytest.raises(DomainError):
        rs.dalembert(_cos, None, -0.1, 0.0)


def test_duhamel_odd_data_vanishes_at_origin():
    assert rs.duhamel_quadrature(3, lambda x: np.asarray(x)[..., 0], None, 0.8, np.zeros(3)) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("d", [2, 3])
def test_duhamel_constant_data(d):
    x = np.full(d, 0.25)
    assert rs.duhamel_quadrature(d, _const(1.0), None, 0.7, x) == pytest.approx(0.7, abs=1e-10)
    assert rs.duhamel_quadrature(d, _const(0.0), _const_st(1.0), 0.7, x) == pytest.approx(0.245, abs=1e-9)


def test_duhamel_planar_quadratic():
    # U(t, 0) = t^3 Laplacian(|x|^2) / 6 for initial velocity |x|^2
    value = rs.duhamel_quadrature(2, lambda x: np.sum(np.asarray(x) ** 2, axis=-1), None, 0.9, np.zeros(2))
    assert value == pytest.approx(2.0 * 0.9 ** 3 / 3.0, rel=1e-9)


def test_duhamel_matches_dalembert_in_one_dimension():
    x = np.array([0.4])
    assert rs.duhamel_quadrature(1, _cos, None, 0.5, x) == pytest.approx(rs.dalembert(_cos, None, 0.5, 0.4), abs=1e-9)


def test_duhamel_point_shape_is_checked():
    with pytest.raises(DomainError):
        rs.duhamel_quadrature(3, _const(1.0), None, 0.5, np.zeros(2))


def test_picard_without_coupling_is_the_linear_solution():
    pb = WaveProblem(d=1, T=1.0, p=1, f=_cos, c=_const_st(0.0), f_sup=1.0, c_sup=0.0)
    sol = rs.picard_nonlinear(pb, 0.5)
    assert sol.iterations == 1
    assert sol.increments == [0.0]
    pts = np.array([[0.0], [0.3]])
    np.testing.assert_allclose(sol.evaluate(0.5, pts), np.cos(pts[:, 0]) * math.sin(0.5), atol=1e-3)


def test_picard_linear_coupling_constant_data():
    c = 0.5
    pb = WaveProblem(d=1, T=1.0, p=1, f=_const(1.0), c=_const_st(c), f_sup=1.0, c_sup=c)
    sol = rs.picard_nonlinear(pb, 0.5)
    assert all(r < 1.0 for r in sol.contraction_factors)
    expected = math.sinh(math.sqrt(c) * 0.5) / math.sqrt(c)
    assert sol.evaluate(0.5, np.array([[0.1]]))[0] == pytest.approx(expected, rel=1e-3)


def test_picard_quadratic_constant_data():
    f, c = 0.3, 0.3
    pb = WaveProblem(d=1, T=1.0, p=2, f=_const(f), c=_const_st(c), f_sup=f, c_sup=c)
    sol = rs.picard_nonlinear(pb, 0.5, grid=PicardGrid(n_t=41, n_x=21, half_width=1.0))
    assert sol.at_time(0.5)(np.array([[0.0]]))[0] == pytest.approx(tree_series_solution(0.5, f, c, 2), rel=1e-3)


def test_picard_preconditions():
    lin = WaveProblem(d=1, T=1.0, f=_cos, F_lin=_const_st(0.0), f_sup=1.0, F_sup=0.0)
    with pytest.raises(InvalidArgumentError):
        rs.picard_nonlinear(lin, 0.5)
    big = WaveProblem(d=1, T=1.0, p=2, f=_const(5.0), c=_const_st(5.0), f_sup=5.0, c_sup=5.0)
    with pytest.raises(WellPosednessError):
        rs.picard_nonlinear(big, 0.5)


def test_default_oracle_dispatch():
    lin = WaveProblem(d=1, T=1.0, f=_cos, F_lin=_const_st(0.0), f_sup=1.0, F_sup=0.0)
    pts = np.array([[0.0], [0.2], [-0.4]])
    np.testing.assert_allclose(rs.default_oracle(lin, 0.4)(pts), np.cos(pts[:, 0]) * math.sin(0.4), atol=1e-8)
    np.testing.assert_array_equal(rs.default_oracle(lin, 0.0)(pts), np.zeros(3))

    lin3 = WaveProblem(d=3, T=1.0, f=_const(1.0), F_lin=_const_st(0.0), f_sup=1.0, F_sup=0.0)
    np.testing.assert_allclose(rs.default_oracle(lin3, 0.3)(np.zeros((2, 3))), [0.3, 0.3], atol=1e-10)

    pert = WaveProblem(d=1, T=1.0, p=1, f=_const(1.0), c=_const_st(0.0), f_sup=1.0, c_sup=0.0)
    np.testing.assert_allclose(rs.default_oracle(pert, 0.4)(pts), np.full(3, 0.4), atol=1e-10)
