import math
from pathlib import Path

import numpy as np
import pytest

from app.errors import InvalidArgumentError, WellPosednessError
from app.models.wave_models import WaveProblem
from app.schemas.run_schema import load_run_config
from app.services import relu_algebra as ra
from app.services import wave_distiller as wd
from app.services.data_profiles import DataProfile, build_data_nets
from app.services.estimators import check_wellposed, frozen_linear_samples, frozen_tree_samples
from app.services.reference_solutions import default_oracle
from app.services.relu_products import kfold_product, product_accuracy

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def _zero_st(s, x):
    return np.zeros(np.shape(x)[:-1])


def _cos(x):
    return np.cos(np.asarray(x)[..., 0])


def _linear_cos(T=1.0):
    return WaveProblem(d=1, T=T, f=_cos, F_lin=_zero_st, f_sup=1.0, F_sup=0.0)


def _exact_cos(t):
    return lambda pts: np.cos(np.atleast_2d(pts)[:, 0]) * math.sin(t)


@pytest.fixture(scope="module")
def cos_nets():
    return build_data_nets(DataProfile(factor="cos", d=1), None, d=1, T=1.0, delta=0.05)


def test_lightcone_grid():
    pts = wd.lightcone_grid(1.0, 5, 1)
    np.testing.assert_allclose(pts[:, 0], [-1.0, -0.5, 0.0, 0.5, 1.0])
    disk = wd.lightcone_grid(1.0, 5, 2)
    assert np.all(np.linalg.norm(disk, axis=1) <= 1.0 + 1e-12)
    assert disk.shape[0] == 13
    np.testing.assert_array_equal(wd.lightcone_grid(0.0, 11, 3), np.zeros((1, 3)))
    with pytest.raises(InvalidArgumentError):
        wd.lightcone_grid(1.0, 0, 1)


def test_verify_lightcone_reports_sup_and_rms():
    net = ra.constant_net(1, 1.0)
    audit = wd.verify_lightcone(net, lambda pts: np.zeros(np.atleast_2d(pts).shape[0]), 0.5, 11)
    assert audit.sup_error == pytest.approx(1.0)
    assert audit.l2_error == pytest.approx(1.0)
    assert audit.points == 11


def test_plan_budget_splits_eps():
    budget = wd.plan_budget(_linear_cos(), 0.5, 0.4)
    assert budget.delta == budget.gamma == pytest.approx(0.1)
    assert budget.M == math.ceil(max(1.0, budget.second_moment) / 0.01 - 1e-9)
    assert wd.plan_budget(_linear_cos(), 0.5, 0.4, M=7).M == 7


def test_linear_distillation_reproduces_frozen_average(cos_nets):
    t, M = 0.5, 200
    rep = wd.distill(_linear_cos(), t, cos_nets, 0.5, seed=3, M=M, oracle=_exact_cos(t), grid_n=41)
    assert rep.case == "linear"
    assert rep.M == M
    assert rep.regime == "none"
    assert rep.audits_passed, rep.audit_flags()

    pts = wd.lightcone_grid(t, 41, 1)
    f_net, c_net = wd.data_callables(cos_nets)
    frozen = wd.frozen_estimator_values(frozen_linear_samples(_linear_cos(), t, M, 3), f_net, c_net, t, pts)
    np.testing.assert_allclose(ra.realize_scalar(rep.net, pts), frozen, atol=1e-9)
    audit = wd.verify_lightcone(rep.net, _exact_cos(t), t, 41)
    assert audit.sup_error == pytest.approx(rep.measured_sup_error)


def test_distillation_is_deterministic(cos_nets):
    a = wd.distill(_linear_cos(), 0.4, cos_nets, 0.5, seed=9, M=50, oracle=_exact_cos(0.4), grid_n=21)
    b = wd.distill(_linear_cos(), 0.4, cos_nets, 0.5, seed=9, M=50, oracle=_exact_cos(0.4), grid_n=21)
    pts = wd.lightcone_grid(0.4, 21, 1)
    np.testing.assert_array_equal(ra.realize_scalar(a.net, pts), ra.realize_scalar(b.net, pts))
    assert a.measured_P == b.measured_P


def test_uncoupled_chain_matches_linear_distillation(cos_nets):
    t, M = 0.5, 150
    chain = WaveProblem(d=1, T=1.0, p=1, f=_cos, c=_zero_st, f_sup=1.0, c_sup=0.0)
    lin = wd.distill(_linear_cos(), t, cos_nets, 0.5, seed=4, M=M, oracle=_exact_cos(t), grid_n=31)
    per = wd.distill(chain, t, cos_nets, 0.5, seed=4, M=M, oracle=_exact_cos(t), grid_n=31)
    assert per.case == "perturbative"
    pts = wd.lightcone_grid(t, 31, 1)
    np.testing.assert_allclose(ra.realize_scalar(per.net, pts), ra.realize_scalar(lin.net, pts), atol=1e-9)


def test_perturbative_distillation_passes_its_audits():
    t, eps = 0.5, 0.3
    c_prof = DataProfile(factor="cos", scale=0.2, d=1)
    problem = WaveProblem(d=1, T=1.0, p=1, f=_cos, c=c_prof.spacetime, f_sup=1.0, c_sup=0.2)
    budget = wd.plan_budget(problem, t, eps, M=300)
    nets = build_data_nets(DataProfile(factor="cos", d=1), c_prof, d=1, T=1.0, delta=budget.delta)
    rep = wd.distill(problem, t, nets, eps, seed=1, M=budget.M, grid_n=41)
    assert rep.audits_passed, rep.audit_flags()
    assert rep.regime == "R>=1"
    assert rep.branch_total <= rep.branch_budget
    assert rep.assembly_error <= rep.assembly_budget + 1e-9
    assert rep.measured_H <= rep.hidden_closed_form
    assert rep.measured_P <= rep.param_closed_form
    assert rep.theorem_constant <= rep.param_constant * (1.0 + 1e-12)
    assert rep.eta >= 9.0


def test_zero_time_distillation_is_exact(cos_nets):
    rep = wd.distill(_linear_cos(), 0.0, cos_nets, 0.5, seed=0, M=20)
    assert rep.measured_sup_error == 0.0
    assert rep.audits_passed


def test_nonlinear_distillation_refuses_large_data():
    big = WaveProblem(d=1, T=1.0, p=2, f=_cos, c=_zero_st, f_sup=5.0, c_sup=5.0)
    nets = build_data_nets(DataProfile(factor="cos", d=1), None, d=1, T=1.0, delta=0.1)
    with pytest.raises(WellPosednessError):
        wd.distill(big, 0.5, nets, 0.4, M=10)


def test_request_checks(cos_nets):
    with pytest.raises(InvalidArgumentError):
        wd.distill(_linear_cos(), 1.5, cos_nets, 0.5, M=10)
    wide = build_data_nets(DataProfile(factor="cos", d=2), None, d=2, T=1.0, delta=0.2, audit_n=11)
    with pytest.raises(InvalidArgumentError):
        wd.distill(_linear_cos(), 0.5, wide, 0.5, M=10)
    with pytest.raises(InvalidArgumentError):
        wd.distill_linear(WaveProblem(d=1, T=1.0, p=1, f=_cos, c=_zero_st, f_sup=1.0), 0.5, cos_nets, 0.5, M=10)


def test_size_bounds_come_from_samples_and_data_nets():
    t, eps, M = 0.5, 0.3, 120
    c_prof = DataProfile(factor="cos", scale=0.2, d=1)
    problem = WaveProblem(d=1, T=1.0, p=1, f=_cos, c=c_prof.spacetime, f_sup=1.0, c_sup=0.2)
    nets = build_data_nets(DataProfile(factor="cos", d=1), c_prof, d=1, T=1.0, delta=eps / 4)
    samples = frozen_tree_samples(problem, t, M, 2)
    R = max(nets.f_sup, nets.c_sup) + nets.eps_data
    gamma = eps / 4

    bounds = wd.size_bounds(samples, nets, R, gamma, 1, 1, eps, 9.0)
    ks = {s.alive_offsets.shape[0] + len(s.dead_times) for s in samples if s.scale != 0.0}
    assert max(ks) >= 2
    H_prod = max(ra.metrics(kfold_product(k, R, product_accuracy(k, R, gamma))).H for k in ks if k >= 2)
    data_depth = max(nets.phi_f.hidden, nets.phi_c.hidden)
    assert bounds.depth_constant == H_prod + 2
    assert bounds.hidden_closed_form == (H_prod + 4) * data_depth
    assert bounds.hidden_bound <= bounds.hidden_closed_form
    assert bounds.param_closed_form == pytest.approx(bounds.param_constant * 0.3 ** -9.0)
    assert bounds.param_bound <= M * bounds.param_constant

    # the assembled net meets the bounds fixed before it was built
    rep = wd.distill(problem, t, nets, eps, seed=2, M=M, oracle=lambda pts: np.zeros(len(pts)), grid_n=11)
    assert rep.measured_H == bounds.hidden_bound
    assert rep.measured_P <= bounds.param_bound
    assert rep.param_bound == pytest.approx(bounds.param_bound)
    assert rep.param_constant == bounds.param_constant
    flags = rep.audit_flags()
    assert flags["params"] and flags["hidden"] and flags["params_closed_form"] and flags["hidden_closed_form"]

    oversized = rep.model_copy(update={"measured_P": int(rep.param_closed_form) + 1})
    assert not oversized.audit_flags()["params_closed_form"]
    deep = rep.model_copy(update={"measured_H": int(rep.hidden_closed_form) + 1})
    assert not deep.audit_flags()["hidden_closed_form"]


@pytest.mark.slow
def test_perturbative_distillation_at_desk_scale():
    cfg = load_run_config(CONFIG_DIR / "perturbative_d1.ini")
    problem = cfg.wave_problem()
    t, eps = cfg.first_time(cfg.distill.t), cfg.distill.eps_target
    assert (t, eps, cfg.distill.grid_n) == (0.5, 0.1, 101)
    budget = wd.plan_budget(problem, t, eps)
    nets = build_data_nets(cfg.problem.f_profile(), cfg.problem.source_profile(), 1, problem.T, budget.delta)

    rep = wd.distill(problem, t, nets, eps, seed=cfg.run.seed, grid_n=101)
    assert rep.M == budget.M
    assert rep.audits_passed, rep.audit_flags()
    assert rep.measured_sup_error <= 0.1
    assert rep.measured_P <= rep.param_bound

    oracle = default_oracle(problem, t)
    audit = wd.verify_lightcone(rep.net, oracle, t, 101)
    assert audit.points == 101
    assert audit.sup_error == pytest.approx(rep.measured_sup_error)

    again = wd.distill(problem, t, nets, eps, seed=cfg.run.seed, grid_n=101, workers=2)
    assert ra.net_to_json(again.net) == ra.net_to_json(rep.net)


@pytest.mark.slow
def test_nonlinear_distillation_in_the_small_data_regime():
    cfg = load_run_config(CONFIG_DIR / "nonlinear_p2.ini")
    problem = cfg.wave_problem()
    t, eps = cfg.first_time(cfg.distill.t), cfg.distill.eps_target
    assert problem.p == 2 and (eps, cfg.distill.grid_n) == (0.2, 51)
    assert check_wellposed(problem).passed
    budget = wd.plan_budget(problem, t, eps)
    nets = build_data_nets(cfg.problem.f_profile(), cfg.problem.source_profile(), 1, problem.T, budget.delta)

    rep = wd.distill(problem, t, nets, eps, seed=cfg.run.seed, grid_n=51)
    assert rep.case == "nonlinear"
    assert rep.audits_passed, rep.audit_flags()
    assert rep.regime == "R<1"

    samples = frozen_tree_samples(problem, t, rep.M, cfg.run.seed)
    assert samples
    assert all(s.alive_offsets.shape[0] == s.branch_count + 1 for s in samples)
    assert rep.branch_total == sum(s.branch_count for s in samples)
