import math
from functools import lru_cache
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from loguru import logger

from app.config import settings
from app.errors import AuditFailureError, InvalidArgumentError
from app.models.network import DataNets, DistillReport, NeuralNet, SizeBounds
from app.models.wave_models import ErrorBudget, FrozenSample, LightconeAudit, WaveProblem
from app.planner.depth_planner import product_regime
from app.planner.error_budget import split_error_budget
from app.services import relu_algebra as ra
from app.services.estimators import (
    frozen_linear_samples,
    frozen_tree_samples,
    frozen_value,
    linear_second_moment,
    require_wellposed,
    tree_second_moment_bound,
)
from app.services.reference_solutions import default_oracle
from app.services.relu_products import kfold_product, product_accuracy, product_of_nets
from app.services.stochastic_kernels import check_dimension

Oracle = Callable[[np.ndarray], np.ndarray]

# ((P bound, hidden layers) of an alive factor, same for a dead factor)
FactorSizes = Tuple[Tuple[float, int], Tuple[float, int]]


# -------------------------------------------------------------------
# 🧮 Budget
# -------------------------------------------------------------------
def plan_budget(problem: WaveProblem, t: float, eps_target: float, M: Optional[int] = None) -> ErrorBudget:
    """Error budget for distilling `problem` at time t; data nets should be built with its delta."""
    if problem.p == 0:
        m2 = linear_second_moment(problem, t)
    else:
        m2 = tree_second_moment_bound(problem, t)
    return split_error_budget(eps_target, m2, M=M)


# -------------------------------------------------------------------
# 🌐 Light-cone grids and audits
# -------------------------------------------------------------------
def lightcone_grid(t: float, grid_n: int, d: int) -> np.ndarray:
    """Uniform tensor grid of [-t, t]^d restricted to the closed ball |x| <= t."""
    check_dimension(d)
    if grid_n < 1:
        raise InvalidArgumentError("grid_n must be positive")
    if t == 0:
        return np.zeros((1, d))
    axis = np.linspace(-t, t, grid_n)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    pts = np.column_stack([m.ravel() for m in mesh])
    return pts[np.linalg.norm(pts, axis=1) <= t * (1.0 + 1e-12)]


def _nu_weights(points: np.ndarray) -> np.ndarray:
    if settings.NU_MEASURE == "gaussian":
        w = np.exp(-0.5 * np.sum(points ** 2, axis=1))
    else:
        w = np.ones(points.shape[0])
    return w / w.sum()


def verify_lightcone(net: NeuralNet, oracle: Oracle, t: float, grid_n: int, d: Optional[int] = None) -> LightconeAudit:
    d = net.input_dim if d is None else d
    pts = lightcone_grid(t, grid_n, d)
    diff = np.abs(np.asarray(oracle(pts), dtype=float) - ra.realize_scalar(net, pts))
    l2 = math.sqrt(float(np.dot(_nu_weights(pts), diff ** 2)))
    return LightconeAudit(sup_error=float(np.max(diff)), l2_error=l2, points=int(pts.shape[0]), t=t)


def data_callables(data_nets: DataNets) -> Tuple[Callable, Callable]:
    """The data nets as callables with the same signatures as the problem's f and c."""

    def f_net(y):
        y = np.atleast_2d(y)
        return ra.realize_scalar(data_nets.phi_f, y)

    def c_net(s, y):
        y = np.atleast_2d(y)
        return ra.realize_scalar(data_nets.phi_c, np.column_stack([np.full(y.shape[0], float(s)), y]))

    return f_net, c_net


def frozen_estimator_values(
    samples: Sequence[FrozenSample],
    f: Callable,
    c: Callable,
    t: float,
    points: np.ndarray,
) -> np.ndarray:
    """Average of the frozen samples at `points`, the value the distilled net must reproduce."""
    if not samples:
        raise InvalidArgumentError("no frozen samples to average")
    total = np.zeros(np.atleast_2d(points).shape[0])
    for sample in samples:
        total += frozen_value(sample, f, c, t, points)
    return total / len(samples)


# -------------------------------------------------------------------
# 🧩 Per-sample networks
# -------------------------------------------------------------------
@lru_cache(maxsize=64)
def _kfold_size(k: int, R: float, eps: float) -> Tuple[int, int]:
    mt = ra.metrics(kfold_product(k, R, product_accuracy(k, R, eps)))
    return mt.P, mt.H


def _wrap_bound(P: float, first_width: int) -> float:
    return P + first_width + 1


def _extend_bound(P: float, dH: int) -> float:
    return P if dH <= 0 else 2 * P + 4 * dH


def _factor_count(sample: FrozenSample) -> int:
    if sample.scale == 0.0:
        return 0
    return sample.alive_offsets.shape[0] + len(sample.dead_times)


def _factor_sizes(data_nets: DataNets) -> FactorSizes:
    """(parameter bound, hidden layers) of a wrapped alive factor and of a wrapped dead factor."""
    phi_f, phi_c = data_nets.phi_f, data_nets.phi_c
    d = phi_f.input_dim
    alive = (_wrap_bound(ra.metrics(phi_f).P, phi_f.dims[1]), phi_f.hidden)
    # fix_time composes with the 1-hidden-layer time prepender: two more hidden layers
    dead = (_wrap_bound(2 * ra.metrics(phi_c).P + 4 * (2 * d + 1), 2 * d + 1), phi_c.hidden + 2)
    return alive, dead


def _sample_bound(sample: FrozenSample, sizes: FactorSizes, R: float, gamma: float) -> Tuple[float, int]:
    """Parameter and hidden-layer bounds of one per-sample net, from its factor count alone."""
    k = _factor_count(sample)
    if k == 0:
        return 0.0, 1
    alive, dead = sizes
    parts = [alive] * sample.alive_offsets.shape[0] + [dead] * len(sample.dead_times)
    if k == 1:
        return parts[0][0] + 1, parts[0][1]
    H_fac = max(h for _, h in parts)
    P_kfold, H_kfold = _kfold_size(k, R, gamma)
    P_fac = math.fsum(_extend_bound(P, H_fac - h) for P, h in parts)
    return 2 * P_kfold + 2 * P_fac + 1, H_kfold + H_fac + 1


def _sample_net(sample: FrozenSample, data_nets: DataNets, t: float, R: float, gamma: float) -> NeuralNet:
    """
    scale * prod_alive phi_f(x + off) * prod_dead phi_c(t - T_k, x + off_k) as one network.
    A single factor is wrapped directly; several go through product_of_nets.
    """
    phi_f, phi_c = data_nets.phi_f, data_nets.phi_c
    if sample.scale == 0.0:
        return ra.zero_net(phi_f.input_dim)

    factors: List[NeuralNet] = [ra.affine_wrap(phi_f, 1.0, shift_in=off) for off in sample.alive_offsets]
    for off, death in zip(sample.dead_offsets, sample.dead_times):
        factors.append(ra.affine_wrap(ra.fix_time(phi_c, t - float(death)), 1.0, shift_in=off))

    if len(factors) == 1:
        return ra.affine_wrap(factors[0], sample.scale)
    H_fac = max(n.hidden for n in factors)
    factors = [ra.match_depth(n, H_fac) for n in factors]
    return ra.affine_wrap(product_of_nets(factors, R=R, eps=gamma), sample.scale)


def _sample_chunk(samples: Sequence[FrozenSample], data_nets: DataNets, t: float, R: float, gamma: float) -> List[NeuralNet]:
    return [_sample_net(s, data_nets, t, R, gamma) for s in samples]


def _assemble(
    samples: Sequence[FrozenSample], data_nets: DataNets, t: float, R: float, gamma: float, workers: int
) -> NeuralNet:
    """Average of the per-sample nets after extending all of them to the deepest one."""
    chunk = settings.CHUNK_SIZE
    spans = [(a, min(a + chunk, len(samples))) for a in range(0, len(samples), chunk)]
    parts = Parallel(n_jobs=workers, backend=settings.PARALLEL_BACKEND)(
        delayed(_sample_chunk)(samples[a:b], data_nets, t, R, gamma) for a, b in spans
    )
    built = [net for part in parts for net in part]
    H = max(net.hidden for net in built)
    nets = [ra.match_depth(net, H) for net in built]
    logger.info(f"🧩 assembled {len(nets)} sample nets at common depth H = {H}")
    return ra.sum_same_length(nets, [1.0 / len(nets)] * len(nets))


def size_bounds(
    samples: Sequence[FrozenSample],
    data_nets: DataNets,
    R: float,
    gamma: float,
    d: int,
    p: int,
    eps_target: float,
    eta: float,
) -> SizeBounds:
    """
    Size bounds of the assembled net, instantiated before it is built.

    The lemma chain sums the per-sample bounds after extension to the common depth.
    The closed forms are (B + 2) d^p delta^-beta for the hidden layers, with
    delta^-beta the data-net depth and B = (deepest product net) + 2, and
    C d^p eps^-eta for the parameters, with C the largest per-sample bound.
    """
    sizes = _factor_sizes(data_nets)
    per_sample = [_sample_bound(s, sizes, R, gamma) for s in samples]
    H = max(h for _, h in per_sample)
    extended = [_extend_bound(P, H - h) for P, h in per_sample]

    ks = {_factor_count(s) for s in samples}
    H_prod = max((_kfold_size(k, R, gamma)[1] for k in ks if k >= 2), default=0)
    B = H_prod + 2
    data_depth = max(data_nets.phi_f.hidden, data_nets.phi_c.hidden, 1)
    C = max(extended)
    return SizeBounds(
        param_bound=math.fsum(extended),
        hidden_bound=H,
        depth_constant=B,
        param_constant=C,
        hidden_closed_form=(B + 2) * d ** p * data_depth,
        param_closed_form=C * d ** p * eps_target ** (-eta),
    )


# -------------------------------------------------------------------
# 🧪 Distillation
# -------------------------------------------------------------------
def _check_alive_counts(samples: Sequence[FrozenSample], p: int) -> None:
    for s in samples:
        expected = (p - 1) * s.branch_count + 1
        if s.alive_offsets.shape[0] != expected:
            raise AuditFailureError(
                f"sample {s.index}: {s.alive_offsets.shape[0]} alive particles, expected (p-1)N+1 = {expected}"
            )


def _branch_budget(problem: WaveProblem, M: int) -> float:
    lam, T, p = problem.rate, problem.T, problem.p
    if p == 0:
        return 0.0
    if p == 1:
        return M * (1.0 + lam * T)
    return M * (1.0 + math.expm1(lam * T * (p - 1)) / (p - 1))


def _exponents(data_nets: DataNets, delta: float) -> Tuple[float, float, float]:
    if not 0 < delta < 1:
        return 0.0, 0.0, 9.0
    scale = math.log(1.0 / delta)
    P_data = max(ra.metrics(data_nets.phi_f).P, ra.metrics(data_nets.phi_c).P, 1)
    H_data = max(data_nets.phi_f.hidden, data_nets.phi_c.hidden)
    alpha = math.log(P_data) / scale
    beta = math.log(H_data) / scale
    return alpha, beta, 2.0 + max(alpha, beta, 7.0)


def _distill(
    case: str,
    problem: WaveProblem,
    t: float,
    data_nets: DataNets,
    eps_target: float,
    samples: List[FrozenSample],
    budget: ErrorBudget,
    seed: int,
    oracle: Optional[Oracle],
    grid_n: int,
    workers: int,
) -> DistillReport:
    if not samples:
        raise AuditFailureError("every frozen sample was rejected; nothing to distill")
    d = problem.d
    R = max(data_nets.f_sup, data_nets.c_sup) + data_nets.eps_data
    alpha, beta, eta = _exponents(data_nets, data_nets.eps_data)
    bounds = size_bounds(samples, data_nets, R, budget.gamma, d, problem.p, eps_target, eta)
    net = _assemble(samples, data_nets, t, R, budget.gamma, workers)
    ks = [_factor_count(s) for s in samples]

    if oracle is None:
        oracle = default_oracle(problem, t)
    audit = verify_lightcone(net, oracle, t, grid_n, d)

    pts = lightcone_grid(t, grid_n, d)
    f_net, c_net = data_callables(data_nets)
    frozen = frozen_estimator_values(samples, f_net, c_net, t, pts)
    assembly_error = float(np.max(np.abs(ra.realize_scalar(net, pts) - frozen)))
    assembly_budget = budget.gamma * math.fsum(abs(s.scale) for s, k in zip(samples, ks) if k >= 2) / len(samples)

    mt = ra.metrics(net)
    report = DistillReport(
        net=net,
        eps_target=eps_target,
        measured_sup_error=audit.sup_error,
        l2_error=audit.l2_error,
        param_bound=bounds.param_bound,
        measured_P=mt.P,
        hidden_bound=bounds.hidden_bound,
        measured_H=mt.H,
        measured_W=mt.W,
        case=case,
        t=t,
        M=budget.M,
        seed=seed,
        delta=data_nets.eps_data,
        gamma=budget.gamma,
        regime=product_regime(R) if any(k >= 2 for k in ks) else "none",
        alpha=alpha,
        beta=beta,
        eta=eta,
        theorem_constant=mt.P * eps_target ** eta,
        depth_constant=bounds.depth_constant,
        param_constant=bounds.param_constant,
        hidden_closed_form=bounds.hidden_closed_form,
        param_closed_form=bounds.param_closed_form,
        branch_total=int(sum(s.branch_count for s in samples)),
        branch_budget=_branch_budget(problem, budget.M),
        assembly_error=assembly_error,
        assembly_budget=assembly_budget,
    )
    flags = report.audit_flags()
    report = report.model_copy(update={"audits_passed": all(flags.values())})
    if report.audits_passed:
        logger.info(f"✅ {case} distillation: sup error {audit.sup_error:.3e}, P = {mt.P}, H = {mt.H}")
    else:
        failed = [name for name, ok in flags.items() if not ok]
        logger.warning(f"⚠️ {case} distillation audits failed: {failed}")
    return report


def _check_request(problem: WaveProblem, t: float, data_nets: DataNets) -> None:
    check_dimension(problem.d)
    if not 0.0 <= t <= problem.T:
        raise InvalidArgumentError(f"t = {t} outside [0, T = {problem.T}]")
    if data_nets.phi_f.input_dim != problem.d or data_nets.phi_c.input_dim != problem.d + 1:
        raise InvalidArgumentError(
            f"data nets take {data_nets.phi_f.input_dim} and {data_nets.phi_c.input_dim} inputs, "
            f"expected {problem.d} and {problem.d + 1}"
        )


def distill_linear(
    problem: WaveProblem,
    t: float,
    data_nets: DataNets,
    eps_target: float,
    seed: int = 0,
    M: Optional[int] = None,
    oracle: Optional[Oracle] = None,
    grid_n: int = 101,
    workers: int = 1,
) -> DistillReport:
    """Distill the linear Monte Carlo estimator; phi_c carries the source F_lin."""
    if problem.p != 0:
        raise InvalidArgumentError(f"distill_linear needs p = 0, got p = {problem.p}")
    _check_request(problem, t, data_nets)
    budget = plan_budget(problem, t, eps_target, M)
    samples = frozen_linear_samples(problem, t, budget.M, seed)
    return _distill("linear", problem, t, data_nets, eps_target, samples, budget, seed, oracle, grid_n, workers)


def distill_perturbative(
    problem: WaveProblem,
    t: float,
    data_nets: DataNets,
    eps_target: float,
    seed: int = 0,
    M: Optional[int] = None,
    oracle: Optional[Oracle] = None,
    grid_n: int = 101,
    workers: int = 1,
) -> DistillReport:
    if problem.p != 1:
        raise InvalidArgumentError(f"distill_perturbative needs p = 1, got p = {problem.p}")
    _check_request(problem, t, data_nets)
    budget = plan_budget(problem, t, eps_target, M)
    samples = frozen_tree_samples(problem, t, budget.M, seed)
    _check_alive_counts(samples, 1)
    return _distill("perturbative", problem, t, data_nets, eps_target, samples, budget, seed, oracle, grid_n, workers)


def distill_nonlinear(
    problem: WaveProblem,
    t: float,
    data_nets: DataNets,
    eps_target: float,
    seed: int = 0,
    M: Optional[int] = None,
    oracle: Optional[Oracle] = None,
    grid_n: int = 101,
    workers: int = 1,
) -> DistillReport:
    """Distill the p-ary branching estimator; refuses problems outside the small-data regime."""
    if problem.p < 2:
        raise InvalidArgumentError(f"distill_nonlinear needs p >= 2, got p = {problem.p}")
    require_wellposed(problem)
    _check_request(problem, t, data_nets)
    budget = plan_budget(problem, t, eps_target, M)
    samples = frozen_tree_samples(problem, t, budget.M, seed)
    _check_alive_counts(samples, problem.p)
    return _distill("nonlinear", problem, t, data_nets, eps_target, samples, budget, seed, oracle, grid_n, workers)


def distill(problem: WaveProblem, t: float, data_nets: DataNets, eps_target: float, **kwargs) -> DistillReport:
    if problem.p == 0:
        return distill_linear(problem, t, data_nets, eps_target, **kwargs)
    if problem.p == 1:
        return distill_perturbative(problem, t, data_nets, eps_target, **kwargs)
    return distill_nonlinear(problem, t, data_nets, eps_target, **kwargs)
