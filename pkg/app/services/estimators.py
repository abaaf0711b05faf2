import math
from typing import Callable, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from loguru import logger
from scipy import integrate

from app.config import settings
from app.errors import (
    BoundViolationError,
    DomainError,
    InvalidArgumentError,
    NumericalDiagnosticError,
    WellPosednessError,
)
from app.models.wave_models import (
    BranchingConfig,
    BranchingTree,
    EstimatorReport,
    FrozenSample,
    WaveProblem,
    WellPosedness,
)
from app.services import branching_engine as be
from app.services.moment_oracles import J_n_chain, J_np_bound, SERIES_CAP, SERIES_TOL
from app.services.stochastic_kernels import check_dimension, sample_rng, sample_tau, sample_unit_jump

NEG_INF = float("-inf")
BOUND_SLACK = 1e-9

# (sign, log|w|, rejected)
SampleWeight = Tuple[float, float, bool]


# -------------------------------------------------------------------
# 🔧 Problem preparation
# -------------------------------------------------------------------
def laplacian_fd(fn: Callable, x: np.ndarray, h: Optional[float] = None) -> np.ndarray:
    """Second-order central-difference Laplacian; `x` carries the coordinates on its last axis."""
    h = settings.FD_STEP if h is None else h
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    centre = np.asarray(fn(x), dtype=float)
    total = np.zeros_like(centre)
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        total = total + (np.asarray(fn(x + e)) - 2.0 * centre + np.asarray(fn(x - e))) / (h * h)
    return total


def reduce_problem(
    f1: Optional[Callable], f2: Callable, F: Optional[Callable], laplacian: Optional[Callable] = None
):
    """
    Shift u = U + f1 so the solved problem has zero initial position:
    returns (f2, F_tilde) with F_tilde = F + Laplacian(f1).

    `laplacian` is the exact Laplacian of f1 when it is known; otherwise
    the central finite difference is used.
    """
    if f1 is None:
        return f2, F
    lap = laplacian if laplacian is not None else (lambda x: laplacian_fd(f1, x))

    def F_tilde(s, x):
        base = 0.0 if F is None else F(s, x)
        return base + lap(x)

    return f2, F_tilde


def wellposed_threshold(p: int, rate: float, T: float) -> float:
    growth = math.expm1(rate * T * (p - 1))
    return (1.0 / (2.0 * T)) * (rate * (2 * p + 1) * (2 * p + 3) / (T * growth)) ** (1.0 / (2 * p))


def check_wellposed(problem: WaveProblem) -> WellPosedness:
    if problem.p < 2:
        return WellPosedness(applicable=False, passed=True, threshold=math.inf, margin=0.0)
    threshold = wellposed_threshold(problem.p, problem.rate, problem.T)
    margin = max(problem.f_sup, problem.c_sup) / threshold
    return WellPosedness(applicable=True, passed=margin < 1.0, threshold=threshold, margin=margin)


def require_wellposed(problem: WaveProblem) -> WellPosedness:
    status = check_wellposed(problem)
    if not status.passed:
        raise WellPosednessError(
            f"max(f_sup, c_sup) = {max(problem.f_sup, problem.c_sup):.4g} is not below the smallness "
            f"threshold {status.threshold:.4g} for p={problem.p}, rate={problem.rate}, T={problem.T}",
            margin=status.margin,
        )
    return status


def _check_time(problem: WaveProblem, t: float) -> None:
    if not 0.0 <= t <= problem.T:
        raise DomainError(f"t = {t} outside [0, T = {problem.T}]")


def _check_point(problem: WaveProblem, x) -> np.ndarray:
    check_dimension(problem.d)
    point = np.atleast_1d(np.asarray(x, dtype=float))
    if point.shape != (problem.d,):
        raise DomainError(f"x has shape {point.shape}, expected ({problem.d},)")
    return point


# -------------------------------------------------------------------
# ⚖️ Weight bookkeeping in (sign, log-magnitude)
# -------------------------------------------------------------------
def _bounded(value, sup: Optional[float], name: str) -> float:
    v = float(np.asarray(value))
    if sup is not None and abs(v) > sup * (1.0 + BOUND_SLACK) + 1e-12:
        raise BoundViolationError(f"|{name}| = {abs(v):.6g} exceeds its declared sup-norm {sup:.6g}")
    return v


def _log_factor(dt: float, value: float, rate: float, dead: bool) -> Tuple[float, float]:
    """dt e^(rate dt) value, divided by rate for dead particles."""
    if dt == 0.0 or value == 0.0:
        return 0.0, NEG_INF
    log_mag = math.log(dt) + rate * dt + math.log(abs(value))
    if dead:
        log_mag -= math.log(rate)
    return math.copysign(1.0, value), log_mag


def tree_weight(problem: WaveProblem, tree: BranchingTree, t: float) -> Tuple[float, float]:
    sign, log_mag = 1.0, 0.0
    for k in range(tree.size):
        dt = float(tree.death[k] - tree.birth[k])
        pos = tree.position[k]
        if tree.alive[k]:
            value = _bounded(problem.f(pos), problem.f_sup, "f")
        else:
            value = _bounded(problem.c(t - float(tree.death[k]), pos), problem.c_sup, "c")
        s, lm = _log_factor(dt, value, problem.rate, dead=not tree.alive[k])
        if s == 0.0:
            return 0.0, NEG_INF
        sign *= s
        log_mag += lm
    return sign, log_mag


# -------------------------------------------------------------------
# 🎲 Per-sample tasks
# -------------------------------------------------------------------
class LinearSampleTask:
    method = "linear"

    def __init__(self, problem: WaveProblem, t: float, x: np.ndarray):
        self.problem, self.t, self.x = problem, t, x

    def __call__(self, index: int, rng: np.random.Generator) -> SampleWeight:
        pb, t = self.problem, self.t
        tau = sample_tau(pb.law, rng)
        z = sample_unit_jump(pb.d, rng)
        if tau >= t:
            value = _bounded(pb.f(self.x + t * z), pb.f_sup, "f")
            s, lm = _log_factor(t, value, pb.rate, dead=False)
        else:
            value = _bounded(pb.F_lin(t - tau, self.x + tau * z), pb.F_sup, "F_lin")
            s, lm = _log_factor(tau, value, pb.rate, dead=True)
        return s, lm, False


class BranchingSampleTask:
    def __init__(self, problem: WaveProblem, t: float, x: np.ndarray):
        self.problem, self.t, self.x = problem, t, x
        self.method = "perturbative" if problem.p == 1 else "nonlinear"
        self.cfg = BranchingConfig(
            p=problem.p, t=t, x=x, law=problem.law, d=problem.d, particle_cap=settings.PARTICLE_CAP
        )

    def __call__(self, index: int, rng: np.random.Generator) -> SampleWeight:
        tree = be.simulate(self.cfg, rng)
        if tree.truncated:
            return 0.0, NEG_INF, True
        s, lm = tree_weight(self.problem, tree, self.t)
        return s, lm, False


# -------------------------------------------------------------------
# 🚀 Deterministic parallel driver
# -------------------------------------------------------------------
def _run_chunk(task, seed: int, start: int, stop: int):
    signs = np.empty(stop - start)
    logs = np.empty(stop - start)
    rejected = np.zeros(stop - start, dtype=bool)
    for j, i in enumerate(range(start, stop)):
        signs[j], logs[j], rejected[j] = task(i, sample_rng(seed, i))
    return signs, logs, rejected


def welford(values: np.ndarray) -> Tuple[float, float]:
    """Streaming mean and unbiased variance."""
    count, mean, m2 = 0, 0.0, 0.0
    for v in values:
        count += 1
        delta = v - mean
        mean += delta / count
        m2 += delta * (v - mean)
    return mean, (m2 / (count - 1) if count > 1 else 0.0)


def mc_driver(task, M: int, seed: int, workers: int = 1) -> EstimatorReport:
    """
    Run `task(i, rng_i)` for i < M.
    - chunk boundaries depend only on M and CHUNK_SIZE, never on `workers`
    - results are concatenated in index order and summed with math.fsum
    """
    if M <= 0:
        raise InvalidArgumentError("M must be positive")
    if workers < 1:
        raise InvalidArgumentError("workers must be >= 1")
    chunk = settings.CHUNK_SIZE
    bounds = [(a, min(a + chunk, M)) for a in range(0, M, chunk)]
    parts = Parallel(n_jobs=workers, backend=settings.PARALLEL_BACKEND)(
        delayed(_run_chunk)(task, seed, a, b) for a, b in bounds
    )
    signs = np.concatenate([p[0] for p in parts])
    logs = np.concatenate([p[1] for p in parts])
    rejected = np.concatenate([p[2] for p in parts])

    keep = ~rejected
    accepted = int(np.count_nonzero(keep))
    if accepted == 0:
        raise NumericalDiagnosticError(f"all {M} samples were rejected (particle cap {settings.PARTICLE_CAP})")
    values = signs[keep] * np.exp(logs[keep])
    _, variance = welford(values)
    estimate = math.fsum(values) / accepted
    n_rej = M - accepted
    if n_rej:
        logger.warning(f"⚠️ {n_rej} of {M} samples rejected after hitting the particle cap")

    x = getattr(task, "x", None)
    problem = getattr(task, "problem", None)
    return EstimatorReport(
        estimate=estimate,
        std_error=math.sqrt(variance / accepted),
        M=M,
        seed=seed,
        rejected_samples=n_rej,
        max_abs_weight=float(np.max(np.abs(values))),
        accepted=accepted,
        rate=problem.rate if problem is not None else 1.0,
        t=getattr(task, "t", None),
        x=None if x is None else [float(v) for v in x],
        method=getattr(task, "method", "mc"),
        workers=workers,
    )


# -------------------------------------------------------------------
# 📈 Estimators
# -------------------------------------------------------------------
def estimate_linear(problem: WaveProblem, t: float, x, M: int, seed: int, workers: int = 1) -> EstimatorReport:
    if problem.p != 0:
        raise InvalidArgumentError(f"estimate_linear needs p = 0, got p = {problem.p}")
    if problem.F_lin is None:
        raise InvalidArgumentError("estimate_linear needs a source F_lin (use a zero function for none)")
    _check_time(problem, t)
    point = _check_point(problem, x)
    return mc_driver(LinearSampleTask(problem, t, point), M, seed, workers)


def estimate_perturbative(problem: WaveProblem, t: float, x, M: int, seed: int, workers: int = 1) -> EstimatorReport:
    if problem.p != 1:
        raise InvalidArgumentError(f"estimate_perturbative needs p = 1, got p = {problem.p}")
    if problem.c is None:
        raise InvalidArgumentError("estimate_perturbative needs a coefficient c")
    _check_time(problem, t)
    point = _check_point(problem, x)
    return mc_driver(BranchingSampleTask(problem, t, point), M, seed, workers)


def estimate_nonlinear(problem: WaveProblem, t: float, x, M: int, seed: int, workers: int = 1) -> EstimatorReport:
    if problem.p < 2:
        raise InvalidArgumentError(f"estimate_nonlinear needs p >= 2, got p = {problem.p}")
    if problem.c is None:
        raise InvalidArgumentError("estimate_nonlinear needs a coefficient c")
    require_wellposed(problem)
    _check_time(problem, t)
    point = _check_point(problem, x)
    return mc_driver(BranchingSampleTask(problem, t, point), M, seed, workers)


def estimate(problem: WaveProblem, t: float, x, M: int, seed: int, workers: int = 1) -> EstimatorReport:
    if problem.p == 0:
        return estimate_linear(problem, t, x, M, seed, workers)
    if problem.p == 1:
        return estimate_perturbative(problem, t, x, M, seed, workers)
    return estimate_nonlinear(problem, t, x, M, seed, workers)


# -------------------------------------------------------------------
# 📐 Second-moment bounds (used to size frozen sample sets)
# -------------------------------------------------------------------
def linear_second_moment(problem: WaveProblem, t: float) -> float:
    """f_sup^2 t^2 e^(rate t) + F_sup^2 int_0^t s^2 e^(rate s) / rate ds (the two events are disjoint)."""
    lam = problem.rate
    alive = problem.f_sup ** 2 * t * t * math.exp(lam * t)
    F_sup = problem.F_sup or 0.0
    source, _ = integrate.quad(lambda s: s * s * math.exp(lam * s) / lam, 0.0, t)
    return alive + F_sup ** 2 * source


def chain_second_moment_bound(problem: WaveProblem, t: float) -> float:
    terms = []
    for n in range(SERIES_CAP):
        term = problem.f_sup ** 2 * problem.c_sup ** (2 * n) * J_n_chain(n, t, problem.rate)
        terms.append(term)
        if n > 0 and term < SERIES_TOL:
            break
    return math.fsum(terms)


def tree_second_moment_bound(problem: WaveProblem, t: float) -> float:
    """sum_n f_sup^(2((p-1)n+1)) c_sup^(2n) J_n,p(t); p = 1 falls back to the chain bound."""
    if problem.p <= 1:
        return chain_second_moment_bound(problem, t)
    p = problem.p
    terms = []
    for n in range(SERIES_CAP):
        term = problem.f_sup ** (2 * ((p - 1) * n + 1)) * problem.c_sup ** (2 * n) * J_np_bound(n, p, t, problem.rate)
        terms.append(term)
        if n > 0 and term < SERIES_TOL:
            break
    return math.fsum(terms)


# -------------------------------------------------------------------
# 🧊 Frozen samples
# -------------------------------------------------------------------
def frozen_linear_samples(problem: WaveProblem, t: float, M: int, seed: int) -> List[FrozenSample]:
    if M <= 0:
        raise InvalidArgumentError("M must be positive")
    lam, d = problem.rate, problem.d
    empty = np.zeros((0, d))
    samples = []
    for i in range(M):
        rng = sample_rng(seed, i)
        tau = sample_tau(problem.law, rng)
        z = sample_unit_jump(d, rng)
        if tau >= t:
            samples.append(
                FrozenSample(
                    index=i,
                    scale=t * math.exp(lam * t),
                    alive_offsets=(t * z)[None, :],
                    dead_offsets=empty,
                    dead_times=np.zeros(0),
                    branch_count=0,
                )
            )
        else:
            samples.append(
                FrozenSample(
                    index=i,
                    scale=tau * math.exp(lam * tau) / lam,
                    alive_offsets=empty,
                    dead_offsets=(tau * z)[None, :],
                    dead_times=np.array([tau]),
                    branch_count=0,
                )
            )
    return samples


def frozen_tree_samples(problem: WaveProblem, t: float, M: int, seed: int) -> List[FrozenSample]:
    """Accepted branching samples rooted at 0, drawn from the estimator's streams."""
    if M <= 0:
        raise InvalidArgumentError("M must be positive")
    lam = problem.rate
    cfg = BranchingConfig(
        p=problem.p, t=t, x=np.zeros(problem.d), law=problem.law, d=problem.d, particle_cap=settings.PARTICLE_CAP
    )
    samples = []
    for i in range(M):
        tree = be.simulate(cfg, sample_rng(seed, i))
        if tree.truncated:
            continue
        dt = tree.delta
        alive = tree.alive
        log_scale = float(np.sum(np.log(dt[dt > 0]) + lam * dt[dt > 0])) - math.log(lam) * int(np.count_nonzero(~alive))
        scale = 0.0 if np.any(dt == 0) else math.exp(log_scale)
        offsets = be.tree_offsets(tree)
        samples.append(
            FrozenSample(
                index=i,
                scale=scale,
                alive_offsets=offsets[alive],
                dead_offsets=offsets[~alive],
                dead_times=tree.death[~alive].copy(),
                branch_count=tree.branch_count,
            )
        )
    return samples


def frozen_value(sample: FrozenSample, f: Callable, c: Callable, t: float, points: np.ndarray) -> np.ndarray:
    """Evaluate one frozen sample at a batch of points (n, d) with the given data callables."""
    pts = np.atleast_2d(points)
    out = np.full(pts.shape[0], sample.scale)
    for off in sample.alive_offsets:
        out = out * np.asarray(f(pts + off), dtype=float)
    for off, death in zip(sample.dead_offsets, sample.dead_times):
        out = out * np.asarray(c(t - float(death), pts + off), dtype=float)
    return out
