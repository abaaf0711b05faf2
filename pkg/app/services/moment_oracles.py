import math
from typing import List, Sequence

import numpy as np
from loguru import logger
from scipy.special import gammaln

from app.errors import DomainError, InvalidArgumentError
from app.models.wave_models import BoundAudit, BranchingConfig, LifetimeLaw, MomentTable
from app.services import branching_engine as be
from app.services.stochastic_kernels import rho, rho_bar, sample_rng

SERIES_TOL = 1e-15
SERIES_CAP = 400


# -------------------------------------------------------------------
# ⛓️ Chain (p = 1) time-weight expectations
# -------------------------------------------------------------------
def I_n_chain(n: int, t: float) -> float:
    """E[weight * 1{N = n}] for the chain with unit data: t^(2n+1) / (2n+1)!."""
    if n < 0 or t < 0:
        raise DomainError("I_n_chain needs n >= 0 and t >= 0")
    if t == 0:
        return 0.0
    return math.exp((2 * n + 1) * math.log(t) - gammaln(2 * n + 2))


def J_n_chain(n: int, t: float, rate: float) -> float:
    """E[weight^2 * 1{N = n}]: 2^(n+1) e^(rate t) t^(3n+2) / (rate^n (3n+2)!)."""
    if n < 0 or t < 0 or rate <= 0:
        raise DomainError("J_n_chain needs n >= 0, t >= 0 and rate > 0")
    if t == 0:
        return 0.0
    log_j = (
        (n + 1) * math.log(2.0) + rate * t + (3 * n + 2) * math.log(t) - n * math.log(rate) - gammaln(3 * n + 3)
    )
    # n = 0 has a single factor t^2 e^(rate t); the 2^(n+1)/(3n+2)! form gives 2/2! = 1
    return math.exp(log_j)


def chain_series_solution(t: float, f_const: float, c_const: float) -> float:
    """
    Exact U(t, x) for constant data and p = 1.
    The chain expectations are joint in N, so U = sum_n f c^n I_n(t) = f sinh(sqrt(c) t) / sqrt(c).
    """
    terms = []
    for n in range(SERIES_CAP):
        term = f_const * (c_const ** n) * I_n_chain(n, t)
        terms.append(term)
        if n > 0 and abs(term) < SERIES_TOL:
            break
    return math.fsum(terms)


# -------------------------------------------------------------------
# 🔁 Convolution powers and the a / b sequences
# -------------------------------------------------------------------
def depril_convolution_power(seq: Sequence[float], p: int, n_max: int) -> List[float]:
    """
    Coefficients 0..n_max of the p-fold convolution power of `seq`:
    g_0 = s_0^p, g_m = (1 / (m s_0)) sum_{i=1}^m ((p + 1) i - m) s_i g_{m-i}.
    """
    if len(seq) == 0 or seq[0] == 0:
        raise DomainError("De Pril recurrence needs a nonzero leading coefficient")
    s = np.zeros(n_max + 1)
    head = np.asarray(seq[: n_max + 1], dtype=float)
    s[: head.size] = head
    g = np.zeros(n_max + 1)
    g[0] = s[0] ** p
    for m in range(1, n_max + 1):
        i = np.arange(1, m + 1)
        g[m] = math.fsum(((p + 1) * i - m) * s[i] * g[m - i]) / (m * s[0])
    return g.tolist()


def _recursive_sequence(p: int, n_max: int, denom) -> List[float]:
    seq = [1.0]
    for n in range(1, n_max + 1):
        conv = depril_convolution_power(seq, p, n - 1)
        seq.append(conv[n - 1] / denom(n))
    return seq


def a_sequence(p: int, n_max: int) -> List[float]:
    if p < 2:
        raise InvalidArgumentError("a_sequence needs p >= 2")
    return _recursive_sequence(p, n_max, lambda n: (p + 1) * n * ((p + 1) * n + 1))


def b_sequence(p: int, n_max: int) -> List[float]:
    if p < 2:
        raise InvalidArgumentError("b_sequence needs p >= 2")
    k = 2 * p + 1
    return _recursive_sequence(p, n_max, lambda n: k * n * (k * n + 1) * (k * n + 2))


def I_np(n: int, p: int, t: float) -> float:
    if t == 0:
        return 0.0
    a_n = a_sequence(p, n)[n]
    return a_n * t ** ((p + 1) * n + 1)


def J_np_bound(n: int, p: int, t: float, rate: float) -> float:
    if t == 0:
        return 0.0
    b_n = b_sequence(p, n)[n]
    log_bound = (
        n * math.log(2.0 / rate)
        + math.log(b_n)
        + ((2 * p + 1) * n + 2) * math.log(t)
        + rate * t * ((p - 1) * n + 1)
    )
    return math.exp(log_bound)


def tree_series_solution(t: float, f_const: float, c_const: float, p: int, n_max: int = SERIES_CAP) -> float:
    """Exact constant-data solution for p >= 2: sum_n f^((p-1)n+1) c^n a_n t^((p+1)n+1)."""
    if t == 0:
        return 0.0
    a = a_sequence(p, min(n_max, SERIES_CAP))
    terms = []
    for n, a_n in enumerate(a):
        term = f_const ** ((p - 1) * n + 1) * c_const ** n * a_n * t ** ((p + 1) * n + 1)
        terms.append(term)
        if n > 0 and abs(term) < SERIES_TOL:
            break
    return math.fsum(terms)


# -------------------------------------------------------------------
# 🎲 Conditioned-simulation oracles
# -------------------------------------------------------------------
def _tree_unit_weight(tree, rate: float, t: float) -> float:
    law = LifetimeLaw(rate=rate)
    w = 1.0
    for k in range(tree.size):
        dt = float(tree.death[k] - tree.birth[k])
        w *= dt / (rho_bar(dt, law) if tree.alive[k] else rho(dt, law))
    return w


def _conditioned_moments(p: int, n: int, t: float, rate: float, M: int, seed: int) -> dict:
    if M < 2:
        raise InvalidArgumentError(f"conditioned moments need M >= 2 for a standard error, got M = {M}")
    cfg = BranchingConfig(p=p, t=t, x=np.zeros(1), law=LifetimeLaw(rate=rate), d=1)
    first = np.zeros(M)
    hit = np.zeros(M, dtype=bool)
    for i in range(M):
        tree = be.simulate(cfg, sample_rng(seed, i))
        if not tree.truncated and tree.branch_count == n:
            hit[i] = True
            first[i] = _tree_unit_weight(tree, rate, t)
    second = first * first
    kept = int(np.count_nonzero(hit))
    return {
        "n": n,
        "kept": kept,
        "mean": math.fsum(first) / M,
        "mean_std_error": float(first.std(ddof=1) / math.sqrt(M)),
        "second": math.fsum(second) / M,
        "second_std_error": float(second.std(ddof=1) / math.sqrt(M)),
        "conditional_mean": math.fsum(first) / kept if kept else 0.0,
    }


def chain_weight_moments(n: int, t: float, rate: float, M: int, seed: int) -> dict:
    """Keep chains with N = n; joint means E[W 1{N=n}] and E[W^2 1{N=n}] with standard errors."""
    return _conditioned_moments(1, n, t, rate, M, seed)


def tree_weight_moments(n: int, p: int, t: float, rate: float, M: int, seed: int) -> dict:
    return _conditioned_moments(p, n, t, rate, M, seed)


# -------------------------------------------------------------------
# 📋 Tables and bound audits
# -------------------------------------------------------------------
def moment_table(p: int, rate: float, t: float, n_max: int) -> MomentTable:
    if n_max < 0:
        raise InvalidArgumentError("n_max must be nonnegative")
    if p == 1:
        return MomentTable(
            p=1,
            rate=rate,
            t=t,
            I=[I_n_chain(n, t) for n in range(n_max + 1)],
            J=[J_n_chain(n, t, rate) for n in range(n_max + 1)],
            pmf=[be.chain_count_pmf(n, rate, t) for n in range(n_max + 1)],
            mean=be.chain_count_moments(rate, t)[0],
            second_moment=be.chain_count_moments(rate, t)[1],
        )
    a = a_sequence(p, n_max)
    b = b_sequence(p, n_max)
    mean, second = be.branch_count_moments(p, rate, t)
    return MomentTable(
        p=p,
        rate=rate,
        t=t,
        I=[a[n] * t ** ((p + 1) * n + 1) for n in range(n_max + 1)],
        J=[J_np_bound(n, p, t, rate) for n in range(n_max + 1)],
        a=a,
        b=b,
        pmf=[be.branch_count_pmf(n, p, rate, t) for n in range(n_max + 1)],
        mean=mean,
        second_moment=second,
    )


def generating_residual(p: int, order: int = 15) -> float:
    """max |[x^m](Q^p - (p-1) Q')| for m < order."""
    q = be.q_coefficients(p, order)
    qp = depril_convolution_power(q, p, order - 1)
    dq = [(m + 1) * q[m + 1] for m in range(order)]
    return max(abs(qp[m] - (p - 1) * dq[m]) for m in range(order))


def audit_moment_bounds(p: int, n_max: int = 30) -> List[BoundAudit]:
    a = a_sequence(p, n_max)
    b = b_sequence(p, n_max)
    conv_a = depril_convolution_power(a, p, n_max)
    conv_b = depril_convolution_power(b, p, n_max)
    audits: List[BoundAudit] = []

    def add(name: str, n: int, value: float, bound: float, rel: float = 1e-12):
        audits.append(
            BoundAudit(name=name, p=p, n=n, value=value, bound=bound, passed=value <= bound * (1.0 + rel))
        )

    for n in range(1, n_max + 1):
        add("a_n", n, a[n], 1.0 / ((p + 1) * n * (p + 2) ** n))
        add("b_n", n, b[n], (1.0 / ((p + 1) * n)) * (2.0 * (2 * p + 1) * (2 * p + 3)) ** (-n))
    for n in range(n_max + 1):
        add("conv_a", n, conv_a[n], float(p + 2) ** (-n))
        add("conv_b", n, conv_b[n], (2.0 * (2 * p + 1) * (2 * p + 3)) ** (-n))

    q = be.q_coefficients(p, min(n_max, 20))
    for n, q_n in enumerate(q):
        closed = be.q_closed_form(p, n)
        add("q_closed_form", n, abs(q_n - closed) / closed, 1e-10, rel=0.0)

    add("ode_residual", 15, generating_residual(p, 15), 1e-9, rel=0.0)
    total = math.fsum(be.branch_count_pmf(n, p, 1.0, 1.0) for n in range(SERIES_CAP + 1))
    add("pmf_mass_defect", SERIES_CAP, abs(1.0 - total), 1e-9, rel=0.0)

    failed = [x for x in audits if not x.passed]
    if failed:
        logger.warning(f"❌ {len(failed)} moment audits failed for p={p}")
    else:
        logger.info(f"✅ {len(audits)} moment audits passed for p={p}")
    return audits
