import math
from typing import List, Optional

import numpy as np
from joblib import Parallel, delayed
from loguru import logger
from scipy.special import gammaln
from scipy.stats import poisson

from app.config import settings
from app.errors import DomainError, InvalidArgumentError
from app.models.wave_models import BranchingConfig, BranchingTree, LawCheckReport, LifetimeLaw
from app.services.stochastic_kernels import check_dimension, sample_rng, sample_tau, sample_unit_jump

PMF_RECURRENCE_LIMIT = 64
TREE_TOL = 1e-12


# -------------------------------------------------------------------
# 🌱 Simulation
# -------------------------------------------------------------------
def _finish(cfg: BranchingConfig, parent, birth, death, position, alive, truncated: bool) -> BranchingTree:
    tree = BranchingTree(
        parent=np.asarray(parent, dtype=np.int64),
        birth=np.asarray(birth, dtype=float),
        death=np.asarray(death, dtype=float),
        position=np.asarray(position, dtype=float).reshape(len(parent), cfg.d),
        alive=np.asarray(alive, dtype=bool),
        root=cfg.x.copy(),
        p=cfg.p,
        truncated=truncated,
    )
    if truncated:
        logger.warning(f"⚠️ tree truncated at {tree.size} particles (cap {cfg.particle_cap})")
    elif settings.CHECK_INVARIANTS:
        check_tree_invariants(tree, cfg)
    return tree


def _live(cfg: BranchingConfig, birth: float, start: np.ndarray, rng: np.random.Generator):
    """One particle: draw tau then Z, clip at the horizon, move by delta * Z."""
    tau = sample_tau(cfg.law, rng)
    z = sample_unit_jump(cfg.d, rng)
    end = birth + tau
    survives = end >= cfg.t
    death = cfg.t if survives else end
    return death, start + (death - birth) * z, survives


def simulate_chain(cfg: BranchingConfig, rng: np.random.Generator) -> BranchingTree:
    if cfg.p != 1:
        raise InvalidArgumentError(f"simulate_chain needs p = 1, got p = {cfg.p}")
    check_dimension(cfg.d)

    parent: List[int] = []
    birth: List[float] = []
    death: List[float] = []
    position: List[np.ndarray] = []
    alive: List[bool] = []

    start, t0 = cfg.x, 0.0
    while True:
        if len(parent) >= cfg.particle_cap:
            return _finish(cfg, parent, birth, death, position, alive, truncated=True)
        d_k, pos, survives = _live(cfg, t0, start, rng)
        parent.append(len(parent) - 1)
        birth.append(t0)
        death.append(d_k)
        position.append(pos)
        alive.append(survives)
        if survives:
            break
        start, t0 = pos, d_k
    return _finish(cfg, parent, birth, death, position, alive, truncated=False)


def simulate_tree(cfg: BranchingConfig, rng: np.random.Generator) -> BranchingTree:
    """Depth-first p-ary tree; children are created left to right and explored in that order."""
    if cfg.p < 2:
        raise InvalidArgumentError(f"simulate_tree needs p >= 2, got p = {cfg.p}")
    check_dimension(cfg.d)

    parent: List[int] = [-1]
    birth: List[float] = [0.0]
    starts: List[np.ndarray] = [cfg.x]
    death: List[float] = [0.0]
    position: List[Optional[np.ndarray]] = [None]
    alive: List[bool] = [False]

    stack = [0]
    while stack:
        k = stack.pop()
        d_k, pos, survives = _live(cfg, birth[k], starts[k], rng)
        death[k], position[k], alive[k] = d_k, pos, survives
        if survives:
            continue
        if len(parent) + cfg.p > cfg.particle_cap:
            done = [i for i in range(len(parent)) if position[i] is not None]
            renumber = {old: new for new, old in enumerate(done)}
            renumber[-1] = -1
            return _finish(
                cfg,
                [renumber[parent[i]] for i in done],
                [birth[i] for i in done],
                [death[i] for i in done],
                [position[i] for i in done],
                [alive[i] for i in done],
                truncated=True,
            )
        first = len(parent)
        for _ in range(cfg.p):
            parent.append(k)
            birth.append(d_k)
            starts.append(pos)
            death.append(0.0)
            position.append(None)
            alive.append(False)
        stack.extend(range(first + cfg.p - 1, first - 1, -1))

    return _finish(cfg, parent, birth, death, position, alive, truncated=False)


def simulate(cfg: BranchingConfig, rng: np.random.Generator) -> BranchingTree:
    return simulate_chain(cfg, rng) if cfg.p == 1 else simulate_tree(cfg, rng)


def tree_offsets(tree: BranchingTree) -> np.ndarray:
    """Displacements X_k - x; frozen samples reuse them for any root x."""
    return tree.position - tree.root


# -------------------------------------------------------------------
# 🔍 Invariants
# -------------------------------------------------------------------
def check_tree_invariants(tree: BranchingTree, cfg: BranchingConfig) -> None:
    n = tree.size
    assert n >= 1, "empty tree"
    delta = tree.delta
    assert np.all(delta >= 0), "negative delta"
    assert np.all(tree.death <= cfg.t + TREE_TOL), "death after horizon"
    assert np.all(tree.alive == (tree.death == cfg.t)), "alive iff death == t"

    children = np.bincount(tree.parent[tree.parent >= 0], minlength=n)
    assert np.all(children[tree.alive] == 0), "alive particle with children"
    if not tree.truncated:
        assert np.all(children[~tree.alive] == cfg.p), "dead particle without exactly p children"
        assert tree.alive_set.size == (cfg.p - 1) * tree.branch_count + 1, "alive count != (p-1)N + 1"

    for k in range(n):
        par = tree.parent[k]
        if par >= 0:
            assert tree.birth[k] == tree.death[par], f"particle {k} not born at its parent's death"
        assert np.linalg.norm(tree.position[k] - tree.root) <= tree.death[k] + TREE_TOL, f"particle {k} left the cone"

    # telescoping of delta along ancestor chains
    total = np.zeros(n)
    for k in range(n):
        par = tree.parent[k]
        total[k] = delta[k] + (total[par] if par >= 0 else 0.0)
    assert np.allclose(total, tree.death, rtol=0.0, atol=TREE_TOL), "ancestor deltas do not telescope"


# -------------------------------------------------------------------
# 🧾 Debug dump
# -------------------------------------------------------------------
def dump_tree(tree: BranchingTree) -> str:
    lines = [f"# p={tree.p} d={tree.position.shape[1]} truncated={int(tree.truncated)}"]
    for k in range(tree.size):
        coords = " ".join(repr(float(v)) for v in tree.position[k])
        lines.append(
            f"{k} {int(tree.parent[k])} {float(tree.birth[k])!r} {float(tree.death[k])!r} {int(tree.alive[k])} {coords}"
        )
    return "\n".join(lines) + "\n"


def parse_tree_dump(text: str, root: Optional[np.ndarray] = None) -> BranchingTree:
    header, *rows = [ln for ln in text.splitlines() if ln.strip()]
    meta = dict(item.split("=") for item in header.lstrip("# ").split())
    d = int(meta["d"])
    cols = np.array([[float(v) for v in row.split()] for row in rows]).reshape(len(rows), 5 + d)
    return BranchingTree(
        parent=cols[:, 1].astype(np.int64),
        birth=cols[:, 2].copy(),
        death=cols[:, 3].copy(),
        alive=cols[:, 4].astype(bool),
        position=cols[:, 5:].copy(),
        root=np.zeros(d) if root is None else np.asarray(root, dtype=float),
        p=int(meta["p"]),
        truncated=bool(int(meta["truncated"])),
    )


# -------------------------------------------------------------------
# 📊 Exact branch-count laws
# -------------------------------------------------------------------
def q_coefficients(p: int, n_max: int) -> List[float]:
    """q_0 = 1, q_n = conv^p(q)_{n-1} / (n (p - 1))."""
    from app.services.moment_oracles import depril_convolution_power

    if p < 2:
        raise InvalidArgumentError("q coefficients need p >= 2")
    q = [1.0]
    for n in range(1, n_max + 1):
        conv = depril_convolution_power(q, p, n - 1)
        q.append(conv[n - 1] / (n * (p - 1)))
    return q


def q_closed_form(p: int, n: int) -> float:
    alpha = 1.0 / (p - 1)
    return math.exp(gammaln(n + alpha) - gammaln(alpha) - gammaln(n + 1))


def branch_count_pmf(n: int, p: int, rate: float, t: float) -> float:
    if n < 0:
        return 0.0
    if p < 2:
        raise InvalidArgumentError("branch_count_pmf needs p >= 2; use chain_count_pmf for p = 1")
    if t < 0:
        raise DomainError(f"time must be nonnegative, got {t}")
    if t == 0:
        return 1.0 if n == 0 else 0.0
    if n <= PMF_RECURRENCE_LIMIT:
        q_n = _q_cache(p, PMF_RECURRENCE_LIMIT)[n]
        log_q = math.log(q_n)
    else:
        alpha = 1.0 / (p - 1)
        log_q = gammaln(n + alpha) - gammaln(alpha) - gammaln(n + 1)
    log_success = math.log(-math.expm1(-rate * t * (p - 1)))
    return math.exp(log_q - rate * t + n * log_success)


_Q_CACHE: dict = {}


def _q_cache(p: int, n_max: int) -> List[float]:
    if p not in _Q_CACHE:
        _Q_CACHE[p] = q_coefficients(p, n_max)
    return _Q_CACHE[p]


def branch_count_moments(p: int, rate: float, t: float):
    if p < 2:
        raise InvalidArgumentError("branch_count_moments needs p >= 2; use chain_count_moments for p = 1")
    mean = math.expm1(rate * t * (p - 1)) / (p - 1)
    return mean, mean + p * mean * mean


def chain_count_pmf(n: int, rate: float, t: float) -> float:
    return float(poisson.pmf(n, rate * t))


def chain_count_moments(rate: float, t: float):
    m = rate * t
    return m, m * m + m


def count_pmf(n: int, p: int, rate: float, t: float) -> float:
    return chain_count_pmf(n, rate, t) if p == 1 else branch_count_pmf(n, p, rate, t)


def count_moments(p: int, rate: float, t: float):
    return chain_count_moments(rate, t) if p == 1 else branch_count_moments(p, rate, t)


# -------------------------------------------------------------------
# 🧪 Empirical law check
# -------------------------------------------------------------------
def _count_chunk(p: int, rate: float, t: float, d: int, seed: int, start: int, stop: int, cap: int):
    cfg = BranchingConfig(p=p, t=t, x=np.zeros(d), law=LifetimeLaw(rate=rate), d=d, particle_cap=cap)
    counts = np.empty(stop - start, dtype=np.int64)
    for j, i in enumerate(range(start, stop)):
        tree = simulate(cfg, sample_rng(seed, i))
        counts[j] = -1 if tree.truncated else tree.branch_count
    return counts


def branch_count_lawcheck(
    p: int,
    rate: float,
    t: float,
    M: int,
    seed: int,
    workers: int = 1,
    d: int = 1,
) -> LawCheckReport:
    """Empirical law of N against the exact pmf (Poisson when p = 1)."""
    if M <= 0:
        raise InvalidArgumentError("M must be positive")
    chunk = settings.CHUNK_SIZE
    bounds = [(a, min(a + chunk, M)) for a in range(0, M, chunk)]
    parts = Parallel(n_jobs=workers, backend=settings.PARALLEL_BACKEND)(
        delayed(_count_chunk)(p, rate, t, d, seed, a, b, settings.PARTICLE_CAP) for a, b in bounds
    )
    counts = np.concatenate(parts)
    truncated = int(np.count_nonzero(counts < 0))
    counts = counts[counts >= 0]
    kept = counts.size

    n_top = int(counts.max()) if kept else 0
    hist = np.bincount(counts, minlength=n_top + 1)
    emp = hist / max(kept, 1)
    analytic = np.array([count_pmf(n, p, rate, t) for n in range(n_top + 1)])
    tail = max(0.0, 1.0 - math.fsum(analytic))
    tv = 0.5 * (math.fsum(np.abs(emp - analytic)) + tail)

    mean_a, second_a = count_moments(p, rate, t)
    c = counts.astype(float)
    c2 = c * c
    report = LawCheckReport(
        p=p,
        rate=rate,
        t=t,
        M=M,
        seed=seed,
        counts=hist.tolist(),
        empirical_pmf=emp.tolist(),
        analytic_pmf=analytic.tolist(),
        tv_distance=tv,
        empirical_mean=float(c.mean()),
        mean_std_error=float(c.std(ddof=1) / math.sqrt(kept)) if kept > 1 else 0.0,
        analytic_mean=mean_a,
        empirical_second=float(c2.mean()),
        second_std_error=float(c2.std(ddof=1) / math.sqrt(kept)) if kept > 1 else 0.0,
        analytic_second=second_a,
        truncated=truncated,
    )
    logger.info(f"📊 law check p={p} rate*t={rate * t:.3g}: TV={tv:.4f} over {kept} trees")
    return report
