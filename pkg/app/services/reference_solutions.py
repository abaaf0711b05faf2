import math
from typing import Callable, List, Optional, Tuple

import numpy as np
from loguru import logger
from scipy import integrate
from scipy.interpolate import RegularGridInterpolator

from app.config import settings
from app.errors import ContractionError, DomainError, InvalidArgumentError, QuadratureError
from app.models.wave_models import PicardGrid, PicardSolution, QuadratureConfig, WaveProblem
from app.services.estimators import require_wellposed
from app.services.stochastic_kernels import check_dimension, green_mass, unit_jump_rule


def default_quadrature() -> QuadratureConfig:
    return QuadratureConfig(
        abs_tol=settings.ABS_TOL,
        max_subdivisions=settings.MAX_SUBDIVISIONS,
        sphere_points=settings.SPHERE_POINTS,
        line_nodes=settings.LINE_NODES,
        radial_nodes=settings.RADIAL_NODES,
        angular_nodes=settings.ANGULAR_NODES,
    )


def _scalar(fn: Callable, *args) -> float:
    return float(np.ravel(fn(*args))[0])


# -------------------------------------------------------------------
# 📐 Adaptive Simpson
# -------------------------------------------------------------------
def adaptive_simpson(fn: Callable[[float], float], a: float, b: float, tol: float, max_depth: int = 50) -> Tuple[float, float]:
    """
    Stack-based adaptive Simpson with Richardson correction.
    Returns (value, error estimate); raises QuadratureError when max_depth is hit above tolerance.
    """
    if b == a:
        return 0.0, 0.0
    fa, fm, fb = fn(a), fn(0.5 * (a + b)), fn(b)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    stack = [(a, b, fa, fm, fb, whole, tol, 0)]
    pieces: List[float] = []
    err_total = 0.0
    unresolved = False
    while stack:
        lo, hi, flo, fmid, fhi, s, eps, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        f_l, f_r = fn(0.5 * (lo + mid)), fn(0.5 * (mid + hi))
        left = (mid - lo) / 6.0 * (flo + 4.0 * f_l + fmid)
        right = (hi - mid) / 6.0 * (fmid + 4.0 * f_r + fhi)
        diff = left + right - s
        if abs(diff) <= 15.0 * eps or depth >= max_depth:
            if abs(diff) > 15.0 * eps:
                unresolved = True
            pieces.append(left + right + diff / 15.0)
            err_total += abs(diff) / 15.0
            continue
        stack.append((mid, hi, fmid, f_r, fhi, right, 0.5 * eps, depth + 1))
        stack.append((lo, mid, flo, f_l, fmid, left, 0.5 * eps, depth + 1))
    if unresolved:
        raise QuadratureError("adaptive Simpson hit its depth limit before reaching tolerance", err_total)
    return math.fsum(pieces), err_total


# -------------------------------------------------------------------
# 〰️ d'Alembert (d = 1)
# -------------------------------------------------------------------
def dalembert(f2: Callable, F: Optional[Callable], t: float, x: float, cfg: Optional[QuadratureConfig] = None) -> float:
    """U(t, x) = 1/2 int_{x-t}^{x+t} f2 + 1/2 int_0^t int_{x-(t-s)}^{x+(t-s)} F(s, y) dy ds."""
    cfg = cfg or default_quadrature()
    if t < 0:
        raise DomainError("t must be nonnegative")
    x = float(np.ravel(x)[0])
    tol = cfg.abs_tol
    depth = cfg.max_subdivisions
    head, _ = adaptive_simpson(lambda y: _scalar(f2, np.array([y])), x - t, x + t, tol, depth)
    if F is None or t == 0:
        return 0.5 * head

    inner_tol = tol / (2.0 * max(t, 1.0))

    def slab(s: float) -> float:
        r = t - s
        val, _ = adaptive_simpson(lambda y: _scalar(F, s, np.array([y])), x - r, x + r, inner_tol, depth)
        return val

    body, _ = adaptive_simpson(slab, 0.0, t, tol, depth)
    return 0.5 * (head + body)


# -------------------------------------------------------------------
# 🌐 Duhamel quadrature (d = 1, 2, 3)
# -------------------------------------------------------------------
def spherical_mean(fn: Callable, x: np.ndarray, r: float, d: int, cfg: QuadratureConfig) -> float:
    """E[fn(x + r Z)] with a fixed rule for the law of Z."""
    nodes, weights = unit_jump_rule(d, cfg)
    vals = np.asarray(fn(x + r * nodes), dtype=float)
    return float(np.dot(weights, vals))


def duhamel_quadrature(
    d: int,
    f2: Callable,
    F: Optional[Callable],
    t: float,
    x,
    cfg: Optional[QuadratureConfig] = None,
) -> float:
    """
    g2(t) * f2 + int_0^t g2(t - s) * F(s) ds at x, written as
    green_mass(t) E[f2(x + tZ)] + int_0^t (t - s) E[F(s, x + (t - s) Z)] ds.
    The d = 2 kernel singularity is removed by |z| = sin(theta) inside the rule.
    """
    check_dimension(d)
    cfg = cfg or default_quadrature()
    point = np.atleast_1d(np.asarray(x, dtype=float))
    if point.shape != (d,):
        raise DomainError(f"x has shape {point.shape}, expected ({d},)")
    head = green_mass(t) * spherical_mean(f2, point, t, d, cfg)
    if F is None or t == 0:
        return head

    nodes, weights = unit_jump_rule(d, cfg)

    def slab(s: float) -> float:
        r = t - s
        return r * float(np.dot(weights, np.asarray(F(s, point + r * nodes), dtype=float)))

    body, abserr, _ = integrate.quad(slab, 0.0, t, epsabs=cfg.abs_tol, epsrel=0.0, limit=cfg.max_subdivisions, full_output=1)[:3]
    if abserr > cfg.abs_tol:
        raise QuadratureError("Duhamel time integral did not reach tolerance", abserr)
    return head + body


# -------------------------------------------------------------------
# 🔁 Picard iteration on a space-time grid
# -------------------------------------------------------------------
def _duhamel_on_grid(
    values: np.ndarray,
    times: np.ndarray,
    axis: np.ndarray,
    d: int,
    nodes: np.ndarray,
    weights: np.ndarray,
    pts: np.ndarray,
) -> np.ndarray:
    """int_0^{t_j} (t_j - s) E[G(s, x + (t_j - s) Z)] ds on the grid, trapezoid rule in s."""
    n_t = times.size
    out = np.zeros((n_t, pts.shape[0]))
    slices = [RegularGridInterpolator((axis,) * d, values[l], method="linear", bounds_error=False, fill_value=None) for l in range(n_t)]
    for j in range(1, n_t):
        acc = np.zeros(pts.shape[0])
        for l in range(j + 1):
            r = times[j] - times[l]
            if r == 0.0:
                continue
            shifted = pts[:, None, :] + r * nodes[None, :, :]
            vals = slices[l](shifted.reshape(-1, d)).reshape(pts.shape[0], nodes.shape[0])
            w_trap = 0.5 if l in (0, j) else 1.0
            acc += w_trap * r * (vals @ weights)
        out[j] = acc * (times[1] - times[0])
    return out


def picard_nonlinear(
    problem: WaveProblem,
    T_small: float,
    grid: Optional[PicardGrid] = None,
    iterations: int = 30,
    tol: float = 1e-12,
    cfg: Optional[QuadratureConfig] = None,
) -> PicardSolution:
    """
    Fixed point of U = g2 * f + int g2(t - s) * (c U^p)(s) ds on [0, T_small] x [-L, L]^d.
    p = 1 is the perturbative equation; successive increments must contract.
    """
    d = check_dimension(problem.d)
    if problem.p < 1:
        raise InvalidArgumentError("picard_nonlinear needs p >= 1")
    if problem.p >= 2:
        require_wellposed(problem.model_copy(update={"T": T_small}))
    cfg = cfg or QuadratureConfig(line_nodes=16, radial_nodes=12, angular_nodes=16, sphere_points=64)
    if grid is None:
        grid = PicardGrid(n_t=41, n_x=101, half_width=2.0 * T_small) if d == 1 else PicardGrid(n_t=11, n_x=21, half_width=2.0 * T_small)

    times = np.linspace(0.0, T_small, grid.n_t)
    axis = np.linspace(-grid.half_width, grid.half_width, grid.n_x)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    pts = np.column_stack([m.ravel() for m in mesh])
    nodes, weights = unit_jump_rule(d, cfg)
    shape = (grid.n_t,) + (grid.n_x,) * d

    linear = np.empty((grid.n_t, pts.shape[0]))
    for j, t in enumerate(times):
        shifted = pts[:, None, :] + t * nodes[None, :, :]
        linear[j] = t * (np.asarray(problem.f(shifted), dtype=float) @ weights)

    if problem.c is None:
        c_vals = np.zeros_like(linear)
    else:
        c_vals = np.stack([np.broadcast_to(np.asarray(problem.c(s, pts), dtype=float), (pts.shape[0],)) for s in times])

    current = linear
    increments: List[float] = []
    ratios: List[float] = []
    done = 0
    for k in range(iterations):
        source = c_vals * current ** problem.p
        nxt = linear + _duhamel_on_grid(source.reshape(shape), times, axis, d, nodes, weights, pts)
        inc = float(np.max(np.abs(nxt - current)))
        increments.append(inc)
        current = nxt
        done = k + 1
        if len(increments) >= 2 and increments[-2] > tol:
            ratio = inc / increments[-2]
            ratios.append(ratio)
            if ratio >= 1.0:
                raise ContractionError(f"Picard increments stopped contracting (ratio {ratio:.3g})", ratios)
        if inc <= tol:
            break
    logger.info(f"🔁 Picard converged in {done} iterations, last increment {increments[-1]:.2e}")
    return PicardSolution(
        times=times,
        axis=axis,
        d=d,
        values=current.reshape(shape),
        increments=increments,
        contraction_factors=ratios,
        iterations=done,
    )


# -------------------------------------------------------------------
# 🎯 Oracle selection
# -------------------------------------------------------------------
Oracle = Callable[[np.ndarray], np.ndarray]


def default_oracle(
    problem: WaveProblem,
    t: float,
    cfg: Optional[QuadratureConfig] = None,
    grid: Optional[PicardGrid] = None,
) -> Oracle:
    """
    Batch oracle x -> U(t, x) for a problem:
    - p = 0, d = 1: d'Alembert
    - p = 0, d = 2, 3: Duhamel quadrature
    - p >= 1: Picard iteration on [0, t]
    """
    d = check_dimension(problem.d)
    if t == 0:
        return lambda points: np.zeros(np.atleast_2d(points).shape[0])
    if problem.p == 0:
        if d == 1:
            return lambda points: np.array([dalembert(problem.f, problem.F_lin, t, pt, cfg) for pt in np.atleast_2d(points)])
        return lambda points: np.array(
            [duhamel_quadrature(d, problem.f, problem.F_lin, t, pt, cfg) for pt in np.atleast_2d(points)]
        )
    solution = picard_nonlinear(problem, t, grid=grid, cfg=cfg)
    return solution.at_time(t)
