import math
from typing import Tuple

import numpy as np

from app.errors import DomainError
from app.models.wave_models import LifetimeLaw, QuadratureConfig

SUPPORTED_DIMENSIONS = (1, 2, 3)


def check_dimension(d: int) -> int:
    if d not in SUPPORTED_DIMENSIONS:
        raise DomainError(f"dimension d={d} is not supported (expected one of {SUPPORTED_DIMENSIONS})")
    return int(d)


def _check_time(t: float) -> float:
    if t < 0 or math.isnan(t):
        raise DomainError(f"time must be nonnegative, got {t}")
    return float(t)


# -------------------------------------------------------------------
# ⏳ Lifetime law
# -------------------------------------------------------------------
def rho(t: float, law: LifetimeLaw) -> float:
    t = _check_time(t)
    return law.rate * math.exp(-law.rate * t)


def rho_bar(t: float, law: LifetimeLaw) -> float:
    t = _check_time(t)
    return math.exp(-law.rate * t)


def lifetime_cdf(t: float, law: LifetimeLaw) -> float:
    t = _check_time(t)
    return -math.expm1(-law.rate * t)


def sample_tau(law: LifetimeLaw, rng: np.random.Generator) -> float:
    return float(rng.exponential(1.0 / law.rate))


# -------------------------------------------------------------------
# 🎯 Unit jump law Z and the Green measure
# -------------------------------------------------------------------
def sample_unit_jump(d: int, rng: np.random.Generator) -> np.ndarray:
    """
    Draw Z from the normalised Green measure:
    - d=1: uniform on [-1, 1]
    - d=2: density (1 - |z|^2)^(-1/2) / (2 pi) on the open disk, radius by inverse CDF
    - d=3: uniform on the unit sphere
    """
    d = check_dimension(d)
    if d == 1:
        return np.array([rng.uniform(-1.0, 1.0)])
    if d == 2:
        u = rng.random()
        theta = 2.0 * math.pi * rng.random()
        r = math.sqrt(u * (2.0 - u))
        return np.array([r * math.cos(theta), r * math.sin(theta)])
    g = rng.standard_normal(3)
    return g / np.linalg.norm(g)


def green_mass(t: float) -> float:
    """Total mass of g2(t, .), i.e. its density with respect to mu2."""
    return _check_time(t)


def sample_position(x: np.ndarray, t: float, d: int, rng: np.random.Generator) -> np.ndarray:
    t = _check_time(t)
    return np.asarray(x, dtype=float) + t * sample_unit_jump(d, rng)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-keyed stream for sample `index` of a run seeded with `seed`."""
    return np.random.default_rng([int(seed), int(index)])


# -------------------------------------------------------------------
# 📐 Deterministic quadrature for E[h(Z)]
# -------------------------------------------------------------------
def _spiral_sphere(n: int) -> np.ndarray:
    half = max(1, n // 2)
    i = np.arange(half) + 0.5
    z = 1.0 - i / half  # upper hemisphere, antipodes added below
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = math.pi * (3.0 - math.sqrt(5.0)) * np.arange(half)
    upper = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    return np.vstack([upper, -upper])


def unit_jump_rule(d: int, cfg: QuadratureConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes (n, d) and weights (n,) with sum(w h(nodes)) ~ E[h(Z)]."""
    d = check_dimension(d)
    if d == 1:
        nodes, weights = np.polynomial.legendre.leggauss(cfg.line_nodes)
        return nodes[:, None], weights / 2.0
    if d == 2:
        # |z| = sin(theta) turns the density into sin(theta) dtheta dphi / (2 pi)
        g, gw = np.polynomial.legendre.leggauss(cfg.radial_nodes)
        theta = (g + 1.0) * (math.pi / 4.0)
        wtheta = gw * (math.pi / 4.0) * np.sin(theta)
        phi = 2.0 * math.pi * np.arange(cfg.angular_nodes) / cfg.angular_nodes
        radius = np.sin(theta)
        nodes = np.stack(
            [np.outer(radius, np.cos(phi)).ravel(), np.outer(radius, np.sin(phi)).ravel()], axis=1
        )
        weights = np.repeat(wtheta, cfg.angular_nodes) / cfg.angular_nodes
        return nodes, weights
    nodes = _spiral_sphere(cfg.sphere_points)
    return nodes, np.full(nodes.shape[0], 1.0 / nodes.shape[0])
