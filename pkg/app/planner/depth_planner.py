import math
from typing import List, Tuple

from app.errors import InvalidArgumentError


# -------------------------------------------------------------------
# 🪚 Sawtooth depth for the pairwise product
# -------------------------------------------------------------------
def yarotsky_depth(R: float, eps: float) -> int:
    """
    Smallest m >= 1 with R^2 * 2^(-2m-2) <= eps.
    The product network then has 2m + 2 hidden layers.
    """
    if R <= 0:
        raise InvalidArgumentError("R must be positive")
    if not 0 < eps < 0.5:
        raise InvalidArgumentError(f"eps must lie in (0, 1/2), got {eps}")
    m = 1
    while R * R * 2.0 ** (-2 * m - 2) > eps:
        m += 1
    return m


def product_regime(R: float) -> str:
    return "R<1" if R < 1 else "R>=1"


def kfold_schedule(k: int, R: float, eps: float) -> List[Tuple[float, float]]:
    """
    (R_i, eps_i) for the chained pairwise products i = 1..k-1.
    - R < 1: eps_i = eps R^(i+1), R_i = max(R, i R^i)
    - R >= 1: eps_i = eps, R_i = i R^i
    """
    if k < 2:
        raise InvalidArgumentError("kfold_product needs k >= 2")
    schedule = []
    for i in range(1, k):
        if R < 1:
            schedule.append((max(R, i * R ** i), eps * R ** (i + 1)))
        else:
            schedule.append((i * R ** i, eps))
    return schedule


def log_ceil(v: float) -> float:
    return math.log(math.ceil(v)) if v > 0 else 0.0


# -------------------------------------------------------------------
# 🧩 Depth matching
# -------------------------------------------------------------------
def depth_case(h_first: int, h_second: int) -> str:
    """Which operand gets extended before a sum: 'first', 'second' or 'none'."""
    if h_first < h_second:
        return "first"
    if h_first > h_second:
        return "second"
    return "none"