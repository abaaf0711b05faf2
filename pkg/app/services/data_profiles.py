import math
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.errors import AuditFailureError, InvalidArgumentError, PreconditionError
from app.models.network import DataNets, NeuralNet
from app.services import relu_algebra as ra
from app.services.relu_products import product_of_nets


# ------------------------------------------------------------
#  1-d factor library
# ------------------------------------------------------------
class Factor1D(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    sup: float = Field(..., ge=0)
    lipschitz: float = Field(..., ge=0)

    @property
    def is_constant_one(self) -> bool:
        return self.name == "const"


def _sech(x):
    return 1.0 / np.cosh(x)


FACTORS: Dict[str, Factor1D] = {
    "const": Factor1D(name="const", fn=lambda x: np.ones_like(np.asarray(x, dtype=float)), sup=1.0, lipschitz=0.0),
    "cos": Factor1D(name="cos", fn=np.cos, sup=1.0, lipschitz=1.0),
    "sin": Factor1D(name="sin", fn=np.sin, sup=1.0, lipschitz=1.0),
    "gauss": Factor1D(name="gauss", fn=lambda x: np.exp(-np.asarray(x) ** 2), sup=1.0, lipschitz=math.sqrt(2.0 / math.e)),
    "sech": Factor1D(name="sech", fn=_sech, sup=1.0, lipschitz=0.5),
}

TIME_FACTORS: Dict[str, Factor1D] = {
    "const": FACTORS["const"],
    "cos_t": Factor1D(name="cos_t", fn=np.cos, sup=1.0, lipschitz=1.0),
    "decay_t": Factor1D(name="decay_t", fn=lambda s: np.exp(-np.asarray(s)), sup=1.0, lipschitz=1.0),
}

SHIFT_PROFILES = ("zero", "linear", "sqnorm")


class DataProfile(BaseModel):
    """
    scale * time_factor(s) * prod_i factor(x_i).
    Evaluation accepts arrays whose last axis holds the d coordinates.
    """

    model_config = ConfigDict(frozen=True)

    factor: str = "const"
    scale: float = 1.0
    time_factor: str = "const"
    d: int = 1

    @field_validator("factor")
    @classmethod
    def _known_factor(cls, v):
        if v not in FACTORS and v != "zero":
            raise ValueError(f"unknown factor '{v}' (choose from {sorted(FACTORS) + ['zero']})")
        return v

    @field_validator("time_factor")
    @classmethod
    def _known_time_factor(cls, v):
        if v not in TIME_FACTORS:
            raise ValueError(f"unknown time factor '{v}' (choose from {sorted(TIME_FACTORS)})")
        return v

    @property
    def is_zero(self) -> bool:
        return self.factor == "zero" or self.scale == 0.0

    @property
    def sup(self) -> float:
        return 0.0 if self.is_zero else abs(self.scale)

    def space(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.is_zero:
            return np.zeros(x.shape[:-1])
        fac = FACTORS[self.factor].fn
        out = np.full(x.shape[:-1], self.scale)
        for i in range(self.d):
            out = out * fac(x[..., i])
        return out

    def spacetime(self, s, x) -> np.ndarray:
        return np.asarray(TIME_FACTORS[self.time_factor].fn(np.asarray(s, dtype=float))) * self.space(x)


def shift_profile(name: str) -> Optional[Callable]:
    """Initial-position profiles f1 for reduce_problem."""
    if name == "zero":
        return None
    if name == "linear":
        return lambda x: np.asarray(x, dtype=float)[..., 0]
    if name == "sqnorm":
        return lambda x: np.sum(np.asarray(x, dtype=float) ** 2, axis=-1)
    raise InvalidArgumentError(f"unknown shift profile '{name}' (choose from {SHIFT_PROFILES})")


def shift_laplacian(name: str) -> Optional[Callable]:
    """Exact Laplacian of a shift profile, constant in x."""
    if name == "zero":
        return None
    if name == "linear":
        return lambda x: np.zeros(np.shape(x)[:-1])
    if name == "sqnorm":
        return lambda x: np.full(np.shape(x)[:-1], 2.0 * np.shape(x)[-1])
    raise InvalidArgumentError(f"unknown shift profile '{name}' (choose from {SHIFT_PROFILES})")


def shift_laplacian_sup(name: str, d: int) -> float:
    return 2.0 * d if name == "sqnorm" else 0.0


# ------------------------------------------------------------
#  1-d interpolants
# ------------------------------------------------------------
SLOPE_TOL = 1e-12


def build_interpolant_net_1d(
    f: Callable,
    interval: Tuple[float, float],
    eps: float,
    lipschitz: Optional[float] = None,
) -> NeuralNet:
    """
    Exact ReLU form of the piecewise-linear interpolant of f on a uniform grid with spacing <= eps / L:
    f(a) + s_0 (relu(x - a) - relu(a - x)) + sum_j (s_j - s_{j-1}) relu(x - x_j).
    Knots whose slope does not change are dropped.
    """
    if lipschitz is None:
        raise InvalidArgumentError("a Lipschitz bound is required to size the interpolation grid")
    if eps <= 0:
        raise InvalidArgumentError("eps must be positive")
    a, b = float(interval[0]), float(interval[1])
    if not b > a:
        raise InvalidArgumentError("interval must have positive length")
    n = max(1, math.ceil((b - a) * lipschitz / eps))
    if a < 0 < b and math.isclose(-a, b) and n % 2:
        n += 1  # keep 0 on the grid for symmetric intervals
    knots = np.linspace(a, b, n + 1)
    values = np.asarray(f(knots), dtype=float)
    slopes = np.diff(values) / np.diff(knots)
    jumps = np.diff(slopes)
    scale = max(1.0, float(np.max(np.abs(slopes))))
    keep = np.flatnonzero(np.abs(jumps) > SLOPE_TOL * scale)

    w1 = [1.0, -1.0] + [1.0] * keep.size
    b1 = [-a, a] + [-float(knots[j + 1]) for j in keep]
    w2 = [float(slopes[0]), -float(slopes[0])] + [float(jumps[j]) for j in keep]
    return NeuralNet.from_layers([(np.array(w1)[:, None], np.array(b1)), (np.array(w2)[None, :], np.array([values[0]]))])


# ------------------------------------------------------------
#  Separable products
# ------------------------------------------------------------
FactorSpec = Union[Factor1D, Tuple[Callable, float]]


def _as_factor(item: FactorSpec, i: int) -> Factor1D:
    if isinstance(item, Factor1D):
        return item
    fn, lip = item
    return Factor1D(name=f"factor{i}", fn=fn, sup=1.0, lipschitz=float(lip))


def build_separable_net(
    factors: Sequence[FactorSpec],
    d: int,
    domain: Union[Tuple[float, float], Sequence[Tuple[float, float]]],
    eps: float,
) -> NeuralNet:
    """
    Net for prod_i phi_i(x_i) on a box, each |phi_i| <= 1.
    Interpolation gets eps / (4k) per factor and the product network eps / 2.
    """
    if len(factors) != d:
        raise InvalidArgumentError(f"expected {d} factors, got {len(factors)}")
    boxes = [tuple(domain)] * d if np.ndim(domain) == 1 else [tuple(iv) for iv in domain]
    facs = [_as_factor(item, i) for i, item in enumerate(factors)]

    for fac, (lo, hi) in zip(facs, boxes):
        grid = np.linspace(lo, hi, 1001)
        if fac.sup > 1.0 or float(np.max(np.abs(fac.fn(grid)))) > 1.0 + 1e-12:
            raise PreconditionError(f"factor '{fac.name}' exceeds 1 in absolute value on [{lo}, {hi}]")

    active = [(i, fac) for i, fac in enumerate(facs) if not fac.is_constant_one]
    if not active:
        return ra.constant_net(d, 1.0)
    k = len(active)
    if k == 1:
        i, fac = active[0]
        net = build_interpolant_net_1d(fac.fn, boxes[i], eps, fac.lipschitz)
        return ra.embed_inputs(net, d, [i])

    e_int = eps / (4 * k)
    parts = [
        ra.embed_inputs(build_interpolant_net_1d(fac.fn, boxes[i], e_int, fac.lipschitz), d, [i]) for i, fac in active
    ]
    return product_of_nets(parts, R=1.0 + e_int, eps=eps / 2)


def box_grid(boxes: Sequence[Tuple[float, float]], n: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, n) for lo, hi in boxes]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def _profile_net(profile: DataProfile, boxes, eps: float, with_time: bool) -> NeuralNet:
    in_dim = profile.d + (1 if with_time else 0)
    if profile.is_zero:
        return ra.zero_net(in_dim)
    spatial = [FACTORS[profile.factor]] * profile.d
    factors = ([TIME_FACTORS[profile.time_factor]] if with_time else []) + spatial
    net = build_separable_net(factors, in_dim, boxes, eps / abs(profile.scale))
    return ra.affine_wrap(net, scale=profile.scale)


def build_data_nets(
    f_profile: DataProfile,
    c_profile: Optional[DataProfile],
    d: int,
    T: float,
    delta: float,
    audit_n: Optional[int] = None,
) -> DataNets:
    """
    Data networks on |x_i| <= 2T (and s in [0, T] for c), audited on a grid.
    """
    space = [(-2.0 * T, 2.0 * T)] * d
    phi_f = _profile_net(f_profile, space, delta, with_time=False)
    c_prof = c_profile or DataProfile(factor="zero", d=d)
    phi_c = _profile_net(c_prof, [(0.0, T)] + space, delta, with_time=True)

    n = audit_n or {1: 2001, 2: 101, 3: 25}[d]
    pts = box_grid(space, n)
    f_err = float(np.max(np.abs(ra.realize_scalar(phi_f, pts) - f_profile.space(pts))))
    st = box_grid([(0.0, T)] + space, max(5, n // 4 if d > 1 else 201))
    c_err = float(np.max(np.abs(ra.realize_scalar(phi_c, st) - c_prof.spacetime(st[:, 0], st[:, 1:]))))
    if max(f_err, c_err) > delta:
        raise AuditFailureError(f"data network error {max(f_err, c_err):.3e} exceeds delta = {delta:.3e}")
    logger.info(f"✅ data nets built: f error {f_err:.2e}, c error {c_err:.2e} (delta {delta:.2e})")
    return DataNets(
        phi_f=phi_f,
        phi_c=phi_c,
        eps_data=delta,
        f_sup=f_profile.sup,
        c_sup=c_prof.sup,
        measured_f_error=f_err,
        measured_c_error=c_err,
    )
