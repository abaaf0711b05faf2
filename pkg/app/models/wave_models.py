from typing import Any, Callable, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.interpolate import RegularGridInterpolator


# ------------------------------------------------------------
#  Lifetime law and branching configuration
# ------------------------------------------------------------
class LifetimeLaw(BaseModel):
    """Exponential lifetime law rho(t) = rate * exp(-rate * t)."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    rate: float = Field(1.0, gt=0, alias="lambda")


class BranchingConfig(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    p: int = Field(..., ge=1)
    t: float = Field(..., ge=0)
    x: np.ndarray
    law: LifetimeLaw = Field(default_factory=LifetimeLaw)
    d: int
    particle_cap: int = Field(1_000_000, ge=1)

    @field_validator("x", mode="before")
    @classmethod
    def _as_point(cls, v):
        return np.atleast_1d(np.asarray(v, dtype=float))

    @model_validator(mode="after")
    def _x_matches_d(self):
        if self.x.shape != (self.d,):
            raise ValueError(f"root position has shape {self.x.shape}, expected ({self.d},)")
        return self


class BranchingTree(BaseModel):
    """
    Realized branching process stored as a flat arena.
    - particle k has parent[k] (-1 for the root), birth/death times and a position
    - alive[k] is true iff particle k survives to the horizon
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    parent: np.ndarray
    birth: np.ndarray
    death: np.ndarray
    position: np.ndarray
    alive: np.ndarray
    root: np.ndarray
    p: int
    truncated: bool = False

    @model_validator(mode="after")
    def _freeze_arrays(self):
        for arr in (self.parent, self.birth, self.death, self.position, self.alive, self.root):
            arr.setflags(write=False)
        return self

    @property
    def size(self) -> int:
        return int(self.parent.shape[0])

    @property
    def delta(self) -> np.ndarray:
        return self.death - self.birth

    @property
    def alive_set(self) -> np.ndarray:
        return np.flatnonzero(self.alive)

    @property
    def dead_set(self) -> np.ndarray:
        return np.flatnonzero(~self.alive)

    @property
    def branch_count(self) -> int:
        return int(np.count_nonzero(~self.alive))


# ------------------------------------------------------------
#  Problems and estimator output
# ------------------------------------------------------------
class WaveProblem(BaseModel):
    """
    Wave problem U_tt - Laplacian U = F with U(0) = 0, U_t(0) = f.
    - p = 0: linear, source F_lin
    - p = 1: F = c U (chains)
    - p >= 2: F = c U^p (p-ary trees)
    Callables receive arrays whose last axis holds the coordinates.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True, populate_by_name=True)

    d: int
    T: float = Field(..., gt=0)
    rate: float = Field(1.0, gt=0, alias="lambda")
    f: Callable[..., Any]
    c: Optional[Callable[..., Any]] = None
    F_lin: Optional[Callable[..., Any]] = None
    p: int = Field(0, ge=0)
    f_sup: float = Field(..., ge=0)
    c_sup: float = Field(0.0, ge=0)
    F_sup: Optional[float] = Field(None, ge=0)

    @property
    def law(self) -> LifetimeLaw:
        return LifetimeLaw(rate=self.rate)


class EstimatorReport(BaseModel):
    estimate: float
    std_error: float = Field(..., ge=0)
    M: int
    seed: int
    rejected_samples: int = Field(0, ge=0)
    max_abs_weight: float = 0.0
    accepted: int = 0
    rate: float = 1.0
    t: Optional[float] = None
    x: Optional[List[float]] = None
    method: str = "mc"
    workers: int = 1

    @model_validator(mode="after")
    def _rejections_bounded(self):
        if self.rejected_samples > self.M:
            raise ValueError("rejected_samples cannot exceed M")
        return self


class FrozenSample(BaseModel):
    """
    One accepted Monte Carlo sample with the data factors stripped off.
    - value(x) = scale * prod_alive f(x + off) * prod_dead c(t - T_k, x + off_k)
    - the linear case stores its source evaluation as a single dead particle
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    index: int
    scale: float
    alive_offsets: np.ndarray
    dead_offsets: np.ndarray
    dead_times: np.ndarray
    branch_count: int


class WellPosedness(BaseModel):
    applicable: bool
    passed: bool
    threshold: float
    margin: float


# ------------------------------------------------------------
#  Moment tables, law checks and audits
# ------------------------------------------------------------
class MomentTable(BaseModel):
    p: int
    rate: float
    t: float
    I: List[float]
    J: List[float]
    a: List[float] = Field(default_factory=list)
    b: List[float] = Field(default_factory=list)
    pmf: List[float] = Field(default_factory=list)
    mean: float = 0.0
    second_moment: float = 0.0


class BoundAudit(BaseModel):
    name: str
    p: int
    n: int
    value: float
    bound: float
    passed: bool


class LawCheckReport(BaseModel):
    p: int
    rate: float
    t: float
    M: int
    seed: int
    counts: List[int]
    empirical_pmf: List[float]
    analytic_pmf: List[float]
    tv_distance: float
    empirical_mean: float
    mean_std_error: float
    analytic_mean: float
    empirical_second: float
    second_std_error: float
    analytic_second: float
    truncated: int = 0


# ------------------------------------------------------------
#  Reference oracles
# ------------------------------------------------------------
class QuadratureConfig(BaseModel):
    abs_tol: float = Field(1e-10, gt=0)
    max_subdivisions: int = Field(50, ge=1)
    sphere_points: int = Field(2048, ge=2)
    line_nodes: int = Field(64, ge=2)
    radial_nodes: int = Field(48, ge=2)
    angular_nodes: int = Field(64, ge=4)


class PicardGrid(BaseModel):
    n_t: int = Field(41, ge=2)
    n_x: int = Field(101, ge=3)
    half_width: float = Field(..., gt=0)


class PicardSolution(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    times: np.ndarray
    axis: np.ndarray
    d: int
    values: np.ndarray
    increments: List[float]
    contraction_factors: List[float]
    iterations: int

    def evaluate(self, t: float, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        grid = (self.times,) + (self.axis,) * self.d
        interp = RegularGridInterpolator(grid, self.values, method="linear", bounds_error=True)
        query = np.column_stack([np.full(pts.shape[0], float(t)), pts])
        return interp(query)

    def at_time(self, t: float) -> Callable[[np.ndarray], np.ndarray]:
        return lambda points: self.evaluate(t, points)


class LightconeAudit(BaseModel):
    sup_error: float
    l2_error: float
    points: int
    t: float


# ------------------------------------------------------------
#  Distillation budget
# ------------------------------------------------------------
class ErrorBudget(BaseModel):
    """How eps_target is shared between data nets (delta), product nets (gamma) and the Monte Carlo average (M)."""

    eps_target: float = Field(..., gt=0)
    delta: float = Field(..., gt=0)
    gamma: float = Field(..., gt=0)
    second_moment: float = Field(..., ge=0)
    confidence: float = Field(1.0, gt=0)
    M: int = Field(..., ge=1)
