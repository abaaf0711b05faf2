import configparser
from io import StringIO
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.config import settings
from app.errors import ConfigError
from app.models.wave_models import QuadratureConfig, WaveProblem
from app.services.data_profiles import (
    SHIFT_PROFILES,
    DataProfile,
    shift_laplacian,
    shift_laplacian_sup,
    shift_profile,
)
from app.services.estimators import reduce_problem


def _float_list(v) -> List[float]:
    if isinstance(v, (int, float)):
        return [float(v)]
    if isinstance(v, str):
        return [float(s) for s in v.replace(";", ",").split(",") if s.strip()]
    return [float(s) for s in v]


# ============================================================
# 🧾 Run configuration sections
# ============================================================
class ProblemSection(BaseModel):
    """[problem]: dimension, horizon, rate and the data profiles."""

    model_config = ConfigDict(populate_by_name=True)

    d: int = 1
    T: float = Field(1.0, gt=0)
    rate: float = Field(default_factory=lambda: settings.RATE, gt=0, alias="lambda")
    p: int = Field(0, ge=0)
    f: str = "cos"
    f_scale: float = 1.0
    c: str = "zero"
    c_scale: float = 1.0
    c_time: str = "const"
    F: str = "zero"
    F_scale: float = 1.0
    F_time: str = "const"
    f1: str = "zero"

    @field_validator("d")
    @classmethod
    def _supported_d(cls, v):
        if v not in (1, 2, 3):
            raise ValueError(f"d must be 1, 2 or 3 (got {v})")
        return v

    @field_validator("f1")
    @classmethod
    def _known_shift(cls, v):
        if v not in SHIFT_PROFILES:
            raise ValueError(f"f1 must be one of {SHIFT_PROFILES}")
        return v

    @model_validator(mode="after")
    def _shift_only_linear(self):
        if self.f1 != "zero" and self.p != 0:
            raise ValueError("a nonzero initial position f1 is only supported for the linear problem (p = 0)")
        # unknown factor names fail here rather than at dispatch
        self.f_profile(), self.c_profile(), self.F_profile()
        return self

    def f_profile(self) -> DataProfile:
        return DataProfile(factor=self.f, scale=self.f_scale, d=self.d)

    def c_profile(self) -> DataProfile:
        return DataProfile(factor=self.c, scale=self.c_scale, time_factor=self.c_time, d=self.d)

    def F_profile(self) -> DataProfile:
        return DataProfile(factor=self.F, scale=self.F_scale, time_factor=self.F_time, d=self.d)

    def source_profile(self) -> Optional[DataProfile]:
        """The profile distilled into phi_c: c for p >= 1, F for p = 0."""
        prof = self.c_profile() if self.p >= 1 else self.F_profile()
        return None if prof.is_zero else prof


class RunSection(BaseModel):
    t: List[float] = Field(default_factory=lambda: [0.5])
    x: Optional[List[List[float]]] = None
    M: int = Field(10000, ge=1)
    seed: int = Field(default_factory=lambda: settings.SEED)
    workers: int = Field(default_factory=lambda: settings.WORKERS, ge=1)
    out: str = "results"

    @field_validator("t", mode="before")
    @classmethod
    def _times(cls, v):
        times = _float_list(v)
        if any(s < 0 for s in times):
            raise ValueError("times must be nonnegative")
        return times

    @field_validator("x", mode="before")
    @classmethod
    def _points(cls, v):
        """'0.1, 0.2; 0.3, 0.4' is two points in d = 2."""
        if isinstance(v, str):
            return [[float(c) for c in chunk.split(",") if c.strip()] for chunk in v.split(";") if chunk.strip()]
        if isinstance(v, (int, float)):
            return [[float(v)]]
        return v


class MomentsSection(BaseModel):
    n_max: int = Field(20, ge=0)
    t: Optional[float] = Field(None, ge=0)
    conditioned_M: int = Field(0, ge=0)
    conditioned_n: List[int] = Field(default_factory=lambda: [1, 2])

    @field_validator("conditioned_M")
    @classmethod
    def _off_or_two(cls, v):
        if v == 1:
            raise ValueError("conditioned_M must be 0 (off) or at least 2")
        return v

    @field_validator("conditioned_n", mode="before")
    @classmethod
    def _ints(cls, v):
        return [int(s) for s in _float_list(v)]


class LawcheckSection(BaseModel):
    M: int = Field(100000, ge=1)
    t: Optional[float] = Field(None, ge=0)


class DistillSection(BaseModel):
    t: Optional[float] = Field(None, ge=0)
    eps_target: float = Field(0.1, gt=0)
    M: int = Field(0, ge=0)
    grid_n: int = Field(101, ge=1)
    network: str = "network.json"


class ExportSection(BaseModel):
    count: int = Field(5, ge=0)


class RunConfig(BaseModel):
    problem: ProblemSection = Field(default_factory=ProblemSection)
    run: RunSection = Field(default_factory=RunSection)
    moments: MomentsSection = Field(default_factory=MomentsSection)
    lawcheck: LawcheckSection = Field(default_factory=LawcheckSection)
    distill: DistillSection = Field(default_factory=DistillSection)
    export: ExportSection = Field(default_factory=ExportSection)
    quadrature: QuadratureConfig = Field(
        default_factory=lambda: QuadratureConfig(
            abs_tol=settings.ABS_TOL,
            max_subdivisions=settings.MAX_SUBDIVISIONS,
            sphere_points=settings.SPHERE_POINTS,
            line_nodes=settings.LINE_NODES,
            radial_nodes=settings.RADIAL_NODES,
            angular_nodes=settings.ANGULAR_NODES,
        )
    )

    @model_validator(mode="after")
    def _points_match_d(self):
        d = self.problem.d
        for pt in self.run.x or []:
            if len(pt) != d:
                raise ValueError(f"point {pt} has {len(pt)} coordinates, expected d = {d}")
        for s in self.run.t:
            if s > self.problem.T:
                raise ValueError(f"t = {s} exceeds T = {self.problem.T}")
        return self

    # -------------------- Derived values --------------------
    def points(self) -> np.ndarray:
        """Evaluation points from [run] x; the origin when none are given."""
        if self.run.x is None:
            return np.zeros((1, self.problem.d))
        return np.asarray(self.run.x, dtype=float)

    def first_time(self, override: Optional[float]) -> float:
        t = self.run.t[0] if override is None else override
        if t > self.problem.T:
            raise ConfigError(f"t = {t} exceeds T = {self.problem.T}")
        return t

    def wave_problem(self) -> WaveProblem:
        pb = self.problem
        f_prof = pb.f_profile()
        base = dict(d=pb.d, T=pb.T, rate=pb.rate, p=pb.p, f=f_prof.space, f_sup=f_prof.sup)
        if pb.p >= 1:
            c_prof = pb.c_profile()
            return WaveProblem(**base, c=c_prof.spacetime, c_sup=c_prof.sup)
        F_prof = pb.F_profile()
        f2, F = reduce_problem(
            shift_profile(pb.f1), f_prof.space, F_prof.spacetime, laplacian=shift_laplacian(pb.f1)
        )
        F_sup = F_prof.sup + shift_laplacian_sup(pb.f1, pb.d)
        return WaveProblem(**{**base, "f": f2}, F_lin=F, F_sup=F_sup)

    def shift_values(self, points: np.ndarray) -> np.ndarray:
        shift = shift_profile(self.problem.f1)
        pts = np.atleast_2d(points)
        return np.zeros(pts.shape[0]) if shift is None else np.asarray(shift(pts), dtype=float)


# ============================================================
# 📄 INI loading and overrides
# ============================================================
SECTIONS = ("problem", "run", "moments", "lawcheck", "distill", "export", "quadrature")


def read_ini(path: Optional[Path]) -> Dict[str, Dict[str, str]]:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys such as T and F are case-sensitive
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file {path}: {exc}") from exc
    raw = {name: dict(parser.items(name)) for name in parser.sections()}
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return raw


def apply_overrides(raw: Dict[str, Dict[str, str]], overrides: Sequence[str]) -> Dict[str, Dict[str, str]]:
    """Apply 'section.key=value' overrides on top of the parsed file."""
    merged = {k: dict(v) for k, v in raw.items()}
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override '{item}' must look like section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section '{section}' in override '{item}'")
        merged.setdefault(section, {})[key.strip()] = value.strip()
    return merged


def load_run_config(path: Optional[Path], overrides: Sequence[str] = ()) -> RunConfig:
    raw = apply_overrides(read_ini(path), overrides)
    return RunConfig.model_validate(raw)


def resolved_ini(cfg: RunConfig) -> str:
    """The validated configuration as INI text, written next to every run's outputs."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    doc = cfg.model_dump(by_alias=True)
    for section in SECTIONS:
        parser[section] = {}
        for key, value in doc[section].items():
            if value is None:
                continue
            if section == "run" and key == "x" and value:
                text = "; ".join(", ".join(repr(c) for c in pt) for pt in value)
            elif isinstance(value, list):
                text = ", ".join(repr(v) for v in value)
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            parser[section][key] = text
    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()
