from typing import Iterable, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field, model_validator


Layer = Tuple[sp.csr_matrix, np.ndarray]


def as_layer(w, b) -> Layer:
    """Normalise a (weight, bias) pair to (csr float64 matrix, float64 vector)."""
    if sp.issparse(w):
        mat = sp.csr_matrix(w, dtype=float)
    else:
        mat = sp.csr_matrix(np.atleast_2d(np.asarray(w, dtype=float)))
    mat.eliminate_zeros()
    mat.sort_indices()
    return mat, np.atleast_1d(np.asarray(b, dtype=float)).copy()


# ============================================================
# 🧠 ReLU network
# ============================================================
class NeuralNet(BaseModel):
    """
    Explicit ReLU network: affine layers A_1..A_{H+1}, ReLU after all but the last.
    Weights are stored as scipy CSR matrices so sums over many frozen samples stay tractable.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    weights: List[sp.csr_matrix]
    biases: List[np.ndarray]

    @model_validator(mode="after")
    def _shapes_chain(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must have the same length")
        if len(self.weights) < 2:
            raise ValueError("a network needs at least one hidden layer (H >= 1)")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i + 1}: {w.shape[0]} rows but bias of length {b.shape[0]}")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i + 1} expects {w.shape[1]} inputs, previous layer has {self.weights[i - 1].shape[0]}")
        for arr in self.biases:
            arr.setflags(write=False)
        return self

    @classmethod
    def from_layers(cls, layers: Iterable[Tuple[object, object]]) -> "NeuralNet":
        ws, bs = [], []
        for w, b in layers:
            mat, vec = as_layer(w, b)
            ws.append(mat)
            bs.append(vec)
        return cls(weights=ws, biases=bs)

    @property
    def layers(self) -> List[Layer]:
        return list(zip(self.weights, self.biases))

    @property
    def dims(self) -> List[int]:
        return [int(self.weights[0].shape[1])] + [int(w.shape[0]) for w in self.weights]

    @property
    def input_dim(self) -> int:
        return int(self.weights[0].shape[1])

    @property
    def output_dim(self) -> int:
        return int(self.weights[-1].shape[0])

    @property
    def hidden(self) -> int:
        return len(self.weights) - 1


class NetMetrics(BaseModel):
    P: int
    H: int
    W: int
    D: List[int]

    @model_validator(mode="after")
    def _dense_bound(self):
        if self.P > (self.H + 1) * self.W * (self.W + 1):
            raise ValueError("nonzero count exceeds (H+1) W (W+1)")
        return self


class ProductNetConstants(BaseModel):
    """Constants measured on a constructed product network."""

    k: int
    R: float
    eps: float
    regime: str
    H: int
    P: int
    W: int
    depth_constant: float
    param_constant: float
    sawtooth_depths: List[int] = Field(default_factory=list)


# ------------------------------------------------------------
#  Distillation inputs and outputs
# ------------------------------------------------------------
class DataNets(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    phi_f: NeuralNet
    phi_c: NeuralNet
    eps_data: float = Field(..., ge=0)
    f_sup: float = Field(..., ge=0)
    c_sup: float = Field(0.0, ge=0)
    measured_f_error: Optional[float] = None
    measured_c_error: Optional[float] = None


class SizeBounds(BaseModel):
    """Size bounds of an assembled net, fixed before the net is built."""

    param_bound: float
    hidden_bound: int
    depth_constant: int
    param_constant: float
    hidden_closed_form: float
    param_closed_form: float


class DistillReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    net: NeuralNet
    eps_target: float
    measured_sup_error: float
    l2_error: float = 0.0
    param_bound: float
    measured_P: int
    hidden_bound: float
    measured_H: int
    measured_W: int = 0
    case: str
    t: float
    M: int
    seed: int
    delta: float
    gamma: float
    regime: str = "none"
    alpha: float = 0.0
    beta: float = 0.0
    eta: float = 0.0
    theorem_constant: float = 0.0
    depth_constant: int = 0
    param_constant: float = 0.0
    hidden_closed_form: float = 0.0
    param_closed_form: float = 0.0
    branch_total: int = 0
    branch_budget: float = 0.0
    assembly_error: float = 0.0
    assembly_budget: float = 0.0
    audits_passed: bool = False

    def audit_flags(self) -> dict:
        return {
            "sup_error": self.measured_sup_error <= self.eps_target,
            "params": self.measured_P <= self.param_bound,
            "hidden": self.measured_H <= self.hidden_bound,
            "params_closed_form": self.measured_P <= self.param_closed_form,
            "hidden_closed_form": self.measured_H <= self.hidden_closed_form,
            "branch_budget": self.branch_total <= self.branch_budget,
            "assembly": self.assembly_error <= self.assembly_budget + 1e-9,
        }

