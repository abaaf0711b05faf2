from typing import List, Optional, Sequence

import numpy as np
import orjson
import scipy.sparse as sp

from app.config import settings
from app.errors import DomainError, InvalidArgumentError
from app.models.network import Layer, NetMetrics, NeuralNet, as_layer
from app.planner.depth_planner import depth_case


# -------------------------------------------------------------------
# 📏 Dimension-vector algebra
# -------------------------------------------------------------------
def identity_dims(H: int, d: int = 1) -> List[int]:
    return [d] + [2 * d] * H + [d]


def odot(alpha: Sequence[int], beta: Sequence[int]) -> List[int]:
    """D of compose(outer with D=alpha, inner with D=beta)."""
    return list(beta[:-1]) + [2 * beta[-1]] + list(alpha[1:])


def boxplus(alpha: Sequence[int], beta: Sequence[int]) -> List[int]:
    if len(alpha) != len(beta):
        raise DomainError("boxplus needs dimension vectors of equal length")
    return [alpha[0]] + [a + b for a, b in zip(alpha[1:-1], beta[1:-1])] + [beta[-1]]


# -------------------------------------------------------------------
# 🧮 Evaluation and metrics
# -------------------------------------------------------------------
def realize(net: NeuralNet, x) -> np.ndarray:
    """
    Evaluate the network.
    - a 0-d or 1-d input is one point; the result is a vector of length k_{H+1}
    - a 2-d input (n, k_0) is a batch; the result has shape (n, k_{H+1})
    """
    arr = np.asarray(x, dtype=float)
    single = arr.ndim <= 1
    batch = arr.reshape(1, -1) if single else arr
    if batch.ndim != 2 or batch.shape[1] != net.input_dim:
        raise DomainError(f"input of shape {arr.shape} does not match input dimension {net.input_dim}")
    h = batch.T
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = np.asarray(w @ h) + b[:, None]
        if i < last:
            np.maximum(h, 0.0, out=h)
    out = h.T
    return out[0] if single else out


def realize_scalar(net: NeuralNet, points: np.ndarray) -> np.ndarray:
    """Batch evaluation of a scalar-output net; returns shape (n,)."""
    return realize(net, np.atleast_2d(points))[:, 0]


def metrics(net: NeuralNet) -> NetMetrics:
    nonzero = sum(int(w.count_nonzero()) for w in net.weights)
    nonzero += sum(int(np.count_nonzero(b)) for b in net.biases)
    dims = net.dims
    return NetMetrics(P=nonzero, H=net.hidden, W=max(dims), D=dims)


# -------------------------------------------------------------------
# 🪞 Identity and zero networks
# -------------------------------------------------------------------
def _identity_layers(H: int, d: int = 1) -> List[Layer]:
    """Layers of Sigma_{H,d}; H = 0 is the plain affine identity."""
    eye = sp.identity(d, format="csr")
    if H == 0:
        return [as_layer(eye, np.zeros(d))]
    split = sp.vstack([eye, -eye], format="csr")
    merge = sp.hstack([eye, -eye], format="csr")
    layers = [as_layer(split, np.zeros(2 * d))]
    layers += [as_layer(sp.identity(2 * d, format="csr"), np.zeros(2 * d)) for _ in range(H - 1)]
    layers.append(as_layer(merge, np.zeros(d)))
    return layers


def identity_net(H: int) -> NeuralNet:
    return identity_net_d(H, 1)


def identity_net_d(H: int, d: int) -> NeuralNet:
    if H < 1:
        raise InvalidArgumentError("identity_net needs H >= 1")
    layers = _identity_layers(H, d)
    return NeuralNet(weights=[w for w, _ in layers], biases=[b for _, b in layers])


def zero_net(in_dim: int, out_dim: int = 1) -> NeuralNet:
    return NeuralNet.from_layers([(np.zeros((1, in_dim)), np.zeros(1)), (np.zeros((out_dim, 1)), np.zeros(out_dim))])


def constant_net(in_dim: int, value: float) -> NeuralNet:
    return NeuralNet.from_layers([(np.zeros((1, in_dim)), np.zeros(1)), (np.zeros((1, 1)), np.array([value]))])


def _build(layers: Sequence[Layer]) -> NeuralNet:
    return NeuralNet(weights=[w for w, _ in layers], biases=[b for _, b in layers])


# -------------------------------------------------------------------
# 🔗 Composition and sums
# -------------------------------------------------------------------
def _compose_layers(outer: Sequence[Layer], inner: Sequence[Layer]) -> List[Layer]:
    """Inner's last affine map is split into +/- halves so it passes through a ReLU exactly."""
    w_last, b_last = inner[-1]
    k = w_last.shape[0]
    if outer[0][0].shape[1] != k:
        raise DomainError(f"inner output dimension {k} does not match outer input dimension {outer[0][0].shape[1]}")
    eye = sp.identity(k, format="csr")
    doubled = as_layer(sp.vstack([w_last, -w_last], format="csr"), np.concatenate([b_last, -b_last]))
    w_first, b_first = outer[0]
    merged = as_layer(w_first @ sp.hstack([eye, -eye], format="csr"), b_first)
    return list(inner[:-1]) + [doubled, merged] + list(outer[1:])


def compose(outer: NeuralNet, inner: NeuralNet) -> NeuralNet:
    return _build(_compose_layers(outer.layers, inner.layers))


def sum_same_length(nets: Sequence[NeuralNet], coeffs: Sequence[float]) -> NeuralNet:
    if not nets:
        raise InvalidArgumentError("sum_same_length needs at least one net")
    if len(coeffs) != len(nets):
        raise InvalidArgumentError("one coefficient per net is required")
    H = nets[0].hidden
    if any(n.hidden != H for n in nets):
        raise DomainError("sum_same_length needs nets of equal depth (extend first)")
    if any(n.input_dim != nets[0].input_dim or n.output_dim != nets[0].output_dim for n in nets):
        raise DomainError("sum_same_length needs equal input and output dimensions")

    layers: List[Layer] = [
        as_layer(sp.vstack([n.weights[0] for n in nets], format="csr"), np.concatenate([n.biases[0] for n in nets]))
    ]
    for i in range(1, H):
        layers.append(
            as_layer(
                sp.block_diag([n.weights[i] for n in nets], format="csr"),
                np.concatenate([n.biases[i] for n in nets]),
            )
        )
    w_out = sp.hstack([float(h) * n.weights[-1] for n, h in zip(nets, coeffs)], format="csr")
    b_out = np.sum([float(h) * n.biases[-1] for n, h in zip(nets, coeffs)], axis=0)
    layers.append(as_layer(w_out, b_out))
    return _build(layers)


def affine_wrap(net: NeuralNet, scale: float = 1.0, shift_in=None, shift_out: float = 0.0) -> NeuralNet:
    """x -> scale * (realize(net)(x + shift_in) + shift_out)."""
    layers = net.layers
    w1, b1 = layers[0]
    if shift_in is not None:
        shift = np.atleast_1d(np.asarray(shift_in, dtype=float))
        if shift.shape != (net.input_dim,):
            raise DomainError(f"shift_in has shape {shift.shape}, expected ({net.input_dim},)")
        b1 = b1 + np.asarray(w1 @ shift).ravel()
    layers[0] = as_layer(w1, b1)
    w_l, b_l = layers[-1]
    layers[-1] = as_layer(float(scale) * w_l, (b_l + shift_out) * float(scale))
    return _build(layers)


def extend(net: NeuralNet, H_target: int) -> NeuralNet:
    if net.output_dim != 1:
        raise DomainError("extend is defined for scalar-output nets; extend vector outputs component-wise")
    if H_target <= net.hidden:
        raise InvalidArgumentError(f"H_target={H_target} must exceed the current depth {net.hidden}")
    pad = _identity_layers(H_target - net.hidden - 1, 1)
    return _build(_compose_layers(pad, net.layers))


def match_depth(net: NeuralNet, H_target: int) -> NeuralNet:
    return net if net.hidden == H_target else extend(net, H_target)


def sum_diff_length(net_a: NeuralNet, net_b: NeuralNet, coeffs: Sequence[float]) -> NeuralNet:
    case = depth_case(net_a.hidden, net_b.hidden)
    if case == "first":
        net_a = extend(net_a, net_b.hidden)
    elif case == "second":
        net_b = extend(net_b, net_a.hidden)
    return sum_same_length([net_a, net_b], coeffs)


def parallelize(nets: Sequence[NeuralNet], shared_input: bool = False) -> NeuralNet:
    if not nets:
        raise InvalidArgumentError("parallelize needs at least one net")
    H = nets[0].hidden
    if any(n.hidden != H for n in nets):
        raise InvalidArgumentError("parallelize needs nets of equal depth (extend first)")
    if shared_input:
        if any(n.input_dim != nets[0].input_dim for n in nets):
            raise DomainError("shared input needs equal input dimensions")
        first = sp.vstack([n.weights[0] for n in nets], format="csr")
    else:
        first = sp.block_diag([n.weights[0] for n in nets], format="csr")
    layers = [as_layer(first, np.concatenate([n.biases[0] for n in nets]))]
    for i in range(1, H + 1):
        layers.append(
            as_layer(sp.block_diag([n.weights[i] for n in nets], format="csr"), np.concatenate([n.biases[i] for n in nets]))
        )
    return _build(layers)


# -------------------------------------------------------------------
# ⏱️ Time prepending and input embedding
# -------------------------------------------------------------------
def prepend_time(t: float, d: int) -> NeuralNet:
    """x -> (t, x) for t >= 0; D = (d, 2d+1, d+1)."""
    if t < 0:
        raise DomainError("prepend_time needs t >= 0")
    eye = sp.identity(d, format="csr")
    w1 = sp.vstack([sp.csr_matrix((1, d)), eye, -eye], format="csr")
    b1 = np.concatenate([[float(t)], np.zeros(2 * d)])
    top = sp.hstack([sp.csr_matrix(np.ones((1, 1))), sp.csr_matrix((1, 2 * d))], format="csr")
    bottom = sp.hstack([sp.csr_matrix((d, 1)), eye, -eye], format="csr")
    w2 = sp.vstack([top, bottom], format="csr")
    return NeuralNet.from_layers([(w1, b1), (w2, np.zeros(d + 1))])


def fix_time(net: NeuralNet, t: float) -> NeuralNet:
    if t < 0:
        raise DomainError("fix_time needs t >= 0")
    return compose(net, prepend_time(t, net.input_dim - 1))


def embed_inputs(net: NeuralNet, in_dim: int, positions: Sequence[int]) -> NeuralNet:
    """Read input j of `net` from coordinate positions[j] of a wider input."""
    if len(positions) != net.input_dim:
        raise DomainError("one position per input coordinate is required")
    w1 = net.weights[0].tocoo()
    cols = np.asarray(positions)[w1.col]
    wide = sp.csr_matrix((w1.data, (w1.row, cols)), shape=(w1.shape[0], in_dim))
    layers = net.layers
    layers[0] = as_layer(wide, layers[0][1])
    return _build(layers)


# -------------------------------------------------------------------
# 💾 Serialization
# -------------------------------------------------------------------
def net_to_dict(net: NeuralNet, dense_limit: Optional[int] = None) -> dict:
    limit = settings.DENSE_JSON_LIMIT if dense_limit is None else dense_limit
    layers = []
    for w, b in net.layers:
        entry = {"b": b.tolist()}
        if w.shape[0] * w.shape[1] <= limit:
            entry["w"] = w.toarray().tolist()
        else:
            coo = w.tocoo()
            entry["w_coo"] = {
                "shape": list(w.shape),
                "row": coo.row.tolist(),
                "col": coo.col.tolist(),
                "val": coo.data.tolist(),
            }
        layers.append(entry)
    return {"dims": net.dims, "layers": layers}


def net_to_json(net: NeuralNet, dense_limit: Optional[int] = None) -> bytes:
    return orjson.dumps(net_to_dict(net, dense_limit), option=orjson.OPT_INDENT_2)


def net_from_dict(doc: dict) -> NeuralNet:
    dims = doc["dims"]
    layers = []
    for i, entry in enumerate(doc["layers"]):
        if "w" in entry:
            w = np.asarray(entry["w"], dtype=float).reshape(dims[i + 1], dims[i])
        else:
            coo = entry["w_coo"]
            w = sp.csr_matrix((coo["val"], (coo["row"], coo["col"])), shape=tuple(coo["shape"]))
        layers.append((w, entry["b"]))
    net = NeuralNet.from_layers(layers)
    if net.dims != list(dims):
        raise DomainError(f"declared dims {dims} do not match layer shapes {net.dims}")
    return net


def net_from_json(raw: bytes) -> NeuralNet:
    return net_from_dict(orjson.loads(raw))
