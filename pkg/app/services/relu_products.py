import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.errors import AuditFailureError, DomainError, InvalidArgumentError
from app.models.network import NeuralNet, ProductNetConstants
from app.planner.depth_planner import kfold_schedule, log_ceil, product_regime, yarotsky_depth
from app.services import relu_algebra as ra

# an affine expression over the neurons of the current layer: (coefficients, constant)
Expr = Tuple[np.ndarray, float]


def _unit(width: int, entries: dict, const: float = 0.0) -> Expr:
    coef = np.zeros(width)
    for idx, val in entries.items():
        coef[idx] = val
    return coef, const


def _layer(exprs: Sequence[Expr]):
    return np.vstack([c for c, _ in exprs]), np.array([b for _, b in exprs])


def _squarer_stages(u: Expr, carries: List[Expr], m: int, layers: list):
    """
    Append m hidden layers approximating u^2 on [0, 1] by f_m = u - sum_s g_s / 4^s.
    Each stage keeps P = relu(g), Q = relu(g - 1/2) (so g_next = 2P - 4Q), the running f and the carries.
    Returns the expressions for f_m and the carries over the last layer.
    """
    n_c = len(carries)
    coef_u, b_u = u
    exprs = [(coef_u, b_u), (coef_u, b_u - 0.5)] + carries
    layers.append(_layer(exprs))
    width = 2 + n_c
    g = _unit(width, {0: 2.0, 1: -4.0})
    f = _unit(width, {0: 0.5, 1: 1.0})
    carry_out = [_unit(width, {2 + j: 1.0}) for j in range(n_c)]
    for s in range(2, m + 1):
        exprs = [g, (g[0], g[1] - 0.5), f] + carry_out
        layers.append(_layer(exprs))
        width = 3 + n_c
        g = _unit(width, {0: 2.0, 1: -4.0})
        f = _unit(width, {2: 1.0, 0: -2.0 / 4 ** s, 1: 4.0 / 4 ** s})
        carry_out = [_unit(width, {3 + j: 1.0}) for j in range(n_c)]
    return f, carry_out


def yarotsky_product(R: float, eps: float) -> NeuralNet:
    """
    Two-input ReLU net with |xy - out| <= eps on [-R, R]^2, built from
    xy = R^2 (u1^2 - u2^2), u1 = |x + y| / (2R), u2 = |x - y| / (2R).
    Width stays <= 4; depth is 2m + 2 with m from the sawtooth bound.
    """
    m = yarotsky_depth(R, eps)
    a = 1.0 / (2.0 * R)
    layers: list = []

    # |x + y| halves and the carried w = (x - y) / (2R) + 1 >= 0
    layers.append(_layer([(np.array([a, a]), 0.0), (np.array([-a, -a]), 0.0), (np.array([a, -a]), 1.0)]))
    u1 = _unit(3, {0: 1.0, 1: 1.0})
    w = _unit(3, {2: 1.0})
    f1, (w,) = _squarer_stages(u1, [w], m, layers)

    # recover |x - y| / (2R) from w while carrying f_m(u1)
    layers.append(_layer([(w[0], w[1] - 1.0), (-w[0], 1.0 - w[1]), f1]))
    u2 = _unit(3, {0: 1.0, 1: 1.0})
    r1 = _unit(3, {2: 1.0})
    f2, (r1,) = _squarer_stages(u2, [r1], m, layers)

    out_coef = R * R * (r1[0] - f2[0])
    out_const = R * R * (r1[1] - f2[1])
    layers.append((out_coef[None, :], np.array([out_const])))
    return NeuralNet.from_layers(layers)


def yarotsky_constants(net: NeuralNet, R: float, eps: float) -> ProductNetConstants:
    mt = ra.metrics(net)
    scale = log_ceil(R) + log_ceil(1.0 / eps)
    return ProductNetConstants(
        k=2,
        R=R,
        eps=eps,
        regime=product_regime(R),
        H=mt.H,
        P=mt.P,
        W=mt.W,
        depth_constant=mt.H / scale if scale > 0 else float(mt.H),
        param_constant=mt.P / (scale + 1.0),
        sawtooth_depths=[yarotsky_depth(R, eps)],
    )


def kfold_product(k: int, R: float, eps: float) -> NeuralNet:
    """
    k-input net approximating x_1 ... x_k on [-R, R]^k by chained pairwise products;
    error <= (k - 1) eps R^k and |output| <= k R^k.
    """
    if not 0 < eps < 0.5:
        raise InvalidArgumentError(f"eps must lie in (0, 1/2), got {eps}")
    schedule = kfold_schedule(k, R, eps)
    R_1, eps_1 = schedule[0]
    psi = yarotsky_product(R_1, eps_1)
    for R_i, eps_i in schedule[1:]:
        carry = ra.identity_net(psi.hidden)
        psi = ra.compose(yarotsky_product(R_i, eps_i), ra.parallelize([psi, carry], shared_input=False))
    return psi


def kfold_constants(net: NeuralNet, k: int, R: float, eps: float) -> ProductNetConstants:
    mt = ra.metrics(net)
    r_term = log_ceil(1.0 / R) if R < 1 else log_ceil(R)
    e_term = log_ceil(1.0 / eps)
    depth_scale = k * (e_term + math.log(k) + k * r_term)
    return ProductNetConstants(
        k=k,
        R=R,
        eps=eps,
        regime=product_regime(R),
        H=mt.H,
        P=mt.P,
        W=mt.W,
        depth_constant=mt.H / depth_scale,
        param_constant=mt.P / (k ** 4 * (e_term + 1.0 + r_term)),
        sawtooth_depths=[yarotsky_depth(R_i, eps_i) for R_i, eps_i in kfold_schedule(k, R, eps)],
    )


def product_accuracy(k: int, R: float, eps: float) -> float:
    """Per-stage accuracy handed to kfold_product so the total error is <= eps."""
    return min(eps / ((k - 1) * R ** k), 0.49)


def product_of_nets(
    nets: Sequence[NeuralNet],
    R: float,
    eps: float,
    audit_points: Optional[np.ndarray] = None,
) -> NeuralNet:
    """Network for prod_i realize(nets[i]) on the region where every |realize(nets[i])| <= R."""
    if not nets:
        raise InvalidArgumentError("product_of_nets needs at least one net")
    if any(n.output_dim != 1 for n in nets):
        raise DomainError("product_of_nets needs scalar-output nets")
    if audit_points is not None:
        for j, net in enumerate(nets):
            worst = float(np.max(np.abs(ra.realize_scalar(net, audit_points))))
            if worst > R * (1.0 + 1e-12):
                raise AuditFailureError(f"factor {j} reaches |{worst:.6g}| > R = {R:.6g} on the audit points")
    if len(nets) == 1:
        return ra.compose(ra.identity_net(1), nets[0])
    k = len(nets)
    inner = ra.parallelize(nets, shared_input=True)
    return ra.compose(kfold_product(k, R, product_accuracy(k, R, eps)), inner)


# -------------------------------------------------------------------
# 📐 Error constants of products of approximations
# -------------------------------------------------------------------
def elementary_symmetric(values: Sequence[float]) -> List[float]:
    """e_0..e_n of the given values."""
    coeffs = [1.0]
    for v in values:
        nxt = coeffs + [0.0]
        for m in range(len(coeffs), 0, -1):
            nxt[m] = coeffs[m] + v * coeffs[m - 1] if m < len(coeffs) else v * coeffs[m - 1]
        coeffs = nxt
    return coeffs


def product_error_constant(sup_norms: Sequence[float], eps: float) -> float:
    """C_k with |prod f_i - prod g_i| <= C_k eps whenever |f_i - g_i| <= eps."""
    if any(s < 0 for s in sup_norms):
        raise InvalidArgumentError("sup norms must be nonnegative")
    k = len(sup_norms)
    e = elementary_symmetric(sup_norms)
    return math.fsum(eps ** j * e[k - 1 - j] for j in range(k))


def special_case_bound(ell: int, k: int, f_sup: float, g_sup: float, eps: float) -> float:
    """Upper bound for C_k when ell norms equal f_sup and k - ell equal g_sup."""
    if not 1 <= ell < k:
        raise InvalidArgumentError("special_case_bound needs 1 <= ell < k")
    fe = f_sup + eps
    return fe ** (ell - 1) * (ell * g_sup ** (k - ell) + (k - ell) * fe * (g_sup + eps) ** (k - ell - 1))
