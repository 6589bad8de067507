"""Strictly convex neural networks and the quadratic convex handle.

A network g(z) is built from layers

    o_{l+1} = sigma(W^o_l o_l + W^z_l z + b_l),   g(z) = o_k,

with o_0 = 0, strictly positive hidden weights W^o and the softplus-beta
activation, so g is strictly convex in z.  Hidden weights are stored as
unconstrained pre-parameters and mapped through ``softplus(v) + WEIGHT_FLOOR``;
beta is stored as ``log(beta)``.

All array functions accept a batch of inputs with shape ``(B, m)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

WEIGHT_FLOOR = 1e-6
DEFAULT_BETA = 5.0


class DomainError(ValueError):
    """Raised when an input lies outside the domain of an operation."""


class ShapeError(ValueError):
    """Raised on dimension mismatch."""


class ActivationKind(enum.Enum):
    SOFTPLUS_BETA = "softplus_beta"
    RELU = "relu"


@dataclass(frozen=True)
class Activation:
    kind: ActivationKind = ActivationKind.SOFTPLUS_BETA
    beta: float = 1.0

    def __post_init__(self):
        if self.kind is ActivationKind.SOFTPLUS_BETA and not self.beta > 0:
            raise DomainError(f"softplus-beta needs beta > 0, got {self.beta}")


# -- scalar-parameter activation helpers (vectorized over x) ---------------


def softplus_beta(x, beta):
    """(1/beta) log(1 + exp(beta x)), overflow-safe."""
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-beta * np.abs(x))) / beta


def _sigmoid(x):
    # tanh form: one ufunc call, no overflow
    return 0.5 + 0.5 * np.tanh(0.5 * np.asarray(x, dtype=float))


def activation_eval(a: Activation, x: float) -> float:
    if not np.isfinite(x):
        raise DomainError(f"activation input must be finite, got {x}")
    if a.kind is ActivationKind.RELU:
        return max(float(x), 0.0)
    return float(softplus_beta(x, a.beta))


def softplus_relu_gap(beta: float, x: float, delta: float) -> float:
    """sigma_beta(x + delta) - relu(x); lies in (0, delta + log(2)/beta)."""
    if not beta > 0 or not delta > 0:
        raise DomainError("beta and delta must be positive")
    if not np.isfinite(x):
        raise DomainError("x must be finite")
    return float(softplus_beta(x + delta, beta)) - max(float(x), 0.0)


def _inv_softplus(y):
    # inverse of log(1 + e^v) for y > 0
    y = np.asarray(y, dtype=float)
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


# -- the network ------------------------------------------------------------


@dataclass(frozen=True)
class ForwardRecord:
    """Pre-activations ``pre[l]`` and layer inputs ``outs[l]`` (``outs[0]`` is zero)."""

    z: np.ndarray
    pre: list
    outs: list
    value: np.ndarray


@dataclass(frozen=True, eq=False)
class ScnnParams:
    """Parameters of one strictly convex network.

    ``input_weights[l]`` has shape ``(width_l, m)``; ``hidden_pre[l]`` (l >= 1)
    has shape ``(width_l, width_{l-1})`` and ``hidden_pre[0]`` is ``None``;
    the last width is 1.
    """

    input_weights: tuple
    hidden_pre: tuple
    biases: tuple
    log_beta: float = math.log(DEFAULT_BETA)
    log_quad: float | None = None

    def __post_init__(self):
        k = len(self.input_weights)
        if k < 1 or len(self.hidden_pre) != k or len(self.biases) != k:
            raise ShapeError("layer lists must have equal nonzero length")
        if self.hidden_pre[0] is not None:
            raise ShapeError("first layer has no hidden weights")
        m = self.input_weights[0].shape[1]
        prev = None
        for l, (wz, b) in enumerate(zip(self.input_weights, self.biases)):
            if wz.ndim != 2 or wz.shape[1] != m or b.shape != (wz.shape[0],):
                raise ShapeError(f"layer {l}: inconsistent shapes")
            if l > 0 and self.hidden_pre[l].shape != (wz.shape[0], prev):
                raise ShapeError(f"layer {l}: hidden weight shape {self.hidden_pre[l].shape}")
            prev = wz.shape[0]
        if prev != 1:
            raise ShapeError("last layer must have width 1")
        arrays = [*self.input_weights, *self.hidden_pre[1:], *self.biases]
        if not all(np.all(np.isfinite(a)) for a in arrays) or not math.isfinite(self.log_beta):
            raise DomainError("parameters must be finite")

    @property
    def input_dim(self) -> int:
        return self.input_weights[0].shape[1]

    @property
    def layer_count(self) -> int:
        return len(self.input_weights)

    @property
    def beta(self) -> float:
        return math.exp(self.log_beta)

    @property
    def quad(self) -> float:
        """Weight of the optional strongly convex term mu/2 |z|^2 (0 if absent)."""
        return 0.0 if self.log_quad is None else math.exp(self.log_quad)

    @cached_property
    def _effective_hidden(self) -> tuple:
        return (None,) + tuple(softplus_beta(h, 1.0) + WEIGHT_FLOOR for h in self.hidden_pre[1:])

    def hidden_weights(self, l: int) -> np.ndarray:
        """Effective (strictly positive) hidden weights of layer ``l >= 1``."""
        return self._effective_hidden[l]

    # flat parameter dictionary used by the optimizer and checkpoints
    def to_dict(self) -> dict:
        d = {"log_beta": np.array(self.log_beta)}
        if self.log_quad is not None:
            d["log_quad"] = np.array(self.log_quad)
        for l in range(self.layer_count):
            d[f"Wz{l}"] = self.input_weights[l]
            d[f"b{l}"] = self.biases[l]
            if l > 0:
                d[f"Wo{l}"] = self.hidden_pre[l]
        return d

    def replace(self, d: dict) -> "ScnnParams":
        k = self.layer_count
        return ScnnParams(
            input_weights=tuple(np.array(d[f"Wz{l}"], dtype=float) for l in range(k)),
            hidden_pre=(None,) + tuple(np.array(d[f"Wo{l}"], dtype=float) for l in range(1, k)),
            biases=tuple(np.array(d[f"b{l}"], dtype=float) for l in range(k)),
            log_beta=float(d["log_beta"]),
            log_quad=None if self.log_quad is None else float(d["log_quad"]),
        )

    # the uniform "convex handle" surface shared with QuadraticConvex
    def value(self, z):
        return scnn_forward(self, z)[0]

    def grad(self, z):
        return scnn_input_gradient(self, z)

    def vjp(self, z, w, value_seed=0.0):
        return scnn_param_gradient(self, z, w, value_seed)

    @property
    def is_gradient_map(self) -> bool:
        return True


def init_scnn(
    m: int,
    widths=(20, 20, 1),
    rng: np.random.Generator | None = None,
    beta: float = DEFAULT_BETA,
    input_scale: float = 1.0,
    quad: float | None = None,
) -> ScnnParams:
    """Random SCNN: input weights ~ U[-a, a] with a = input_scale/sqrt(m),
    effective hidden weights = 1/fan_in, zero biases.  ``quad`` adds the
    term quad/2 |z|^2."""
    rng = np.random.default_rng() if rng is None else rng
    widths = tuple(int(w) for w in widths)
    if widths[-1] != 1:
        raise ShapeError("last width must be 1")
    a = input_scale / math.sqrt(m)
    wz, wo, bs = [], [None], []
    for l, h in enumerate(widths):
        wz.append(rng.uniform(-a, a, size=(h, m)))
        bs.append(np.zeros(h))
        if l > 0:
            fan_in = widths[l - 1]
            wo.append(np.full((h, fan_in), float(_inv_softplus(1.0 / fan_in - WEIGHT_FLOOR))))
    return ScnnParams(tuple(wz), tuple(wo), tuple(bs), math.log(beta), None if quad is None else math.log(quad))


def _check_input(p: ScnnParams, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != p.input_dim:
        raise ShapeError(f"input dim {z.shape[-1]} != {p.input_dim}")
    return z


def scnn_forward(p: ScnnParams, z):
    """Return ``(value, record)``; ``value`` has shape ``z.shape[:-1]``."""
    z = _check_input(p, z)
    single = z.ndim == 1
    zb = np.atleast_2d(z)
    beta = p.beta
    o = np.zeros((zb.shape[0], 0))
    pre, outs = [], [o]
    for l in range(p.layer_count):
        a = zb @ p.input_weights[l].T + p.biases[l]
        if l > 0:
            a = a + o @ p.hidden_weights(l).T
        o = softplus_beta(a, beta)
        pre.append(a)
        outs.append(o)
    value = o[:, 0]
    if p.log_quad is not None:
        value = value + 0.5 * p.quad * np.sum(zb * zb, axis=-1)
    rec = ForwardRecord(zb, pre, outs, value)
    return (value[0] if single else value), rec


def scnn_input_gradient(p: ScnnParams, z, record: ForwardRecord | None = None):
    """Analytic gradient of g with respect to its input."""
    z = _check_input(p, z)
    single = z.ndim == 1
    if record is None:
        record = scnn_forward(p, z)[1]
    beta = p.beta
    delta = np.ones((record.z.shape[0], 1))
    grad = np.zeros_like(record.z)
    for l in range(p.layer_count - 1, -1, -1):
        e = delta * _sigmoid(beta * record.pre[l])
        grad += e @ p.input_weights[l]
        if l > 0:
            delta = e @ p.hidden_weights(l)
    if p.log_quad is not None:
        grad += p.quad * record.z
    return grad[0] if single else grad


def scnn_param_gradient(p: ScnnParams, z, w, value_seed=0.0):
    """Reverse pass for F = sum_b [ w_b . grad g(z_b) + c_b g(z_b) ].

    ``value_seed`` gives c_b as a scalar or as one weight per batch row.

    Returns ``(z_bar, grads)`` where ``z_bar`` has the shape of ``z`` and
    ``grads`` maps the keys of :meth:`ScnnParams.to_dict` to arrays of the
    same shapes (summed over the batch; gradients are taken with respect
    to the stored pre-parameters).
    """
    z = _check_input(p, z)
    w = np.asarray(w, dtype=float)
    single = z.ndim == 1
    zb, wb = np.atleast_2d(z), np.atleast_2d(w)
    if wb.shape != zb.shape:
        raise ShapeError("upstream seed must match input shape")
    k, beta = p.layer_count, p.beta
    batch = zb.shape[0]

    # forward pass carrying the directional tangent along w
    outs, tans, pre, tpre, sigs = [np.zeros((batch, 0))], [np.zeros((batch, 0))], [], [], []
    for l in range(k):
        a = zb @ p.input_weights[l].T + p.biases[l]
        t = wb @ p.input_weights[l].T
        if l > 0:
            wo = p.hidden_weights(l)
            a = a + outs[-1] @ wo.T
            t = t + tans[-1] @ wo.T
        sig = _sigmoid(beta * a)
        outs.append(softplus_beta(a, beta))
        tans.append(sig * t)
        pre.append(a)
        tpre.append(t)
        sigs.append(sig)

    grads = {"log_beta": 0.0}
    seed = np.reshape(np.asarray(value_seed, dtype=float), (-1, 1))
    o_bar = np.zeros((batch, 1)) + seed
    od_bar = np.ones((batch, 1))
    z_bar = np.zeros_like(zb)
    dbeta = 0.0
    for l in range(k - 1, -1, -1):
        a, t, sig = pre[l], tpre[l], sigs[l]
        dsig = beta * sig * (1.0 - sig)
        sp = outs[l + 1]
        t_bar = od_bar * sig
        a_bar = od_bar * dsig * t + o_bar * sig
        # d sigma / d beta and d sigma' / d beta
        dbeta += np.sum(o_bar * (a * sig - sp) / beta) + np.sum(od_bar * t * a * sig * (1.0 - sig))
        grads[f"Wz{l}"] = a_bar.T @ zb + t_bar.T @ wb
        grads[f"b{l}"] = a_bar.sum(axis=0)
        z_bar += a_bar @ p.input_weights[l]
        if l > 0:
            wo = p.hidden_weights(l)
            g_eff = a_bar.T @ outs[l] + t_bar.T @ tans[l]
            grads[f"Wo{l}"] = g_eff * _sigmoid(p.hidden_pre[l])
            o_bar = a_bar @ wo
            od_bar = t_bar @ wo
    grads["log_beta"] = np.array(dbeta * beta)
    if p.log_quad is not None:
        mu = p.quad
        z_bar += mu * wb + seed * mu * zb
        grads["log_quad"] = np.array(mu * (np.sum(wb * zb) + 0.5 * np.sum(seed * zb * zb)))
    return (z_bar[0] if single else z_bar), grads


def scnn_hessian(p: ScnnParams, z) -> np.ndarray:
    """Hessian of g at a single point, via one batched reverse pass."""
    z = np.asarray(z, dtype=float)
    m = z.shape[0]
    h, _ = scnn_param_gradient(p, np.tile(z, (m, 1)), np.eye(m))
    return 0.5 * (h + h.T)


# -- quadratic handle -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuadraticConvex:
    """g(z) = 1/2 z^T K z with K = L L^T + eps I.

    With ``unconstrained=True`` the matrix is stored directly and the handle
    is the plain linear map z -> K z (not necessarily a gradient map).
    """

    factor: np.ndarray
    eps: float = 0.0
    unconstrained: bool = False

    @property
    def input_dim(self) -> int:
        return self.factor.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        if self.unconstrained:
            return self.factor
        return self.factor @ self.factor.T + self.eps * np.eye(self.input_dim)

    def to_dict(self) -> dict:
        return {"L": self.factor}

    def replace(self, d: dict) -> "QuadraticConvex":
        return QuadraticConvex(np.array(d["L"], dtype=float), self.eps, self.unconstrained)

    def value(self, z):
        z = np.asarray(z, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", z, self.matrix, z)

    def grad(self, z):
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.input_dim:
            raise ShapeError(f"input dim {z.shape[-1]} != {self.input_dim}")
        return z @ self.matrix.T

    def vjp(self, z, w, value_seed=0.0):
        z, w = np.asarray(z, dtype=float), np.asarray(w, dtype=float)
        k = self.matrix
        zb, wb = np.atleast_2d(z), np.atleast_2d(w)
        seed = np.reshape(np.asarray(value_seed, dtype=float), (-1, 1))
        z_bar = wb @ k + seed * (zb @ k)
        gk = wb.T @ zb + 0.5 * (seed * zb).T @ zb
        if self.unconstrained:
            gl = gk
        else:
            gl = (gk + gk.T) @ self.factor
        return (z_bar[0] if z.ndim == 1 else z_bar), {"L": gl}

    @property
    def is_gradient_map(self) -> bool:
        return not self.unconstrained


def quadratic_convex(k) -> QuadraticConvex:
    """Convex handle for a symmetric positive-definite matrix ``k``."""
    k = np.atleast_2d(np.asarray(k, dtype=float))
    if k.shape[0] != k.shape[1] or not np.allclose(k, k.T, rtol=0, atol=1e-12 * (1 + np.abs(k).max())):
        raise DomainError("K must be symmetric")
    try:
        factor = np.linalg.cholesky(0.5 * (k + k.T))
    except np.linalg.LinAlgError as exc:
        raise DomainError("K must be positive definite") from exc
    return QuadraticConvex(factor)


def init_quadratic(m: int, gain: float = 1.0, eps: float = 1e-6, unconstrained: bool = False) -> QuadraticConvex:
    if unconstrained:
        return QuadraticConvex(gain * np.eye(m), 0.0, True)
    return QuadraticConvex(math.sqrt(gain - eps) * np.eye(m), eps)


# -- several equally shaped networks evaluated together ------------------------


class ScnnStack:
    """G networks with identical layer shapes evaluated together.

    Public methods take inputs of shape ``(B, G, d)``; internally the group
    axis leads so every layer is one batched matmul.
    """

    def __init__(self, nets):
        nets = tuple(nets)
        first = nets[0]
        self.count = len(nets)
        self.layer_count = first.layer_count
        self.wz = [np.stack([n.input_weights[l] for n in nets]) for l in range(self.layer_count)]
        self.wz_t = [np.ascontiguousarray(w.transpose(0, 2, 1)) for w in self.wz]
        self.b = [np.stack([n.biases[l] for n in nets])[:, None, :] for l in range(self.layer_count)]
        self.wo = [None] + [np.stack([n.hidden_weights(l) for n in nets]) for l in range(1, self.layer_count)]
        self.wo_t = [None] + [np.ascontiguousarray(w.transpose(0, 2, 1)) for w in self.wo[1:]]
        self.wo_pre = [None] + [np.stack([n.hidden_pre[l] for n in nets]) for l in range(1, self.layer_count)]
        self.beta = np.array([n.beta for n in nets])[:, None, None]
        self.quad = None if first.log_quad is None else np.array([n.quad for n in nets])[:, None, None]

    def _layer(self, l, zg, o):
        a = zg @ self.wz_t[l] + self.b[l]
        if l > 0:
            a = a + o @ self.wo_t[l]
        return a

    def grad(self, zb):
        zg = np.ascontiguousarray(np.swapaxes(zb, 0, 1))
        pre, o = [], None
        for l in range(self.layer_count):
            a = self._layer(l, zg, o)
            o = softplus_beta(a, self.beta)
            pre.append(a)
        delta = np.ones(zg.shape[:2] + (1,))
        grad = np.zeros_like(zg)
        for l in range(self.layer_count - 1, -1, -1):
            e = delta * _sigmoid(self.beta * pre[l])
            grad += e @ self.wz[l]
            if l > 0:
                delta = e @ self.wo[l]
        if self.quad is not None:
            grad += self.quad * zg
        return np.swapaxes(grad, 0, 1)

    def vjp(self, zb, wb, value_seed=0.0):
        """Same contract as :func:`scnn_param_gradient`, one dict per network."""
        zg = np.ascontiguousarray(np.swapaxes(zb, 0, 1))
        wg = np.ascontiguousarray(np.swapaxes(wb, 0, 1))
        k, beta = self.layer_count, self.beta
        outs, tans, pre, tpre, sigs = [None], [None], [], [], []
        for l in range(k):
            a = self._layer(l, zg, outs[-1])
            t = wg @ self.wz_t[l]
            if l > 0:
                t = t + tans[-1] @ self.wo_t[l]
            sig = _sigmoid(beta * a)
            outs.append(softplus_beta(a, beta))
            tans.append(sig * t)
            pre.append(a)
            tpre.append(t)
            sigs.append(sig)
        grads = {}
        seed = np.reshape(np.asarray(value_seed, dtype=float), (1, -1, 1))
        o_bar = np.zeros(zg.shape[:2] + (1,)) + seed
        od_bar = np.ones(zg.shape[:2] + (1,))
        z_bar = np.zeros_like(zg)
        dbeta = np.zeros(self.count)
        for l in range(k - 1, -1, -1):
            a, t, sig = pre[l], tpre[l], sigs[l]
            t_bar = od_bar * sig
            a_bar = od_bar * (beta * sig * (1.0 - sig)) * t + o_bar * sig
            dbeta += np.sum(o_bar * (a * sig - outs[l + 1]) / beta, axis=(1, 2))
            dbeta += np.sum(od_bar * t * a * sig * (1.0 - sig), axis=(1, 2))
            a_bar_t, t_bar_t = np.swapaxes(a_bar, 1, 2), np.swapaxes(t_bar, 1, 2)
            grads[f"Wz{l}"] = a_bar_t @ zg + t_bar_t @ wg
            grads[f"b{l}"] = a_bar.sum(axis=1)
            z_bar += a_bar @ self.wz[l]
            if l > 0:
                grads[f"Wo{l}"] = (a_bar_t @ outs[l] + t_bar_t @ tans[l]) * _sigmoid(self.wo_pre[l])
                o_bar = a_bar @ self.wo[l]
                od_bar = t_bar @ self.wo[l]
        grads["log_beta"] = dbeta * beta[:, 0, 0]
        if self.quad is not None:
            mu = self.quad
            z_bar += mu * wg + seed * mu * zg
            grads["log_quad"] = mu[:, 0, 0] * (np.sum(wg * zg, axis=(1, 2)) + 0.5 * np.sum(seed * zg * zg, axis=(1, 2)))
        return np.swapaxes(z_bar, 0, 1), [{key: np.asarray(v[j]) for key, v in grads.items()} for j in range(self.count)]
