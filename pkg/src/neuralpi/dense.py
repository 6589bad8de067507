"""Unconstrained dense network used by the DenseNN-PI baseline.

Same layer recursion as the strictly convex network, but hidden weights are
free, the output has the dimension of the input, and the last layer is
linear.  The raw output is used directly as a control term, so the map has
no gradient structure and no monotonicity guarantee.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scnn import DEFAULT_BETA, ShapeError, _sigmoid, softplus_beta


@dataclass(frozen=True, eq=False)
class DenseNet:
    input_weights: tuple
    hidden_weights: tuple
    biases: tuple
    beta: float = DEFAULT_BETA

    @property
    def input_dim(self) -> int:
        return self.input_weights[0].shape[1]

    @property
    def layer_count(self) -> int:
        return len(self.input_weights)

    @property
    def is_gradient_map(self) -> bool:
        return False

    def to_dict(self) -> dict:
        d = {}
        for l in range(self.layer_count):
            d[f"Wz{l}"] = self.input_weights[l]
            d[f"b{l}"] = self.biases[l]
            if l > 0:
                d[f"Wo{l}"] = self.hidden_weights[l]
        return d

    def replace(self, d: dict) -> "DenseNet":
        k = self.layer_count
        return DenseNet(
            tuple(np.array(d[f"Wz{l}"], dtype=float) for l in range(k)),
            (None,) + tuple(np.array(d[f"Wo{l}"], dtype=float) for l in range(1, k)),
            tuple(np.array(d[f"b{l}"], dtype=float) for l in range(k)),
            self.beta,
        )

    def _forward(self, zb):
        o = None
        pre, outs = [], [None]
        for l in range(self.layer_count):
            a = zb @ self.input_weights[l].T + self.biases[l]
            if l > 0:
                a = a + o @ self.hidden_weights[l].T
            last = l == self.layer_count - 1
            o = a if last else softplus_beta(a, self.beta)
            pre.append(a)
            outs.append(o)
        return pre, outs

    def grad(self, z):
        """Network output (named ``grad`` to share the handle surface)."""
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.input_dim:
            raise ShapeError(f"input dim {z.shape[-1]} != {self.input_dim}")
        out = self._forward(np.atleast_2d(z))[1][-1]
        return out[0] if z.ndim == 1 else out

    def vjp(self, z, w, value_seed=0.0):
        z, w = np.asarray(z, dtype=float), np.asarray(w, dtype=float)
        zb, wb = np.atleast_2d(z), np.atleast_2d(w)
        pre, outs = self._forward(zb)
        grads = {}
        z_bar = np.zeros_like(zb)
        o_bar = wb
        for l in range(self.layer_count - 1, -1, -1):
            if l == self.layer_count - 1:
                a_bar = o_bar
            else:
                a_bar = o_bar * _sigmoid(self.beta * pre[l])
            grads[f"Wz{l}"] = a_bar.T @ zb
            grads[f"b{l}"] = a_bar.sum(axis=0)
            z_bar += a_bar @ self.input_weights[l]
            if l > 0:
                grads[f"Wo{l}"] = a_bar.T @ outs[l]
                o_bar = a_bar @ self.hidden_weights[l]
        return (z_bar[0] if z.ndim == 1 else z_bar), grads


def init_dense(m: int, widths=(20, 20), rng: np.random.Generator | None = None, scale: float = 1.0) -> DenseNet:
    """Uniform fan-in initialization; output width equals ``m``."""
    rng = np.random.default_rng() if rng is None else rng
    sizes = tuple(int(w) for w in widths) + (m,)
    wz, wo, bs = [], [None], []
    for l, h in enumerate(sizes):
        a = scale / math.sqrt(m)
        wz.append(rng.uniform(-a, a, size=(h, m)))
        bs.append(np.zeros(h))
        if l > 0:
            c = scale / math.sqrt(sizes[l - 1])
            wo.append(rng.uniform(-c, c, size=(h, sizes[l - 1])))
    return DenseNet(tuple(wz), tuple(wo), tuple(bs))
