"""Monotone operators from convex handles, communication groups, and the
generalized PI control law."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .scnn import ScnnParams, ScnnStack, ShapeError


@dataclass(frozen=True)
class CommPartition:
    """Groups of (0-based) signal indices that may share measurements."""

    groups: tuple
    m: int

    def __post_init__(self):
        groups = tuple(tuple(sorted(set(int(i) for i in g))) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        for g in groups:
            if not g:
                raise ValueError("empty communication group")
            if g[0] < 0 or g[-1] >= self.m:
                raise ValueError(f"group {g} out of range for m={self.m}")
        covered = set().union(*groups) if groups else set()
        missing = sorted(set(range(self.m)) - covered)
        if missing:
            warnings.warn(f"indices {missing} belong to no group; their control term is zero", stacklevel=2)

    @classmethod
    def full(cls, m: int) -> "CommPartition":
        return cls((tuple(range(m)),), m)

    @classmethod
    def decentralized(cls, m: int) -> "CommPartition":
        return cls(tuple((i,) for i in range(m)), m)

    @classmethod
    def half(cls, m: int) -> "CommPartition":
        """First half of the nodes communicate; the rest are decentralized."""
        h = m // 2
        return cls((tuple(range(h)),) + tuple((i,) for i in range(h, m)), m)

    def coupled(self) -> np.ndarray:
        """Boolean m x m mask: True where some group holds both indices."""
        mask = np.zeros((self.m, self.m), dtype=bool)
        for g in self.groups:
            mask[np.ix_(g, g)] = True
        return mask


@dataclass(frozen=True, eq=False)
class MonotoneOperator:
    """z -> sum_j scatter(grad g_j(z[v_j]), v_j)."""

    partition: CommPartition
    handles: tuple

    def __post_init__(self):
        if len(self.handles) != len(self.partition.groups):
            raise ShapeError("one handle per group is required")
        for g, h in zip(self.partition.groups, self.handles):
            if h.input_dim != len(g):
                raise ShapeError(f"handle for group {g} has input dim {h.input_dim}")

    @property
    def m(self) -> int:
        return self.partition.m

    @property
    def is_gradient_map(self) -> bool:
        return all(h.is_gradient_map for h in self.handles)

    def __call__(self, z):
        return operator_eval(self, z)

    @cached_property
    def _plan(self) -> list:
        """Evaluation plan: ``("one", j, idx)`` or ``("stack", js, idx, ScnnStack)``.

        Equally shaped SCNN handles on disjoint groups are batched together.
        """
        buckets = {}
        for j, (g, h) in enumerate(zip(self.partition.groups, self.handles)):
            key = None
            if isinstance(h, ScnnParams):
                key = (len(g), tuple((k, np.shape(v)) for k, v in h.to_dict().items()))
            buckets.setdefault(key if key is not None else ("one", j), []).append(j)
        plan = []
        for key, js in buckets.items():
            idx = np.array([self.partition.groups[j] for j in js])
            if len(js) > 1 and key[0] != "one" and len(set(idx.ravel())) == idx.size:
                plan.append(("stack", js, idx, ScnnStack(self.handles[j] for j in js)))
            else:
                plan.extend(("one", j, list(self.partition.groups[j])) for j in js)
        return plan

    def potential(self, z):
        """Sum of the group convex functions (gradient maps only)."""
        z = np.asarray(z, dtype=float)
        return sum(h.value(z[..., list(g)]) for g, h in zip(self.partition.groups, self.handles))

    def vjp(self, z, w):
        """Cotangent w on the output -> (cotangent on z, {key: grad})."""
        z, w = np.asarray(z, dtype=float), np.asarray(w, dtype=float)
        z_bar = np.zeros_like(z)
        grads = {}
        for entry in self._plan:
            if entry[0] == "one":
                _, j, idx = entry
                zb, gj = self.handles[j].vjp(z[..., idx], w[..., idx])
                z_bar[..., idx] += zb
                gs = [(j, gj)]
            else:
                _, js, idx, stack = entry
                zb, glist = stack.vjp(np.atleast_2d(z)[:, idx], np.atleast_2d(w)[:, idx])
                z_bar[..., idx] += zb.reshape(z[..., idx].shape)
                gs = zip(js, glist)
            for j, gj in gs:
                for k, v in gj.items():
                    grads[f"{j}.{k}"] = v
        return z_bar, grads

    def jacobian(self, z) -> np.ndarray:
        """Jacobian at a single point."""
        z = np.asarray(z, dtype=float)
        m = self.m
        jac, _ = self.vjp(np.tile(z, (m, 1)), np.eye(m))
        return jac

    def to_dict(self) -> dict:
        return {f"{j}.{k}": v for j, h in enumerate(self.handles) for k, v in h.to_dict().items()}

    def replace(self, d: dict) -> "MonotoneOperator":
        handles = []
        for j, h in enumerate(self.handles):
            prefix = f"{j}."
            handles.append(h.replace({k[len(prefix):]: v for k, v in d.items() if k.startswith(prefix)}))
        return MonotoneOperator(self.partition, tuple(handles))


def operator_eval(op: MonotoneOperator, z):
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != op.m:
        raise ShapeError(f"input dim {z.shape[-1]} != {op.m}")
    out = np.zeros_like(z)
    for entry in op._plan:
        if entry[0] == "one":
            idx = entry[2]
            out[..., idx] += op.handles[entry[1]].grad(z[..., idx])
        else:
            idx, stack = entry[2], entry[3]
            out[..., idx] += stack.grad(np.atleast_2d(z)[:, idx]).reshape(z[..., idx].shape)
    return out


@dataclass
class ProbeReport:
    inner_products: np.ndarray
    distances: np.ndarray
    passed: bool
    worst_ratio: float

    def __bool__(self):
        return self.passed


def monotonicity_probe(op, etas, xis, tol=1e-12, strict_radius=1e-6) -> ProbeReport:
    """Inner products (q(eta) - q(xi)) . (eta - xi) over a batch of pairs."""
    etas, xis = np.atleast_2d(etas), np.atleast_2d(xis)
    ip = np.sum((op(etas) - op(xis)) * (etas - xis), axis=-1)
    dist = np.linalg.norm(etas - xis, axis=-1)
    far = dist > strict_radius
    ok = bool(np.all(ip >= -tol) and np.all(ip[far] > 0))
    ratio = ip[far] / dist[far] ** 2 if np.any(far) else np.array([np.inf])
    return ProbeReport(ip, dist, ok, float(np.min(ratio)))


@dataclass(frozen=True, eq=False)
class PiController:
    """u = p(ybar - y) + r(s), with ds/dt = ybar - y."""

    p_op: MonotoneOperator
    r_op: MonotoneOperator
    setpoint: np.ndarray
    kind: str = "neural_pi"

    def __post_init__(self):
        sp = np.atleast_1d(np.asarray(self.setpoint, dtype=float))
        object.__setattr__(self, "setpoint", sp)
        if not (self.p_op.m == self.r_op.m == sp.shape[0]):
            raise ShapeError("p, r and setpoint dimensions must agree")

    @property
    def m(self) -> int:
        return self.setpoint.shape[0]

    @property
    def is_structured(self) -> bool:
        return self.p_op.is_gradient_map and self.r_op.is_gradient_map

    def with_setpoint(self, ybar) -> "PiController":
        ybar = np.broadcast_to(np.asarray(ybar, dtype=float), (self.m,)).copy()
        return PiController(self.p_op, self.r_op, ybar, self.kind)

    def to_dict(self) -> dict:
        d = {f"P.{k}": v for k, v in self.p_op.to_dict().items()}
        d.update({f"I.{k}": v for k, v in self.r_op.to_dict().items()})
        return d

    def replace(self, d: dict) -> "PiController":
        p = self.p_op.replace({k[2:]: v for k, v in d.items() if k.startswith("P.")})
        r = self.r_op.replace({k[2:]: v for k, v in d.items() if k.startswith("I.")})
        return PiController(p, r, self.setpoint, self.kind)

    def vjp(self, y, s, u_bar):
        """Cotangent on u -> (cotangent on y, cotangent on s, param grads)."""
        zp_bar, gp = self.p_op.vjp(self.setpoint - y, u_bar)
        s_bar, gi = self.r_op.vjp(s, u_bar)
        grads = {f"P.{k}": v for k, v in gp.items()}
        grads.update({f"I.{k}": v for k, v in gi.items()})
        return -zp_bar, s_bar, grads


def pi_control(ctrl: PiController, y, s):
    y, s = np.asarray(y, dtype=float), np.asarray(s, dtype=float)
    if y.shape[-1] != ctrl.m or s.shape[-1] != ctrl.m:
        raise ShapeError("y and s must have the controller dimension")
    return operator_eval(ctrl.p_op, ctrl.setpoint - y) + operator_eval(ctrl.r_op, s)


def integral_step(ctrl: PiController, s, y, dt: float):
    if not dt > 0:
        raise ValueError("dt must be positive")
    y, s = np.asarray(y, dtype=float), np.asarray(s, dtype=float)
    if y.shape[-1] != ctrl.m or s.shape != y.shape:
        raise ShapeError("y and s must have the controller dimension")
    return s + dt * (ctrl.setpoint - y)
