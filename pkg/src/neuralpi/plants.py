"""Equilibrium-independent passive plants: a vehicle platoon and a power network.

State layout for both models is ``x = (position-like part, y)`` with shape
``(..., 2m)``: relative positions and velocities [m/s] for the platoon,
rotor angles [rad] and frequencies [Hz] for the power network.  Every
evaluation broadcasts over leading batch dimensions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .scnn import DomainError, ShapeError

NOMINAL_FREQUENCY = 60.0


def incidence_from_edges(edges, m: int) -> np.ndarray:
    """Incidence matrix (m x e) with +1 at the tail and -1 at the head."""
    edges = [(int(t), int(h)) for t, h in edges]
    E = np.zeros((m, len(edges)))
    for j, (t, h) in enumerate(edges):
        if t == h or not (0 <= t < m and 0 <= h < m):
            raise ValueError(f"bad edge {(t, h)} for m={m}")
        E[t, j] = 1.0
        E[h, j] = -1.0
    return E


def edges_from_incidence(E: np.ndarray) -> list:
    return [(int(np.argmax(col > 0)), int(np.argmax(col < 0))) for col in E.T]


def chain_edges(m: int) -> list:
    return [(i, i + 1) for i in range(m - 1)]


def ring_edges(m: int) -> list:
    return chain_edges(m) + ([(m - 1, 0)] if m > 2 else [])


def averaging_projector(m: int) -> np.ndarray:
    """Gamma = I - (1/m) 1 1^T."""
    return np.eye(m) - np.full((m, m), 1.0 / m)


def _is_connected(E: np.ndarray) -> bool:
    m = E.shape[0]
    return m == 1 or np.linalg.matrix_rank(E.T) == m - 1


@dataclass(frozen=True)
class Equilibrium:
    x: np.ndarray
    u: np.ndarray
    feasible: bool
    residual: float = 0.0
    iterations: int = 0


@dataclass(frozen=True, eq=False)
class PlatoonModel:
    """zeta' = Gamma y;  y' = kappa (-(y - lambda0) + rho (u - E D E^T zeta)).

    ``dist_sens`` is the per-edge diagonal of D (length e).  ``cost_weights``
    are the per-vehicle control-cost coefficients of the transient cost.
    """

    kappa: np.ndarray
    rho: np.ndarray
    lambda0: np.ndarray
    incidence: np.ndarray
    dist_sens: np.ndarray
    cost_weights: np.ndarray

    kind = "platoon"

    def __post_init__(self):
        m = self.m
        for name in ("kappa", "rho", "lambda0", "cost_weights"):
            if np.shape(getattr(self, name))[-1] != m:
                raise ShapeError(f"{name} must have length {m}")
        if self.incidence.shape[1] != self.dist_sens.shape[0]:
            raise ShapeError("dist_sens must have one entry per edge")
        if np.any(self.kappa <= 0) or np.any(self.rho <= 0) or np.any(self.dist_sens <= 0):
            raise DomainError("kappa, rho and D must be strictly positive")
        if not _is_connected(self.incidence):
            raise DomainError("neighbour graph must be connected")

    @property
    def m(self) -> int:
        return self.incidence.shape[0]

    @property
    def n(self) -> int:
        return 2 * self.m

    @property
    def gamma(self) -> np.ndarray:
        return averaging_projector(self.m)

    @property
    def laplacian(self) -> np.ndarray:
        return self.incidence @ (self.dist_sens[:, None] * self.incidence.T)

    @property
    def eip_rho(self) -> float:
        return float(np.min(1.0 / self.rho))

    def output(self, x):
        return np.asarray(x)[..., self.m:]

    def derivative(self, x, u):
        return platoon_derivative(self, x, u)

    def vjp(self, x, u, xdot_bar):
        """Cotangent on the derivative -> (cotangent on x, cotangent on u)."""
        m = self.m
        a, c = xdot_bar[..., :m], xdot_bar[..., m:]
        kc = self.kappa * c
        zeta_bar = -(self.rho * kc) @ self.laplacian
        y_bar = a @ self.gamma - kc
        return np.concatenate([zeta_bar, y_bar], axis=-1), self.rho * kc

    def storage(self, x, xstar):
        m = self.m
        dz = np.asarray(x)[..., :m] - xstar[:m]
        dy = np.asarray(x)[..., m:] - xstar[m:]
        return 0.5 * np.sum(dy * dy / (self.kappa * self.rho), axis=-1) + 0.5 * np.sum(dz * (dz @ self.laplacian), axis=-1)

    def storage_grad(self, x, xstar):
        m = self.m
        dz = np.asarray(x)[..., :m] - xstar[:m]
        dy = np.asarray(x)[..., m:] - xstar[m:]
        return np.concatenate([dz @ self.laplacian, dy / (self.kappa * self.rho)], axis=-1)

    def solve_equilibrium(self, ustar, ybar=None) -> Equilibrium:
        """Unique (zeta*, y*) with zeta* orthogonal to 1 for a constant input u*.

        ``ybar`` is not used: the platoon settles to the velocity fixed by u*.
        """
        ustar = np.asarray(ustar, dtype=float)
        w = 1.0 / self.rho
        c = (np.sum(w * self.lambda0) + np.sum(ustar)) / np.sum(w)
        ystar = np.full(self.m, c)
        rhs = ustar - w * (ystar - self.lambda0)
        zstar = np.linalg.pinv(self.laplacian) @ rhs
        x = np.concatenate([zstar, ystar])
        res = float(np.linalg.norm(platoon_derivative(self, x, ustar)))
        return Equilibrium(x, ustar, bool(np.isfinite(res) and res < 1e-8), res)


    def to_json_dict(self) -> dict:
        return {
            "kind": "platoon",
            "units": {
                "kappa": "1/s",
                "rho": "dimensionless",
                "lambda0": "m/s",
                "dist_sens": "1/s per m (per edge)",
                "cost_weights": "dimensionless",
            },
            "m": self.m,
            "edges": edges_from_incidence(self.incidence),
            "kappa": self.kappa.tolist(),
            "rho": self.rho.tolist(),
            "lambda0": self.lambda0.tolist(),
            "dist_sens": self.dist_sens.tolist(),
            "cost_weights": self.cost_weights.tolist(),
        }


@dataclass(frozen=True, eq=False)
class PowerModel:
    """delta' = Gamma y;  M y' = -D (y - ybar) - d + u - E b sin(E^T delta).

    ``load`` may carry a leading batch dimension after a per-rollout
    disturbance has been applied.
    """

    inertia: np.ndarray
    damping: np.ndarray
    load: np.ndarray
    incidence: np.ndarray
    susceptance: np.ndarray
    nominal: float = NOMINAL_FREQUENCY

    kind = "power"

    def __post_init__(self):
        m = self.m
        for name in ("inertia", "damping", "load"):
            if np.shape(getattr(self, name))[-1] != m:
                raise ShapeError(f"{name} must have length {m}")
        if self.incidence.shape[1] != self.susceptance.shape[0]:
            raise ShapeError("one susceptance per line is required")
        if np.any(self.inertia <= 0) or np.any(self.damping <= 0) or np.any(self.susceptance <= 0):
            raise DomainError("M, D and b must be strictly positive")
        if not _is_connected(self.incidence):
            raise DomainError("network must be connected")

    @property
    def m(self) -> int:
        return self.incidence.shape[0]

    @property
    def n(self) -> int:
        return 2 * self.m

    @property
    def gamma(self) -> np.ndarray:
        return averaging_projector(self.m)

    @property
    def eip_rho(self) -> float:
        return float(np.min(self.damping))

    def output(self, x):
        return np.asarray(x)[..., self.m:]

    def line_angles(self, x):
        return np.asarray(x)[..., : self.m] @ self.incidence

    def in_region(self, x):
        """True where every line angle lies strictly inside (-pi/2, pi/2)."""
        return np.all(np.abs(self.line_angles(x)) < math.pi / 2, axis=-1)

    def flows(self, delta):
        return (self.susceptance * np.sin(delta @ self.incidence)) @ self.incidence.T

    def derivative(self, x, u):
        return power_derivative(self, x, u)

    def vjp(self, x, u, xdot_bar):
        m = self.m
        a, c = xdot_bar[..., :m], xdot_bar[..., m:]
        cm = c / self.inertia
        theta = np.asarray(x)[..., :m] @ self.incidence
        delta_bar = -((cm @ self.incidence) * self.susceptance * np.cos(theta)) @ self.incidence.T
        y_bar = a @ self.gamma - self.damping * cm
        return np.concatenate([delta_bar, y_bar], axis=-1), cm

    def storage(self, x, xstar):
        m = self.m
        x = np.asarray(x)
        dy = x[..., m:] - xstar[m:]
        th, th_s = self.line_angles(x), xstar[:m] @ self.incidence
        bregman = -np.sum(self.susceptance * (np.cos(th) - np.cos(th_s)), axis=-1)
        bregman -= (x[..., :m] - xstar[:m]) @ self.flows(xstar[:m])
        return 0.5 * np.sum(self.inertia * dy * dy, axis=-1) + bregman

    def storage_grad(self, x, xstar):
        m = self.m
        x = np.asarray(x)
        return np.concatenate(
            [self.flows(x[..., :m]) - self.flows(xstar[:m]), self.inertia * (x[..., m:] - xstar[m:])], axis=-1
        )

    def solve_equilibrium(self, ustar, ybar=None, start=None, tol=1e-10, max_iter=100) -> Equilibrium:
        """Damped Newton on the power-flow balance at the synchronous frequency."""
        ustar = np.asarray(ustar, dtype=float)
        load = np.asarray(self.load, dtype=float)
        if load.ndim != 1:
            raise ShapeError("equilibrium needs an unbatched load vector")
        ybar = self.nominal if ybar is None else float(np.mean(ybar))
        c = ybar + np.sum(ustar - load) / np.sum(self.damping)
        ystar = np.full(self.m, c)
        target = ustar - load - self.damping * (ystar - ybar)
        delta, res, it, ok = _newton_flow(self, target, start, tol, max_iter)
        x = np.concatenate([delta, ystar])
        ok = ok and bool(np.all(np.abs(delta @ self.incidence) < math.pi / 2))
        return Equilibrium(x, ustar, ok, res, it)


    def to_json_dict(self) -> dict:
        return {
            "kind": "power",
            "units": {
                "inertia": "s^2",
                "damping": "s",
                "load": "p.u.",
                "susceptance": "p.u.",
                "nominal": "Hz",
            },
            "m": self.m,
            "edges": edges_from_incidence(self.incidence),
            "inertia": self.inertia.tolist(),
            "damping": self.damping.tolist(),
            "load": np.asarray(self.load).tolist(),
            "susceptance": self.susceptance.tolist(),
            "nominal": self.nominal,
        }


def _newton_flow(model: PowerModel, target, start, tol, max_iter):
    """Solve E b sin(E^T delta) = target with 1^T delta = 0 (target must sum to 0)."""
    m = model.m
    E, b = model.incidence, model.susceptance
    ones = np.full((m, m), 1.0 / m)
    delta = np.zeros(m) if start is None else np.asarray(start, dtype=float) - np.mean(start)

    def resid(dl):
        return model.flows(dl) - target

    r = resid(delta)
    nr = float(np.linalg.norm(r))
    for it in range(1, max_iter + 1):
        if nr < tol:
            return delta, nr, it - 1, True
        jac = E @ ((b * np.cos(delta @ E))[:, None] * E.T) + ones
        try:
            step = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError:
            return delta, nr, it, False
        t = 1.0
        while t > 1e-8:
            cand = delta + t * step
            rc = resid(cand)
            if np.linalg.norm(rc) < nr:
                break
            t *= 0.5
        else:
            return delta, nr, it, False
        delta, r, nr = cand, rc, float(np.linalg.norm(rc))
    return delta, nr, max_iter, nr < tol


def platoon_derivative(model: PlatoonModel, x, u):
    x, u = np.asarray(x, dtype=float), np.asarray(u, dtype=float)
    m = model.m
    if x.shape[-1] != 2 * m or u.shape[-1] != m:
        raise ShapeError("state must have 2m entries and input m entries")
    zeta, y = x[..., :m], x[..., m:]
    zdot = y @ model.gamma
    ydot = model.kappa * (-(y - model.lambda0) + model.rho * (u - zeta @ model.laplacian))
    return np.concatenate([zdot, ydot], axis=-1)


def power_derivative(model: PowerModel, x, u, return_flag: bool = False):
    x, u = np.asarray(x, dtype=float), np.asarray(u, dtype=float)
    m = model.m
    if x.shape[-1] != 2 * m or u.shape[-1] != m:
        raise ShapeError("state must have 2m entries and input m entries")
    delta, y = x[..., :m], x[..., m:]
    ddot = y @ model.gamma
    ydot = (-model.damping * (y - model.nominal) - model.load + u - model.flows(delta)) / model.inertia
    out = np.concatenate([ddot, ydot], axis=-1)
    if return_flag:
        return out, ~model.in_region(x)
    return out


def storage_value(model, x, equilibrium: Equilibrium):
    if not equilibrium.feasible:
        raise DomainError("storage needs a feasible equilibrium")
    return model.storage(x, equilibrium.x)


def eip_residual(model, x, u, equilibrium: Equilibrium, rho: float | None = None):
    """S' + rho |y - y*|^2 - (y - y*).(u - u*); nonpositive for an EIP plant."""
    rho = model.eip_rho if rho is None else rho
    x, u = np.asarray(x, dtype=float), np.asarray(u, dtype=float)
    sdot = np.sum(model.storage_grad(x, equilibrium.x) * model.derivative(x, u), axis=-1)
    dy = model.output(x) - equilibrium.x[model.m:]
    return sdot + rho * np.sum(dy * dy, axis=-1) - np.sum(dy * (u - equilibrium.u), axis=-1)


def solve_equilibrium(model, ustar, ybar=None) -> Equilibrium:
    return model.solve_equilibrium(ustar, ybar)


def generate_params(kind: str, m: int, topology: str | None = None, seed: int = 0, **overrides):
    """Random physical parameters.

    platoon: kappa = 1, lambda0 ~ U[5, 6], rho ~ U[1, 2], c ~ U[0.025, 0.075],
    unit distance sensitivity, chain topology.
    power: M ~ U[0.1, 0.4], D ~ U[0.5, 1.5], b ~ U[5, 15], zero net load,
    ring topology.
    """
    if m < 2:
        raise ValueError("need at least two nodes")
    rng = np.random.default_rng(seed)
    if kind == "platoon":
        edges = ring_edges(m) if topology == "ring" else chain_edges(m)
        E = incidence_from_edges(edges, m)
        params = dict(
            kappa=np.ones(m),
            lambda0=rng.uniform(5.0, 6.0, m),
            rho=rng.uniform(1.0, 2.0, m),
            cost_weights=rng.uniform(0.025, 0.075, m),
            dist_sens=np.ones(E.shape[1]),
            incidence=E,
        )
        params.update(overrides)
        return PlatoonModel(**params)
    if kind == "power":
        edges = chain_edges(m) if topology == "chain" else ring_edges(m)
        E = incidence_from_edges(edges, m)
        params = dict(
            inertia=rng.uniform(0.1, 0.4, m),
            damping=rng.uniform(0.5, 1.5, m),
            susceptance=rng.uniform(5.0, 15.0, E.shape[1]),
            load=np.zeros(m),
            incidence=E,
        )
        params.update(overrides)
        return PowerModel(**params)
    raise ValueError(f"unknown plant kind {kind!r}")


def model_from_json_dict(d: dict):
    m = int(d["m"])
    E = incidence_from_edges(d["edges"], m)
    arr = lambda key: np.asarray(d[key], dtype=float)  # noqa: E731
    if d["kind"] == "platoon":
        return PlatoonModel(arr("kappa"), arr("rho"), arr("lambda0"), E, arr("dist_sens"), arr("cost_weights"))
    if d["kind"] == "power":
        return PowerModel(arr("inertia"), arr("damping"), arr("load"), E, arr("susceptance"), float(d.get("nominal", NOMINAL_FREQUENCY)))
    raise ValueError(f"unknown plant kind {d['kind']!r}")


def load_model(path):
    path = Path(path)
    return model_from_json_dict(json.loads(path.read_text()))


def save_model(model, path):
    Path(path).write_text(json.dumps(model.to_json_dict(), indent=2) + "\n")


def with_load(model: PowerModel, load) -> PowerModel:
    return replace(model, load=np.asarray(load, dtype=float))
