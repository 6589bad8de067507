"""Numerical certificates: Bregman distance, the Lyapunov function
V = S + B, its decrease along trajectories, output tracking, and the EIP
inequality of the plants."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .monotone import MonotoneOperator, PiController, operator_eval
from .plants import PlatoonModel, PowerModel, eip_residual
from .scnn import DomainError, ShapeError


@dataclass
class CertReport:
    name: str
    passed: bool
    worst_margin: float
    samples: int
    tolerance: float
    refs: dict = field(default_factory=dict)

    def __bool__(self):
        return self.passed

    def to_dict(self) -> dict:
        return {k: _plain(v) for k, v in asdict(self).items()}

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} {self.name}: worst_margin={self.worst_margin:.3e} samples={self.samples} tol={self.tolerance:g}"


def _plain(v):
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.ndarray):
        return _plain(v.tolist())
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def report_bundle_text(reports, header: dict | None = None) -> str:
    doc = dict(header or {})
    doc["reports"] = [r.to_dict() for r in reports]
    doc["passed"] = all(r.passed for r in reports)
    return json.dumps(_plain(doc), sort_keys=True, indent=2) + "\n"


# -- Bregman distance and Lyapunov function ---------------------------------


def _as_operator_fns(g):
    if isinstance(g, MonotoneOperator):
        return g.potential, lambda z: operator_eval(g, z)
    return g.value, g.grad


def bregman_distance(g, s, s_star):
    """g(s) - g(s*) - grad g(s*).(s - s*) for a convex handle or gradient operator."""
    s, s_star = np.asarray(s, dtype=float), np.asarray(s_star, dtype=float)
    if s.shape[-1] != s_star.shape[-1]:
        raise ShapeError("s and s* must have the same dimension")
    value, grad = _as_operator_fns(g)
    return value(s) - value(s_star) - np.sum(grad(s_star) * (s - s_star), axis=-1)


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)


def integral_term(r_op: MonotoneOperator, s, s_star):
    """Bregman distance of the integral potential; for a map without
    gradient structure the straight-line integral of r(.) - r(s*) is used."""
    if r_op.is_gradient_map:
        return bregman_distance(r_op, s, s_star)
    s, s_star = np.asarray(s, dtype=float), np.asarray(s_star, dtype=float)
    ds = s - s_star
    rs = operator_eval(r_op, s_star)
    total = 0.0
    for t, w in zip(0.5 * (_GL_NODES + 1.0), 0.5 * _GL_WEIGHTS):
        total = total + w * np.sum((operator_eval(r_op, s_star + t * ds) - rs) * ds, axis=-1)
    return total


@dataclass(frozen=True)
class ClosedLoopEquilibrium:
    x: np.ndarray
    s: np.ndarray
    u: np.ndarray
    feasible: bool
    residual: float
    iterations: int
    residual_history: tuple = ()

    @property
    def plant(self):
        from .plants import Equilibrium

        return Equilibrium(self.x, self.u, self.feasible, self.residual, self.iterations)


def conserved_anchor(model, x0, s0=None):
    """zeta + Gamma s (angles for the power model) is invariant along closed-loop
    trajectories; it selects which member of the equilibrium set is reached."""
    x0 = np.asarray(x0, dtype=float)
    m = model.m
    a = x0[..., :m].copy()
    if s0 is not None:
        a = a + np.asarray(s0, dtype=float) @ model.gamma
    return a


def equilibrium_set_solver(
    model, controller: PiController, anchor=None, tol: float = 1e-10, max_iter: int = 200
) -> ClosedLoopEquilibrium:
    """Closed-loop equilibrium (x*, s*, u*) with y* = ybar.

    Solves r(s*) = u* - p(0) by damped Newton (step halving, start at s = 0)
    where u* is the plant input that holds y* = ybar, using the invariant
    ``anchor`` to fix the position-like coordinates.
    """
    m = model.m
    ybar = controller.setpoint
    anchor = np.zeros(m) if anchor is None else np.asarray(anchor, dtype=float)
    nan = np.full(m, np.nan)
    if np.ptp(ybar) > 1e-12 * (1 + np.abs(ybar).max()):
        return ClosedLoopEquilibrium(np.concatenate([nan, nan]), nan, nan, False, math.inf, 0)
    gamma = model.gamma
    p0 = operator_eval(controller.p_op, np.zeros(m))
    r_op = controller.r_op

    if isinstance(model, PlatoonModel):
        L = model.laplacian
        const = p0 - (ybar - model.lambda0) / model.rho - L @ anchor

        def resid(s):
            return operator_eval(r_op, s) + const + L @ s

        def jac(s):
            return r_op.jacobian(s) + L

    elif isinstance(model, PowerModel):
        if np.ndim(model.load) != 1:
            raise ShapeError("equilibrium needs an unbatched load vector")
        E, b = model.incidence, model.susceptance

        def resid(s):
            return operator_eval(r_op, s) + p0 - model.load - model.flows(anchor - s @ gamma)

        def jac(s):
            th = (anchor - s @ gamma) @ E
            return r_op.jacobian(s) + E @ ((b * np.cos(th))[:, None] * E.T)

    else:
        raise TypeError(f"unsupported model {type(model).__name__}")

    s = np.zeros(m)
    r = resid(s)
    nr = float(np.linalg.norm(r))
    history = [nr]
    converged = nr < tol
    it = 0
    while not converged and it < max_iter:
        it += 1
        try:
            step = np.linalg.solve(jac(s), -r)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        improved = False
        while t > 1e-10:
            cand = s + t * step
            rc = resid(cand)
            nc = float(np.linalg.norm(rc))
            if np.isfinite(nc) and nc < nr:
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        s, r, nr = cand, rc, nc
        history.append(nr)
        converged = nr < tol
    x = np.concatenate([anchor - s @ gamma, ybar.copy()])
    u = p0 + operator_eval(r_op, s)
    feasible = bool(converged)
    if feasible and isinstance(model, PowerModel):
        feasible = bool(model.in_region(x))
    if feasible:
        feasible = float(np.linalg.norm(model.derivative(x, u))) < 1e-8
    return ClosedLoopEquilibrium(x, s, u, feasible, nr, it, tuple(history))


def lyapunov_value(model, controller: PiController, x, s, eq: ClosedLoopEquilibrium):
    """V = S(x, x*) + B(s, s*)."""
    if not eq.feasible:
        raise DomainError("Lyapunov function needs a feasible equilibrium")
    return model.storage(x, eq.x) + integral_term(controller.r_op, s, eq.s)


def lyapunov_derivative(model, controller: PiController, x, s, eq: ClosedLoopEquilibrium):
    """Analytic dV/dt along the closed-loop vector field."""
    x, s = np.asarray(x, dtype=float), np.asarray(s, dtype=float)
    y = model.output(x)
    u = operator_eval(controller.p_op, controller.setpoint - y) + operator_eval(controller.r_op, s)
    sdot = np.sum(model.storage_grad(x, eq.x) * model.derivative(x, u), axis=-1)
    bdot = np.sum((operator_eval(controller.r_op, s) - operator_eval(controller.r_op, eq.s)) * (controller.setpoint - y), axis=-1)
    return sdot + bdot


def _sample_model(model, b):
    load = getattr(model, "load", None)
    if load is not None and np.ndim(load) == 2:
        from dataclasses import replace

        return replace(model, load=load[b])
    return model


def lyapunov_decrease_check(traj, controller: PiController, tol_scale: float = 1e-8, name="lyapunov_decrease") -> CertReport:
    """dV/dt <= -rho |y - y*|^2 + tol_scale (1 + V) at every recorded point.

    Equilibria are solved per rollout and per disturbance segment, anchored
    on the invariant of the initial state.
    """
    worst = -math.inf
    violations = []
    infeasible = []
    count = 0
    seg_of_record = [max(i for i, (k, _) in enumerate(traj.segments) if k <= r * traj.stride) for r in range(len(traj.times))]
    seg_of_record = np.array(seg_of_record)
    for b in range(traj.batch):
        if traj.nonfinite_step[b] >= 0:
            violations.append({"rollout": b, "reason": "nonfinite", "step": int(traj.nonfinite_step[b])})
            worst = math.inf
            continue
        anchor = conserved_anchor(traj.segments[0][1], traj.x[0, b], traj.s[0, b])
        for seg, (_, seg_model) in enumerate(traj.segments):
            rows = np.nonzero(seg_of_record == seg)[0]
            if rows.size == 0:
                continue
            mdl = _sample_model(seg_model, b)
            eq = equilibrium_set_solver(mdl, controller, anchor)
            if not eq.feasible:
                infeasible.append({"rollout": b, "segment": seg, "residual": eq.residual})
                worst = math.inf
                continue
            x, s = traj.x[rows, b], traj.s[rows, b]
            vdot = lyapunov_derivative(mdl, controller, x, s, eq)
            v = lyapunov_value(mdl, controller, x, s, eq)
            dy = mdl.output(x) - eq.x[mdl.m:]
            margin = vdot + mdl.eip_rho * np.sum(dy * dy, axis=-1) - tol_scale * (1.0 + np.abs(v))
            count += rows.size
            worst = max(worst, float(np.max(margin)))
            bad = np.nonzero(margin > 0)[0]
            if bad.size:
                violations.append({"rollout": b, "records": rows[bad[:10]].tolist(), "max_margin": float(margin[bad].max())})
    passed = not violations and not infeasible and worst <= 0
    return CertReport(
        name, passed, worst, count, tol_scale,
        {"violations": violations[:20], "violating_rollouts": len(violations), "infeasible": infeasible[:20]},
    )


def tracking_check(traj, ybar, settle_time: float, eps: float, name="tracking") -> CertReport:
    """Pass iff |y(t) - ybar|_inf < eps for all t >= settle_time (all rollouts)."""
    if traj.times[-1] < settle_time - 1e-9:
        raise ValueError("trajectory shorter than the settle time")
    rows = traj.times >= settle_time - 1e-9
    err = np.abs(traj.y[rows] - np.asarray(ybar, dtype=float))
    per_rollout = np.max(err, axis=(0, 2))
    per_rollout = np.where(np.isfinite(per_rollout), per_rollout, np.inf)
    worst = float(np.max(per_rollout))
    failing = np.nonzero(~(per_rollout < eps))[0]
    return CertReport(
        name, bool(failing.size == 0), worst - eps, traj.batch, eps,
        {"settle_time": settle_time, "failing_rollouts": failing[:20].tolist(), "max_error": worst},
    )


def _random_equilibria(model, n, rng):
    """Feasible plant equilibria for random constant inputs."""
    m = model.m
    out = []
    if isinstance(model, PlatoonModel):
        for _ in range(n):
            out.append(model.solve_equilibrium(rng.uniform(-3.0, 3.0, m)))
        return out
    gamma = model.gamma
    while len(out) < n:
        delta = rng.uniform(-0.4, 0.4, m) @ gamma
        c = model.nominal + rng.uniform(-0.5, 0.5)
        ustar = model.load + model.damping * (c - model.nominal) + model.flows(delta)
        eq = model.solve_equilibrium(ustar)
        if eq.feasible:
            out.append(eq)
    return out


def eip_audit(model, samples: int = 10_000, seed: int = 0, n_equilibria: int = 100, tol_scale: float = 1e-8) -> CertReport:
    """EIP inequality at random (state, input) pairs around random equilibria."""
    rng = np.random.default_rng(seed)
    m = model.m
    n_eq = max(1, min(n_equilibria, samples))
    per = int(math.ceil(samples / n_eq))
    worst = -math.inf
    total = 0
    bad = 0
    for eq in _random_equilibria(model, n_eq, rng):
        k = min(per, samples - total)
        if k <= 0:
            break
        ystar = eq.x[m:]
        if isinstance(model, PowerModel):
            delta = _sample_region(model, eq.x[:m], k, rng)
            y = ystar + rng.uniform(-2.0, 2.0, (k, m))
        else:
            delta = eq.x[:m] + rng.normal(0.0, 1.0, (k, m))
            y = rng.uniform(3.0, 8.0, (k, m))
        x = np.concatenate([delta, y], axis=-1)
        u = rng.uniform(-3.0, 3.0, (k, m))
        res = eip_residual(model, x, u, eq)
        dy = y - ystar
        margin = res - tol_scale * (1.0 + np.sum(dy * dy, axis=-1))
        worst = max(worst, float(margin.max()))
        bad += int(np.sum(margin > 0))
        total += k
    return CertReport(f"eip_{model.kind}", bad == 0, worst, total, tol_scale, {"seed": seed, "equilibria": n_eq, "violations": bad})


def _sample_region(model: PowerModel, center, k, rng):
    out = np.empty((k, model.m))
    filled = 0
    while filled < k:
        cand = center + rng.uniform(-0.6, 0.6, (2 * k, model.m))
        cand = cand[model.in_region(np.concatenate([cand, np.zeros_like(cand)], axis=-1))]
        take = min(k - filled, len(cand))
        out[filled:filled + take] = cand[:take]
        filled += take
    return out
