"""Closed-loop rollouts of a plant under a PI controller."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .monotone import PiController, pi_control

FLAG_NONFINITE = 1
FLAG_REGION = 2


class Integrator(enum.Enum):
    EULER = "euler"
    RK4 = "rk4"


@dataclass(frozen=True)
class Disturbance:
    """Additive step change of a model parameter at ``time`` seconds.

    ``delta`` has shape ``(m,)`` or ``(B, m)`` for per-rollout patches.
    """

    time: float
    target: str
    delta: np.ndarray


@dataclass(frozen=True)
class RolloutConfig:
    dt: float
    steps: int
    integrator: Integrator = Integrator.EULER
    disturbances: tuple = ()
    stride: int = 1

    def __post_init__(self):
        if not self.dt > 0 or self.steps < 1 or self.stride < 1:
            raise ValueError("need dt > 0, steps >= 1, stride >= 1")
        object.__setattr__(self, "integrator", Integrator(self.integrator))

    def disturbance_step(self, d: Disturbance) -> int:
        return max(0, int(math.ceil(d.time / self.dt - 1e-9)))


def apply_disturbance(model, patch: Disturbance):
    if not hasattr(model, patch.target) or patch.target in ("incidence",):
        raise ValueError(f"{type(model).__name__} has no patchable parameter {patch.target!r}")
    return replace(model, **{patch.target: getattr(model, patch.target) + np.asarray(patch.delta, dtype=float)})


@dataclass
class Trajectory:
    """Batched record: arrays are indexed ``[record, batch, component]``."""

    times: np.ndarray
    x: np.ndarray
    s: np.ndarray
    u: np.ndarray
    y: np.ndarray
    nonfinite_step: np.ndarray
    region_violation: np.ndarray
    dt: float
    stride: int = 1
    segments: list = field(default_factory=list, repr=False)
    setpoint: np.ndarray | None = None

    @property
    def batch(self) -> int:
        return self.x.shape[1]

    @property
    def finite(self) -> np.ndarray:
        return self.nonfinite_step < 0

    def model_at(self, record: int):
        """Model active at the given record index."""
        step = record * self.stride
        current = self.segments[0][1]
        for start, model in self.segments:
            if start <= step:
                current = model
        return current

    def select(self, idx) -> "Trajectory":
        idx = np.atleast_1d(idx)
        segs = [(k, _select_model(mdl, idx)) for k, mdl in self.segments]
        return Trajectory(
            self.times, self.x[:, idx], self.s[:, idx], self.u[:, idx], self.y[:, idx],
            self.nonfinite_step[idx], self.region_violation[idx], self.dt, self.stride, segs, self.setpoint,
        )


def _select_model(model, idx):
    load = getattr(model, "load", None)
    if load is not None and np.ndim(load) == 2:
        return replace(model, load=load[idx])
    return model


def _field(model, x, s, u, ybar):
    y = model.output(x)
    return model.derivative(x, u), ybar - y


def rollout(model, controller: PiController, init, cfg: RolloutConfig, s0=None) -> Trajectory:
    """Zero-order-hold rollout; u is computed from (y_k, s_k) and held over the step."""
    x = np.array(init, dtype=float, ndmin=2)
    if x.shape[-1] != model.n:
        raise ValueError(f"initial state must have {model.n} entries")
    batch = x.shape[0]
    m = model.m
    s = np.zeros((batch, m)) if s0 is None else np.array(np.broadcast_to(s0, (batch, m)), dtype=float)
    ybar = controller.setpoint

    starts = sorted((cfg.disturbance_step(d), i) for i, d in enumerate(cfg.disturbances))
    segments = [(0, model)]
    current = model
    for k, i in starts:
        current = apply_disturbance(current, cfg.disturbances[i])
        segments.append((k, current))

    n_rec = cfg.steps // cfg.stride + 1
    rec = {name: np.empty((n_rec, batch, dim)) for name, dim in (("x", model.n), ("s", m), ("u", m), ("y", m))}
    times = np.arange(n_rec) * cfg.dt * cfg.stride
    onset = np.full(batch, -1, dtype=int)
    region = np.zeros(batch, dtype=bool)
    seg_iter = iter(segments[1:])
    next_seg = next(seg_iter, None)
    active = model
    with np.errstate(all="ignore"):
        for k in range(cfg.steps + 1):
            while next_seg is not None and next_seg[0] <= k:
                active = next_seg[1]
                next_seg = next(seg_iter, None)
            y = model.output(x)
            u = pi_control(controller, y, s)
            if hasattr(active, "in_region"):
                region |= ~active.in_region(x) & (onset < 0)
            if k % cfg.stride == 0:
                r = k // cfg.stride
                rec["x"][r], rec["s"][r], rec["u"][r], rec["y"][r] = x, s, u, y
            if k == cfg.steps:
                break
            if cfg.integrator is Integrator.EULER:
                dx, ds = _field(active, x, s, u, ybar)
            else:
                k1 = _field(active, x, s, u, ybar)
                k2 = _field(active, x + 0.5 * cfg.dt * k1[0], s, u, ybar)
                k3 = _field(active, x + 0.5 * cfg.dt * k2[0], s, u, ybar)
                k4 = _field(active, x + cfg.dt * k3[0], s, u, ybar)
                dx = (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]) / 6.0
                ds = (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]) / 6.0
            x = x + cfg.dt * dx
            s = s + cfg.dt * ds
            bad = ~(np.all(np.isfinite(x), axis=-1) & np.all(np.isfinite(s), axis=-1))
            newly = bad & (onset < 0)
            onset[newly] = k + 1
            x[bad] = np.nan
            s[bad] = np.nan
    traj = Trajectory(times, rec["x"], rec["s"], rec["u"], rec["y"], onset, region, cfg.dt, cfg.stride, segments, ybar.copy())
    return traj


# -- CSV export ---------------------------------------------------------------


def _fmt(v) -> str:
    return format(float(v), ".17g")


def row_flags(traj: Trajectory, b: int) -> np.ndarray:
    flags = np.zeros(len(traj.times), dtype=int)
    if traj.nonfinite_step[b] >= 0:
        flags[np.arange(len(traj.times)) * traj.stride >= traj.nonfinite_step[b]] |= FLAG_NONFINITE
    for r in range(len(traj.times)):
        mdl = traj.model_at(r)
        if hasattr(mdl, "in_region") and not bool(mdl.in_region(traj.x[r, b])) and np.all(np.isfinite(traj.x[r, b])):
            flags[r] |= FLAG_REGION
    return flags


def trajectory_header(n: int, m: int) -> list:
    return (
        ["t"]
        + [f"x_{i + 1}" for i in range(n)]
        + [f"s_{i + 1}" for i in range(m)]
        + [f"u_{i + 1}" for i in range(m)]
        + [f"y_{i + 1}" for i in range(m)]
        + ["flags"]
    )


def write_trajectory_csv(traj: Trajectory, path, b: int = 0, comments: dict | None = None):
    path = Path(path)
    n, m = traj.x.shape[-1], traj.y.shape[-1]
    flags = row_flags(traj, b)
    with path.open("w", newline="") as fh:
        for key, val in (comments or {}).items():
            fh.write(f"# {key}: {val}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trajectory_header(n, m))
        for r, t in enumerate(traj.times):
            row = [_fmt(t)] + [_fmt(v) for v in traj.x[r, b]] + [_fmt(v) for v in traj.s[r, b]]
            row += [_fmt(v) for v in traj.u[r, b]] + [_fmt(v) for v in traj.y[r, b]] + [str(flags[r])]
            w.writerow(row)
    return path


def read_trajectory_csv(path):
    """Return ``(columns, data)`` with data as a float array (flags included)."""
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    data = np.array([[float(v) for v in row] for row in reader])
    return header, data
