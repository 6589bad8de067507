"""Orchestration shared by the command line and the acceptance suite:
training runs, shared test batches, cost evaluation and the certification
suite for one controller."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import config as C
from .certify import CertReport, eip_audit, lyapunov_decrease_check, tracking_check
from .monotone import PiController, monotonicity_probe
from .sim import Integrator, RolloutConfig, rollout
from .train import loss_eval, sample_batch, steady_state_cost, train


def eval_steps(cfg: dict, horizon_s: float | None = None) -> int:
    horizon_s = cfg["eval"]["horizon_s"] if horizon_s is None else horizon_s
    return int(round(horizon_s / cfg["rollout"]["dt"]))


def test_batch(cfg: dict, model, n: int | None = None, seed: int | None = None, horizon_s: float | None = None):
    """Initial states and a rollout config drawn from the training distribution
    with the evaluation seed, so every controller sees the same batch."""
    n = cfg["eval"]["batch"] if n is None else n
    seed = cfg["eval"]["seed"] if seed is None else seed
    tcfg = C.train_config(cfg, model)
    x0, dist = sample_batch(model, tcfg, np.random.default_rng(seed), n, C.default_setpoint(cfg, model))
    rcfg = RolloutConfig(cfg["rollout"]["dt"], eval_steps(cfg, horizon_s), Integrator(cfg["rollout"]["integrator"]), dist)
    return x0, rcfg


@dataclass
class Evaluation:
    transient: np.ndarray
    steady: np.ndarray
    trajectory: object

    def summary(self) -> dict:
        out = {}
        for name, v in (("transient", self.transient), ("steady", self.steady)):
            fin = v[np.isfinite(v)]
            out[f"{name}_mean"] = float(np.mean(fin)) if fin.size else math.inf
            out[f"{name}_std"] = float(np.std(fin)) if fin.size else math.inf
        out["nonfinite"] = int(np.sum(~np.isfinite(self.transient)))
        return out


def evaluate(cfg: dict, model, ctrl: PiController, horizon_s: float | None = None, n: int | None = None) -> Evaluation:
    """Transient cost over the training horizon and snapshot cost at the end
    of the evaluation horizon, per rollout of the shared test batch."""
    x0, rcfg = test_batch(cfg, model, n, horizon_s=horizon_s)
    traj = rollout(model, ctrl, x0, rcfg)
    spec = C.loss_spec(cfg, model)
    K = spec.horizon
    short = replace(traj, y=traj.y[: K + 1], u=traj.u[: K + 1])
    transient = loss_eval(spec, short, per_rollout=True)
    steady = steady_state_cost(spec, traj, time=rcfg.steps * rcfg.dt)
    return Evaluation(transient, steady, traj)


def probe_report(op, name: str, pairs: int, scale: float, seed: int) -> CertReport:
    rng = np.random.default_rng(seed)
    etas = rng.normal(0.0, scale, (pairs, op.m))
    xis = rng.normal(0.0, scale, (pairs, op.m))
    rep = monotonicity_probe(op, etas, xis)
    bad = int(np.sum(rep.inner_products[rep.distances > 1e-6] <= 0))
    return CertReport(name, rep.passed, -rep.worst_ratio, pairs, 0.0, {"nonpositive_pairs": bad, "seed": seed})


def certify_suite(cfg: dict, model, ctrl: PiController, horizon_s: float | None = None) -> list:
    ev = cfg["eval"]
    checks = cfg["certify"]
    reports = []
    if "monotonicity" in checks:
        reports.append(probe_report(ctrl.p_op, "monotonicity_P", ev["probe_pairs"], 1.0, ev["seed"]))
        reports.append(probe_report(ctrl.r_op, "monotonicity_I", ev["probe_pairs"], 5.0, ev["seed"] + 1))
    if "eip" in checks:
        reports.append(eip_audit(model, ev["eip_samples"], seed=ev["seed"]))
    if "lyapunov" in checks or "tracking" in checks:
        x0, rcfg = test_batch(cfg, model, horizon_s=horizon_s)
        traj = rollout(model, ctrl, x0, rcfg)
        if "lyapunov" in checks:
            reports.append(lyapunov_decrease_check(traj.select(np.arange(min(ev["lyapunov_rollouts"], traj.batch))), ctrl))
        if "tracking" in checks:
            reports.append(tracking_check(traj, ctrl.setpoint, ev["settle_time"], ev["eps"]))
    return reports


def run_training(cfg: dict, seed: int | None = None, on_checkpoint=None):
    """Build plant and controller from ``cfg`` and train; returns (model, TrainResult)."""
    model = C.build_plant(cfg)
    ctrl = C.build_initial_controller(cfg, model, seed)
    result = train(model, ctrl, C.train_config(cfg, model, seed), C.loss_spec(cfg, model), on_checkpoint)
    return model, result
