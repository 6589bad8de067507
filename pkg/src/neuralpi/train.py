"""Transient-cost losses, backpropagation through unrolled Euler rollouts,
Adam with step-decay learning rate, training loop and baseline controllers."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dense import init_dense
from .monotone import CommPartition, MonotoneOperator, PiController, pi_control
from .plants import PlatoonModel, PowerModel
from .scnn import init_quadratic, init_scnn
from .sim import Disturbance, RolloutConfig, apply_disturbance

log = logging.getLogger(__name__)


# -- losses -------------------------------------------------------------------


@dataclass(frozen=True)
class LossSpec:
    """Weighted transient cost summed over steps k = 1..K.

    ``l1`` weights |y - ybar|, ``control`` weights u^2 (scalar or per node),
    ``nadir`` weights max_k |y_i - ybar_i| summed over nodes.
    """

    kind: str
    horizon: int
    l1: object = 1.0
    control: object = 0.0
    nadir: float = 0.0

    def __post_init__(self):
        if self.kind not in ("platoon", "power", "custom"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        for w in (self.l1, self.control, self.nadir):
            if np.any(np.asarray(w) < 0):
                raise ValueError("loss weights must be nonnegative")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @classmethod
    def platoon(cls, model: PlatoonModel, horizon: int) -> "LossSpec":
        return cls("platoon", horizon, 1.0, np.asarray(model.cost_weights, dtype=float), 0.0)

    @classmethod
    def power(cls, horizon: int) -> "LossSpec":
        return cls("power", horizon, 0.05, 0.005, 1.0)

    @classmethod
    def for_model(cls, model, horizon: int) -> "LossSpec":
        return cls.platoon(model, horizon) if isinstance(model, PlatoonModel) else cls.power(horizon)


def loss_terms(spec: LossSpec, y, u, ybar):
    """Per-rollout loss for ``y, u`` of shape ``(K, B, m)`` (steps 1..K)."""
    err = np.abs(y - ybar)
    total = np.sum(np.asarray(spec.l1) * err, axis=(0, 2))
    total = total + np.sum(np.asarray(spec.control) * u * u, axis=(0, 2))
    if spec.nadir:
        total = total + spec.nadir * np.sum(np.max(err, axis=0), axis=-1)
    return np.where(np.isfinite(total), total, np.inf)


def loss_seeds(spec: LossSpec, y, u, ybar):
    """(dL/dy, dL/du) per rollout; the nadir uses the first maximizing step."""
    dev = y - ybar
    gy = np.asarray(spec.l1) * np.sign(dev)
    gu = 2.0 * np.asarray(spec.control) * u
    gy = np.broadcast_to(gy, y.shape).copy()
    if spec.nadir:
        k_star = np.argmax(np.abs(dev), axis=0)
        b_idx, i_idx = np.indices(k_star.shape)
        gy[k_star, b_idx, i_idx] += spec.nadir * np.sign(dev[k_star, b_idx, i_idx])
    return gy, np.broadcast_to(gu, u.shape).copy()


def loss_eval(spec: LossSpec, traj, ybar=None, per_rollout: bool = False):
    """Transient cost of a recorded trajectory (records 1..K); +inf if non-finite."""
    ybar = traj.setpoint if ybar is None else np.asarray(ybar, dtype=float)
    per = loss_terms(spec, traj.y[1:], traj.u[1:], ybar)
    per = np.where(traj.finite, per, np.inf)
    if per_rollout:
        return per
    return float(np.mean(per))


def steady_state_cost(spec: LossSpec, traj, time: float = 15.0, ybar=None):
    """Snapshot cost at ``time`` seconds, per rollout."""
    ybar = traj.setpoint if ybar is None else np.asarray(ybar, dtype=float)
    r = int(round(time / (traj.dt * traj.stride)))
    y, u = traj.y[r], traj.u[r]
    cost = np.sum(np.asarray(spec.l1) * np.abs(y - ybar), axis=-1) + np.sum(np.asarray(spec.control) * u * u, axis=-1)
    return np.where(np.isfinite(cost), cost, np.inf)


# -- backpropagation through the rollout ------------------------------------


@dataclass
class GradientResult:
    loss: float
    grads: dict
    dropped: int
    per_rollout: np.ndarray


def _segment_models(model, disturbances, dt, steps):
    """Model active at each step 0..steps-1 as a list of (start, model)."""
    cfg = RolloutConfig(dt, steps, disturbances=tuple(disturbances))
    segs = [(0, model)]
    cur = model
    for d in sorted(disturbances, key=lambda d: d.time):
        cur = apply_disturbance(cur, d)
        segs.append((cfg.disturbance_step(d), cur))
    return segs


def _slice_model(model, keep):
    load = getattr(model, "load", None)
    if load is not None and np.ndim(load) == 2:
        return replace(model, load=load[keep])
    return model


def loss_and_gradient(spec: LossSpec, model, controller: PiController, x0, dt: float, disturbances=(), s0=None) -> GradientResult:
    """Batch-mean loss and its exact gradient through every Euler step.

    Rollouts that become non-finite are dropped from the mean.
    """
    K = spec.horizon
    x = np.array(x0, dtype=float, ndmin=2)
    batch, m = x.shape[0], model.m
    s = np.zeros((batch, m)) if s0 is None else np.array(np.broadcast_to(s0, (batch, m)), dtype=float)
    ybar = controller.setpoint
    segs = _segment_models(model, disturbances, dt, K)

    def model_at(k, segs=segs):
        cur = segs[0][1]
        for start, mdl in segs:
            if start <= k:
                cur = mdl
        return cur

    xs = np.empty((K + 1, batch, model.n))
    ss = np.empty((K + 1, batch, m))
    us = np.empty((K + 1, batch, m))
    with np.errstate(all="ignore"):
        for k in range(K + 1):
            y = model.output(x)
            u = pi_control(controller, y, s)
            xs[k], ss[k], us[k] = x, s, u
            if k == K:
                break
            x, s = x + dt * model_at(k).derivative(x, u), s + dt * (ybar - y)
        per = loss_terms(spec, xs[1:, :, m:], us[1:], ybar)
    finite = np.isfinite(per) & np.all(np.isfinite(xs), axis=(0, 2)) & np.all(np.isfinite(us), axis=(0, 2))
    keep = np.nonzero(finite)[0]
    dropped = batch - keep.size
    grads = {k: np.zeros_like(np.asarray(v, dtype=float)) for k, v in controller.to_dict().items()}
    if keep.size == 0:
        return GradientResult(math.inf, grads, dropped, per)
    if dropped:
        log.warning("dropping %d non-finite rollouts from the batch gradient", dropped)
    xs, ss, us = xs[:, keep], ss[:, keep], us[:, keep]
    segs = [(k0, _slice_model(mdl, keep)) for k0, mdl in segs]
    ys = xs[..., m:]
    gy, gu = loss_seeds(spec, ys[1:], us[1:], ybar)

    x_bar = np.zeros_like(xs[0])
    s_bar = np.zeros_like(ss[0])
    for k in range(K, -1, -1):
        u_bar = gu[k - 1].copy() if k >= 1 else np.zeros_like(us[0])
        y_bar = gy[k - 1].copy() if k >= 1 else np.zeros_like(us[0])
        if k < K:
            fx_bar, fu_bar = model_at(k, segs).vjp(xs[k], us[k], x_bar)
            x_new = x_bar + dt * fx_bar
            u_bar += dt * fu_bar
            y_bar -= dt * s_bar
        else:
            x_new = x_bar
        cy, cs, cg = controller.vjp(ys[k], ss[k], u_bar)
        for name, g in cg.items():
            grads[name] += g
        x_bar = x_new
        x_bar[:, m:] += y_bar + cy
        s_bar = s_bar + cs
    n = keep.size
    grads = {k: v / n for k, v in grads.items()}
    return GradientResult(float(np.mean(per[keep])), grads, dropped, per)


def loss_gradient(spec, model, controller, x0, dt, disturbances=(), s0=None) -> dict:
    return loss_and_gradient(spec, model, controller, x0, dt, disturbances, s0).grads


# -- Adam ---------------------------------------------------------------------


@dataclass
class Adam:
    """Adam with learning rate lr0 * base ** (step // period)."""

    lr0: float = 0.05
    decay_base: float = 0.7
    decay_period: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_index: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr(self, step: int | None = None) -> float:
        step = self.step_index if step is None else step
        return self.lr0 * self.decay_base ** (step // self.decay_period)

    def step(self, params: dict, grads: dict) -> dict:
        lr = self.lr()
        self.step_index += 1
        t = self.step_index
        out = {}
        for k, p in params.items():
            g = np.asarray(grads[k], dtype=float)
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            out[k] = np.asarray(p, dtype=float) - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


def adam_step(state: Adam, params: dict, grads: dict):
    new = state.step(params, grads)
    return new, state


# -- controllers --------------------------------------------------------------


def build_controller(
    kind: str,
    m: int,
    setpoint,
    partition: CommPartition | None = None,
    rng: np.random.Generator | None = None,
    widths=(20, 20),
    quad: float | None = 1.0,
    input_scale: float = 1.0,
    gain: float = 1.0,
    unconstrained: bool = False,
) -> PiController:
    """Neural-PI (``neural_pi``), Linear-PI (``linear_pi``) or DenseNN-PI
    (``dense_nn_pi``) controller with one handle per communication group."""
    rng = np.random.default_rng(0) if rng is None else rng
    partition = CommPartition.full(m) if partition is None else partition
    setpoint = np.broadcast_to(np.asarray(setpoint, dtype=float), (m,)).copy()

    def handle(d):
        if kind == "neural_pi":
            return init_scnn(d, tuple(widths) + (1,), rng, input_scale=input_scale, quad=quad)
        if kind == "linear_pi":
            return init_quadratic(d, gain, unconstrained=unconstrained)
        if kind == "dense_nn_pi":
            return init_dense(d, tuple(widths), rng, scale=input_scale)
        raise ValueError(f"unknown controller kind {kind!r}")

    ops = []
    for _ in range(2):
        ops.append(MonotoneOperator(partition, tuple(handle(len(g)) for g in partition.groups)))
    return PiController(ops[0], ops[1], setpoint, kind)


def build_baseline(kind: str, m: int, setpoint, rng=None, **kwargs) -> PiController:
    if kind not in ("linear_pi", "dense_nn_pi"):
        raise ValueError("baseline kind must be linear_pi or dense_nn_pi")
    return build_controller(kind, m, setpoint, rng=rng, **kwargs)


# -- sampling and the training loop ----------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr0: float = 0.05
    decay_base: float = 0.7
    decay_period: int = 50
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dt: float = 0.02
    horizon: int = 100
    init_low: float = 5.0
    init_high: float = 6.0
    position_spread: float = 0.5
    disturbance_time: float = 0.5
    disturbance_nodes: int = 3
    disturbance_scale: float = 1.0
    checkpoint_every: int = 0
    abort_after: int = 5

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be >= 1")
        if not self.lr0 > 0:
            raise ValueError("learning rate must be positive")


def sample_batch(model, cfg: TrainConfig, rng: np.random.Generator, batch: int, setpoint=None):
    """Initial states and disturbances for one batch of rollouts."""
    m = model.m
    if isinstance(model, PlatoonModel):
        zeta = rng.uniform(-cfg.position_spread, cfg.position_spread, (batch, m)) @ model.gamma
        y = rng.uniform(cfg.init_low, cfg.init_high, (batch, m))
        return np.concatenate([zeta, y], axis=-1), ()
    nominal = model.nominal if setpoint is None else float(np.mean(setpoint))
    x0 = np.concatenate([np.zeros((batch, m)), np.full((batch, m), nominal)], axis=-1)
    delta = np.zeros((batch, m))
    for b in range(batch):
        count = rng.integers(1, min(cfg.disturbance_nodes, m) + 1)
        idx = rng.choice(m, size=count, replace=False)
        delta[b, idx] = rng.uniform(-cfg.disturbance_scale, cfg.disturbance_scale, count)
    return x0, (Disturbance(cfg.disturbance_time, "load", delta),)


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainResult:
    controller: PiController
    history: list
    checkpoints: list


def train(model, controller: PiController, cfg: TrainConfig, spec: LossSpec | None = None, on_checkpoint=None) -> TrainResult:
    """Adam on the batch-mean transient cost; one fresh batch per epoch.

    ``history`` rows are ``(epoch, mean_loss, dropped_rollouts)`` where the
    loss is measured before that epoch's update.
    """
    spec = LossSpec.for_model(model, cfg.horizon) if spec is None else spec
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.lr0, cfg.decay_base, cfg.decay_period, cfg.beta1, cfg.beta2, cfg.adam_eps)
    params = controller.to_dict()
    history, checkpoints = [], []
    bad_streak = 0
    for epoch in range(1, cfg.epochs + 1):
        x0, dist = sample_batch(model, cfg, rng, cfg.batch_size, controller.setpoint)
        res = loss_and_gradient(spec, model, controller, x0, cfg.dt, dist)
        history.append((epoch, res.loss, res.dropped))
        if not math.isfinite(res.loss):
            bad_streak += 1
            if bad_streak >= cfg.abort_after:
                raise TrainingAborted(
                    f"{bad_streak} consecutive batches with no finite rollout (epoch {epoch}, "
                    f"controller {controller.kind})"
                )
            continue
        bad_streak = 0
        params = opt.step(params, res.grads)
        controller = controller.replace(params)
        log.info("epoch %d loss %.6g dropped %d", epoch, res.loss, res.dropped)
        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            checkpoints.append((epoch, controller))
            if on_checkpoint is not None:
                on_checkpoint(epoch, controller)
    return TrainResult(controller, history, checkpoints)


def moving_average_trend(history, window: int = 20, tol: float = 0.05) -> bool:
    """True when the windowed mean loss never rises by more than ``tol``."""
    losses = np.array([h[1] for h in history if math.isfinite(h[1])])
    if losses.size < window + 1:
        return True
    ma = np.convolve(losses, np.ones(window) / window, mode="valid")
    return bool(np.all(ma[1:] <= ma[:-1] * (1 + tol)))
