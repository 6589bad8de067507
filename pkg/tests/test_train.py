import math

import numpy as np
import pytest

from neuralpi.monotone import CommPartition, MonotoneOperator, PiController, pi_control
from neuralpi.plants import generate_params
from neuralpi.scnn import QuadraticConvex
from neuralpi.train import (
    Adam,
    LossSpec,
    TrainConfig,
    TrainingAborted,
    adam_step,
    build_baseline,
    build_controller,
    loss_and_gradient,
    loss_seeds,
    loss_terms,
    moving_average_trend,
    sample_batch,
    train,
)


def perturbed(ctrl, rng, scale=0.2):
    d = {k: np.asarray(v, float) + scale * rng.standard_normal(np.shape(v)) for k, v in ctrl.to_dict().items()}
    return ctrl.replace(d)


def fd_param(spec, model, ctrl, x0, dt, key, idx, dist=(), h=1e-6):
    d = ctrl.to_dict()
    v = np.asarray(d[key], float)
    vp, vm = v.copy(), v.copy()
    vp[idx] += h
    vm[idx] -= h
    lp = loss_and_gradient(spec, model, ctrl.replace({**d, key: vp}), x0, dt, dist).loss
    lm = loss_and_gradient(spec, model, ctrl.replace({**d, key: vm}), x0, dt, dist).loss
    return (lp - lm) / (2 * h)


# -- losses ---------------------------------------------------------------------


def test_loss_terms_by_hand():
    spec = LossSpec("custom", 2, l1=1.0, control=0.5, nadir=2.0)
    y = np.array([[[1.0, 3.0]], [[2.5, 2.0]]])
    u = np.array([[[1.0, 0.0]], [[0.0, 2.0]]])
    # |dev| = [[1,1],[0.5,0]]; u^2 sum = 5; nadir = 1 + 1
    assert loss_terms(spec, y, u, np.array([2.0, 2.0]))[0] == pytest.approx(2.5 + 2.5 + 4.0)


def test_nadir_subgradient_first_maximizer():
    spec = LossSpec("custom", 3, l1=0.0, nadir=1.0)
    y = np.array([[[1.0]], [[3.0]], [[-1.0]]])
    gy, _ = loss_seeds(spec, y, np.zeros_like(y), np.array([1.0]))
    # |dev| ties at k=1 and k=2; only the first receives the subgradient
    assert gy[:, 0, 0].tolist() == [0.0, 1.0, 0.0]


def test_loss_spec_validation():
    with pytest.raises(ValueError):
        LossSpec("custom", 0)
    with pytest.raises(ValueError):
        LossSpec("custom", 5, l1=-1.0)
    with pytest.raises(ValueError):
        LossSpec("other", 5)


def test_power_loss_weights():
    spec = LossSpec.power(10)
    assert (spec.l1, spec.control, spec.nadir) == (0.05, 0.005, 1.0)


# -- BPTT -----------------------------------------------------------------------


def test_zero_weight_loss_zero_gradient():
    model = generate_params("platoon", 3, seed=0)
    ctrl = build_controller("neural_pi", 3, 5.0, rng=np.random.default_rng(0))
    x0, _ = sample_batch(model, TrainConfig(), np.random.default_rng(0), 4)
    res = loss_and_gradient(LossSpec("custom", 10, l1=0.0), model, ctrl, x0, 0.02)
    assert res.loss == 0.0
    assert all(not np.any(g) for g in res.grads.values())


def test_one_step_quadratic_closed_form():
    model = generate_params("platoon", 2, seed=1)
    rng = np.random.default_rng(1)
    lp, li = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    part = CommPartition.full(2)
    ybar = np.array([5.0, 5.0])
    ctrl = PiController(MonotoneOperator(part, (QuadraticConvex(lp),)), MonotoneOperator(part, (QuadraticConvex(li),)), ybar, "linear_pi")
    kp, ki = lp @ lp.T, li @ li.T
    dt = 0.1
    x0 = np.array([0.2, -0.2, 5.3, 5.8])
    spec = LossSpec("custom", 1, l1=0.0, control=1.0)
    res = loss_and_gradient(spec, model, ctrl, x0[None], dt)

    # hand expansion of one Euler step and the recorded control u1
    zeta, y0 = x0[:2], x0[2:]
    e0 = ybar - y0
    kr = model.kappa * model.rho
    ydot = model.kappa * (model.lambda0 - y0) + kr * (kp @ e0 - model.laplacian @ zeta)
    e1 = ybar - (y0 + dt * ydot)
    u1 = kp @ e1 + ki @ (dt * e0)
    assert res.loss == pytest.approx(float(u1 @ u1), rel=1e-13)
    g_kp = 2 * np.outer(u1, e1) - 2 * dt * np.outer(kr * (kp @ u1), e0)
    g_ki = 2 * dt * np.outer(u1, e0)
    assert np.allclose(res.grads["P.0.L"], (g_kp + g_kp.T) @ lp, rtol=1e-12, atol=1e-14)
    assert np.allclose(res.grads["I.0.L"], (g_ki + g_ki.T) @ li, rtol=1e-12, atol=1e-14)


def test_bptt_matches_fd_platoon():
    model = generate_params("platoon", 3, seed=2)
    rng = np.random.default_rng(2)
    ctrl = perturbed(build_controller("neural_pi", 3, 5.0, partition=CommPartition.half(3), rng=rng, widths=(6, 6)), rng)
    x0, _ = sample_batch(model, TrainConfig(), rng, 3)
    spec = LossSpec.platoon(model, 25)
    res = loss_and_gradient(spec, model, ctrl, x0, 0.02)
    keys = sorted(res.grads)
    worst = 0.0
    for _ in range(20):
        key = keys[rng.integers(len(keys))]
        shape = np.shape(res.grads[key])
        idx = tuple(int(rng.integers(s)) for s in shape)
        fd = fd_param(spec, model, ctrl, x0, 0.02, key, idx)
        an = float(np.asarray(res.grads[key])[idx])
        worst = max(worst, abs(an - fd) / max(abs(fd), 1e-6))
    assert worst < 1e-4


def test_bptt_matches_fd_power_with_disturbance():
    model = generate_params("power", 3, seed=3)
    ctrl = build_controller("linear_pi", 3, model.nominal, gain=2.0)
    rng = np.random.default_rng(3)
    ctrl = perturbed(ctrl, rng, 0.3)
    x0, dist = sample_batch(model, TrainConfig(dt=0.01, disturbance_time=0.05), rng, 4, ctrl.setpoint)
    spec = LossSpec.power(40)
    res = loss_and_gradient(spec, model, ctrl, x0, 0.01, dist)
    for key in ("P.0.L", "I.0.L"):
        for idx in [(0, 0), (1, 2), (2, 1)]:
            fd = fd_param(spec, model, ctrl, x0, 0.01, key, idx, dist, h=1e-5)
            assert res.grads[key][idx] == pytest.approx(fd, rel=1e-4, abs=1e-7)


def test_divergent_rollouts_are_dropped():
    model = generate_params("platoon", 3, seed=0)
    ctrl = build_controller("linear_pi", 3, 5.0, gain=1.0)
    x0, _ = sample_batch(model, TrainConfig(), np.random.default_rng(0), 3)
    x0[1, 3:] = 1e200
    res = loss_and_gradient(LossSpec.platoon(model, 10), model, ctrl, x0, 0.02)
    assert res.dropped == 1 and math.isfinite(res.loss)
    assert not np.isfinite(res.per_rollout[1])
    assert all(np.all(np.isfinite(g)) for g in res.grads.values())


# -- Adam -------------------------------------------------------------------------


def test_adam_schedule():
    opt = Adam(lr0=0.05, decay_base=0.7, decay_period=50)
    assert opt.lr(100) == pytest.approx(0.05 * 0.49, rel=1e-15)
    assert opt.lr(49) == 0.05 and opt.lr(50) == pytest.approx(0.035)


def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    assert np.array_equal(Adam().step(p, {"w": np.zeros(2)})["w"], p["w"])
    opt = Adam()
    opt.step(p, {"w": np.array([1.0, 1.0])})
    m_before, v_before = opt.m["w"].copy(), opt.v["w"].copy()
    opt.step(p, {"w": np.zeros(2)})
    assert np.allclose(opt.m["w"], 0.9 * m_before) and np.allclose(opt.v["w"], 0.999 * v_before)


def test_adam_one_step_hand_computed():
    # f(w) = w^2 / 2 at w = 1: g = 1, m = 0.1, v = 0.001, m_hat = v_hat = 1
    new, state = adam_step(Adam(lr0=0.05), {"w": np.array(1.0)}, {"w": np.array(1.0)})
    assert float(new["w"]) == pytest.approx(1.0 - 0.05 / (1.0 + 1e-8), rel=1e-15)
    assert state.step_index == 1


def test_adam_first_step_scale_equivariant():
    g = np.array([0.3, -2.0, 1e-3])
    a = Adam().step({"w": np.zeros(3)}, {"w": g})["w"]
    b = Adam().step({"w": np.zeros(3)}, {"w": 17.0 * g})["w"]
    assert np.array_equal(np.sign(a), np.sign(b))
    # identical up to the eps term in the denominator
    assert np.allclose(a, b, rtol=1e-4)


# -- baselines ----------------------------------------------------------------------


def test_linear_pi_identity_is_textbook():
    ctrl = build_baseline("linear_pi", 1, 3.0, gain=1.0)
    assert ctrl.is_structured
    assert pi_control(ctrl, np.array([1.0]), np.array([0.5]))[0] == pytest.approx(2.5, abs=1e-6)


def test_unconstrained_linear_pi():
    ctrl = build_controller("linear_pi", 2, 0.0, unconstrained=True)
    d = ctrl.to_dict()
    d["P.0.L"] = np.array([[1.0, 2.0], [0.0, 1.0]])
    ctrl = ctrl.replace(d)
    assert np.allclose(pi_control(ctrl, np.array([-1.0, 0.0]), np.zeros(2)) - pi_control(ctrl, np.zeros(2), np.zeros(2)), [1.0, 0.0])


def test_dense_jacobian_not_symmetric():
    ctrl = build_baseline("dense_nn_pi", 3, 0.0, rng=np.random.default_rng(0))
    assert not ctrl.is_structured
    z = np.array([0.3, -0.2, 0.5])
    h = 1e-6
    jac = np.zeros((3, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        jac[:, j] = (ctrl.p_op(z + e) - ctrl.p_op(z - e)) / (2 * h)
    assert np.max(np.abs(jac - jac.T)) > 1e-3


def test_unknown_kind():
    with pytest.raises(ValueError):
        build_controller("pid", 2, 0.0)
    with pytest.raises(ValueError):
        build_baseline("neural_pi", 2, 0.0)


# -- training loop ------------------------------------------------------------------


def test_desk_platoon_training_reduces_loss():
    model = generate_params("platoon", 5, seed=0)
    ctrl = build_controller("neural_pi", 5, 5.0, rng=np.random.default_rng([0, 1]))
    res = train(model, ctrl, TrainConfig(epochs=50, batch_size=32, horizon=100, seed=0))
    first, last = res.history[0][1], res.history[-1][1]
    assert last < 0.7 * first
    assert len(res.history) == 50
    assert isinstance(moving_average_trend(res.history), bool)


def test_training_is_deterministic():
    model = generate_params("platoon", 3, seed=0)
    cfg = TrainConfig(epochs=4, batch_size=8, horizon=20, seed=5, checkpoint_every=2)
    runs = [train(model, build_controller("neural_pi", 3, 5.0, rng=np.random.default_rng(1), widths=(8, 8)), cfg) for _ in range(2)]
    assert runs[0].history == runs[1].history
    assert [e for e, _ in runs[0].checkpoints] == [2, 4]
    for k, v in runs[0].controller.to_dict().items():
        assert np.array_equal(v, runs[1].controller.to_dict()[k])


def test_persistent_nonfinite_batches_abort():
    model = generate_params("platoon", 3, seed=0)
    ctrl = build_controller("linear_pi", 3, 5.0, gain=1e4)
    with pytest.raises(TrainingAborted, match="consecutive"):
        train(model, ctrl, TrainConfig(epochs=10, batch_size=4, horizon=200, dt=0.1, abort_after=3))


def test_power_batch_sampling():
    model = generate_params("power", 6, seed=0)
    x0, (dist,) = sample_batch(model, TrainConfig(), np.random.default_rng(0), 50)
    assert np.all(x0[:, :6] == 0) and np.all(x0[:, 6:] == model.nominal)
    nz = np.count_nonzero(dist.delta, axis=1)
    assert nz.min() >= 1 and nz.max() <= 3
    assert np.all(np.abs(dist.delta) <= 1.0) and dist.time == 0.5


def test_platoon_batch_sampling():
    model = generate_params("platoon", 4, seed=0)
    x0, dist = sample_batch(model, TrainConfig(), np.random.default_rng(0), 50)
    assert dist == ()
    assert np.allclose(x0[:, :4].sum(axis=1), 0.0, atol=1e-12)
    assert np.all((x0[:, 4:] >= 5) & (x0[:, 4:] <= 6))
