import warnings

import numpy as np
import pytest

from neuralpi.monotone import (
    CommPartition,
    MonotoneOperator,
    PiController,
    integral_step,
    monotonicity_probe,
    operator_eval,
    pi_control,
)
from neuralpi.scnn import ShapeError, init_quadratic, init_scnn, quadratic_convex, scnn_input_gradient


def scnn_operator(partition, seed=0, quad=None):
    rng = np.random.default_rng(seed)
    return MonotoneOperator(partition, tuple(init_scnn(len(g), (8, 8, 1), rng, quad=quad) for g in partition.groups))


def fd_jacobian(op, z, h=1e-6):
    m = z.size
    jac = np.zeros((m, m))
    for j in range(m):
        e = np.zeros(m)
        e[j] = h
        jac[:, j] = (op(z + e) - op(z - e)) / (2 * h)
    return jac


def test_partition_normalizes_groups():
    p = CommPartition(((2, 1, 1), (3,), (0,)), 4)
    assert p.groups == ((1, 2), (3,), (0,))


def test_partition_warns_on_uncovered_index():
    with pytest.warns(UserWarning, match="belong to no group"):
        CommPartition(((0, 1),), 3)


def test_partition_rejects_out_of_range():
    with pytest.raises(ValueError):
        CommPartition(((0, 5),), 3)


def test_half_partition():
    assert CommPartition.half(5).groups == ((0, 1), (2,), (3,), (4,))


def test_full_partition_is_single_gradient():
    op = scnn_operator(CommPartition.full(3))
    z = np.array([0.3, -1.2, 0.5])
    assert np.array_equal(op(z), scnn_input_gradient(op.handles[0], z))


def test_decentralized_identical_scalar_networks():
    net = init_scnn(1, (8, 8, 1), np.random.default_rng(0))
    part = CommPartition.decentralized(4)
    op = MonotoneOperator(part, (net,) * 4)
    z = np.array([-1.0, 0.0, 0.5, 2.0])
    expected = [scnn_input_gradient(net, z[i:i + 1])[0] for i in range(4)]
    assert np.allclose(op(z), expected, rtol=1e-14, atol=0)


def test_partial_partition_sparsity():
    part = CommPartition(((0, 1), (1, 2, 3)), 4)
    op = scnn_operator(part, seed=3)
    jac = fd_jacobian(op, np.random.default_rng(3).normal(size=4))
    zero = np.abs(jac) < 1e-9
    expected = ~part.coupled()
    assert np.array_equal(zero, expected)
    # (1,3),(1,4),(3,1),(4,1) in one-based indexing
    assert set(zip(*np.nonzero(expected))) == {(0, 2), (0, 3), (2, 0), (3, 0)}


def test_overlapping_groups_sum():
    part = CommPartition(((0, 1), (1, 2)), 3)
    op = scnn_operator(part, seed=4)
    z = np.array([0.1, 0.2, 0.3])
    g0 = scnn_input_gradient(op.handles[0], z[[0, 1]])
    g1 = scnn_input_gradient(op.handles[1], z[[1, 2]])
    assert np.allclose(op(z), [g0[0], g0[1] + g1[0], g1[1]], rtol=1e-14)


def test_uncovered_coordinates_are_zero():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        part = CommPartition(((0, 1),), 3)
    op = scnn_operator(part)
    assert operator_eval(op, np.ones(3))[2] == 0.0


def test_operator_shape_error():
    with pytest.raises(ShapeError):
        operator_eval(scnn_operator(CommPartition.full(3)), np.zeros(2))


def test_stacked_and_looped_evaluation_agree():
    # mixed buckets: one 2-group plus three scalar groups of equal shape
    part = CommPartition.half(5)
    op = scnn_operator(part, seed=5, quad=0.5)
    assert {e[0] for e in op._plan} == {"one", "stack"}
    rng = np.random.default_rng(5)
    z, w = rng.normal(size=(7, 5)), rng.normal(size=(7, 5))
    looped = np.zeros_like(z)
    for g, h in zip(part.groups, op.handles):
        looped[:, list(g)] += h.grad(z[:, list(g)])
    assert np.allclose(op(z), looped, rtol=1e-13, atol=1e-15)
    z_bar, grads = op.vjp(z, w)
    for j, (g, h) in enumerate(zip(part.groups, op.handles)):
        _, gj = h.vjp(z[:, list(g)], w[:, list(g)])
        for k, v in gj.items():
            assert np.allclose(grads[f"{j}.{k}"], v, rtol=1e-12, atol=1e-14)


def test_jacobian_symmetric_for_gradient_maps():
    op = scnn_operator(CommPartition(((0, 1), (1, 2, 3)), 4), seed=6)
    jac = op.jacobian(np.random.default_rng(6).normal(size=4))
    assert np.allclose(jac, jac.T, atol=1e-12)
    assert np.allclose(jac, fd_jacobian(op, np.random.default_rng(6).normal(size=4)), atol=1e-7)


# -- monotonicity probe -------------------------------------------------------------


def test_probe_identical_points():
    op = scnn_operator(CommPartition.full(2))
    z = np.ones((3, 2))
    rep = monotonicity_probe(op, z, z)
    assert np.all(rep.inner_products == 0) and rep.passed


def test_probe_identity_quadratic():
    op = MonotoneOperator(CommPartition.full(3), (quadratic_convex(np.eye(3)),))
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
    rep = monotonicity_probe(op, a, b)
    assert np.allclose(rep.inner_products, np.sum((a - b) ** 2, axis=1), rtol=1e-13)


@pytest.mark.parametrize("name", ["full", "half", "decentralized"])
def test_probe_random_scnn_operator(name):
    op = scnn_operator(getattr(CommPartition, name)(6), seed=7)
    rng = np.random.default_rng(7)
    rep = monotonicity_probe(op, rng.normal(size=(1000, 6)) * 2, rng.normal(size=(1000, 6)) * 2)
    assert rep.passed and np.all(rep.inner_products > 0)


# -- PI law ---------------------------------------------------------------------------


def linear_pi(kp, ki, ybar):
    part = CommPartition.full(len(ybar))
    return PiController(
        MonotoneOperator(part, (quadratic_convex(kp),)), MonotoneOperator(part, (quadratic_convex(ki),)), np.asarray(ybar, float), "linear_pi"
    )


def test_linear_pi_law():
    kp = np.array([[2.0, 0.5], [0.5, 1.0]])
    ki = np.diag([0.3, 0.7])
    ctrl = linear_pi(kp, ki, [1.0, 2.0])
    y, s = np.array([0.5, 2.5]), np.array([1.0, -1.0])
    assert np.allclose(pi_control(ctrl, y, s), kp @ (ctrl.setpoint - y) + ki @ s, rtol=1e-15, atol=1e-15)


def test_textbook_scalar_pi():
    ctrl = linear_pi(np.eye(1), np.eye(1), [3.0])
    assert pi_control(ctrl, np.array([1.0]), np.array([0.5]))[0] == pytest.approx(2.5, abs=1e-6)


def test_at_setpoint_quadratic_zero():
    ctrl = linear_pi(np.eye(2), np.eye(2), [1.0, 1.0])
    assert np.allclose(pi_control(ctrl, ctrl.setpoint, np.zeros(2)), 0.0, atol=1e-12)


def test_at_setpoint_scnn_origin_gradients():
    part = CommPartition.full(3)
    p_op, r_op = scnn_operator(part, 1), scnn_operator(part, 2)
    ctrl = PiController(p_op, r_op, np.full(3, 5.0))
    expected = scnn_input_gradient(p_op.handles[0], np.zeros(3)) + scnn_input_gradient(r_op.handles[0], np.zeros(3))
    assert np.array_equal(pi_control(ctrl, ctrl.setpoint, np.zeros(3)), expected)


def test_pi_control_repeatable():
    part = CommPartition.full(3)
    ctrl = PiController(scnn_operator(part, 1), scnn_operator(part, 2), np.ones(3))
    y, s = np.array([0.1, 0.2, 0.3]), np.array([1.0, 0.0, -1.0])
    assert np.array_equal(pi_control(ctrl, y, s), pi_control(ctrl, y, s))


def test_controller_dimension_check():
    with pytest.raises(ShapeError):
        PiController(scnn_operator(CommPartition.full(2)), scnn_operator(CommPartition.full(2)), np.ones(3))


def test_controller_vjp_matches_fd():
    part = CommPartition.half(4)
    ctrl = PiController(scnn_operator(part, 1, 0.5), scnn_operator(part, 2, 0.5), np.ones(4))
    rng = np.random.default_rng(0)
    y, s, c = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    y_bar, s_bar, grads = ctrl.vjp(y, s, c)
    f = lambda yy, ss: np.sum(c * pi_control(ctrl, yy, ss))  # noqa: E731
    h = 1e-6
    for arr, bar, which in ((y, y_bar, 0), (s, s_bar, 1)):
        for idx in [(0, 0), (1, 2), (2, 3)]:
            e = np.zeros_like(arr)
            e[idx] = h
            args_p = (y + e, s) if which == 0 else (y, s + e)
            args_m = (y - e, s) if which == 0 else (y, s - e)
            assert bar[idx] == pytest.approx((f(*args_p) - f(*args_m)) / (2 * h), rel=1e-6, abs=1e-9)
    d = ctrl.to_dict()
    for key in ("P.0.Wz0", "I.2.log_quad", "P.1.log_beta"):
        v = np.asarray(d[key], float)
        idx = (0,) * v.ndim
        vp, vm = v.copy(), v.copy()
        vp[idx] += h
        vm[idx] -= h
        fd = (np.sum(c * pi_control(ctrl.replace({**d, key: vp}), y, s)) - np.sum(c * pi_control(ctrl.replace({**d, key: vm}), y, s))) / (2 * h)
        assert np.asarray(grads[key])[idx] == pytest.approx(fd, rel=1e-5)


# -- integral state --------------------------------------------------------------------


def test_integral_step_at_setpoint():
    ctrl = linear_pi(np.eye(2), np.eye(2), [1.0, 1.0])
    s = np.array([0.3, 0.4])
    assert np.array_equal(integral_step(ctrl, s, ctrl.setpoint, 0.02), s)


def test_integral_single_step():
    ctrl = linear_pi(np.eye(2), np.eye(2), [1.0, 1.0])
    s = integral_step(ctrl, np.zeros(2), np.array([0.0, 1.0]), 0.02)
    assert np.allclose(s, [0.02, 0.0], rtol=0, atol=1e-17)


def test_integral_constant_error_accumulates():
    ctrl = linear_pi(np.eye(2), np.eye(2), [1.0, 1.0])
    y = np.array([0.5, 2.0])
    s = np.zeros(2)
    for _ in range(50):
        s = integral_step(ctrl, s, y, 0.01)
    assert np.allclose(s, 50 * 0.01 * (ctrl.setpoint - y), rtol=1e-12)


def test_integral_step_rejects_bad_dt():
    ctrl = linear_pi(np.eye(1), np.eye(1), [0.0])
    with pytest.raises(ValueError):
        integral_step(ctrl, np.zeros(1), np.zeros(1), 0.0)


def test_init_quadratic_is_pd():
    q = init_quadratic(3, 2.0)
    assert np.min(np.linalg.eigvalsh(q.matrix)) > 0
