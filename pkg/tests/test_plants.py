import math

import numpy as np
import pytest

from neuralpi.plants import (
    DomainError,
    PlatoonModel,
    PowerModel,
    averaging_projector,
    chain_edges,
    eip_residual,
    generate_params,
    incidence_from_edges,
    load_model,
    platoon_derivative,
    power_derivative,
    ring_edges,
    save_model,
    solve_equilibrium,
    storage_value,
)


@pytest.fixture
def platoon():
    return generate_params("platoon", 6, seed=1)


@pytest.fixture
def power():
    return generate_params("power", 5, seed=2)


def two_node_power(b=10.0, load=(0.0, 0.0)):
    E = incidence_from_edges([(0, 1)], 2)
    return PowerModel(np.array([0.2, 0.3]), np.array([1.0, 1.2]), np.array(load, float), E, np.array([b]))


# -- topology ------------------------------------------------------------------------


def test_gamma_properties():
    for m in (2, 5):
        E = incidence_from_edges(ring_edges(m), m)
        G = averaging_projector(m)
        assert np.allclose(G @ np.ones(m), 0.0, atol=1e-15)
        assert np.allclose(G @ E, E, atol=1e-15)


def test_incidence_kernel_is_ones():
    E = incidence_from_edges(chain_edges(5), 5)
    assert np.linalg.matrix_rank(E.T) == 4
    assert np.allclose(E.T @ np.ones(5), 0.0)


def test_disconnected_graph_rejected():
    E = incidence_from_edges([(0, 1), (2, 3)], 4)
    with pytest.raises(DomainError):
        PlatoonModel(np.ones(4), np.ones(4), np.ones(4), E, np.ones(2), np.ones(4))


def test_nonpositive_parameters_rejected():
    E = incidence_from_edges([(0, 1)], 2)
    with pytest.raises(DomainError):
        PowerModel(np.array([0.1, -0.1]), np.ones(2), np.zeros(2), E, np.ones(1))


# -- platoon ---------------------------------------------------------------------------


def test_platoon_two_vehicles_by_hand():
    E = incidence_from_edges([(0, 1)], 2)
    lam = np.array([5.2, 5.7])
    model = PlatoonModel(np.ones(2), np.array([1.5, 1.2]), lam, E, np.ones(1), np.full(2, 0.05))
    d = platoon_derivative(model, np.concatenate([np.zeros(2), lam]), np.zeros(2))
    assert np.allclose(d[:2], averaging_projector(2) @ lam, atol=1e-15)
    assert np.allclose(d[2:], 0.0, atol=1e-15)


def test_platoon_uniform_input_shift(platoon):
    rng = np.random.default_rng(0)
    x, u = rng.normal(size=12), rng.normal(size=6)
    c = 0.7
    d0 = platoon_derivative(platoon, x, u)
    d1 = platoon_derivative(platoon, x, u + c)
    assert np.allclose(d1[:6], d0[:6], atol=1e-15)
    assert np.allclose(d1[6:] - d0[6:], platoon.kappa * platoon.rho * c, atol=1e-12)


def test_platoon_equilibrium_residual(platoon):
    for u in (np.zeros(6), np.random.default_rng(1).uniform(-2, 2, 6)):
        eq = solve_equilibrium(platoon, u)
        assert eq.feasible
        assert np.linalg.norm(platoon_derivative(platoon, eq.x, u)) < 1e-10
        assert abs(np.sum(eq.x[:6])) < 1e-10


def test_platoon_storage_zero_at_equilibrium_and_quadratic(platoon):
    eq = solve_equilibrium(platoon, np.zeros(6))
    assert storage_value(platoon, eq.x, eq) == pytest.approx(0.0, abs=1e-14)
    v = np.random.default_rng(2).normal(size=6)
    closed = 0.5 * np.sum(v * v / (platoon.kappa * platoon.rho))
    for t in (0.1, 1.0, 3.0):
        x = eq.x.copy()
        x[6:] += t * v
        assert storage_value(platoon, x, eq) == pytest.approx(t * t * closed, rel=1e-12)


def test_platoon_eip_residual_closed_form(platoon):
    # the residual equals sum_i (min_j 1/rho_j - 1/rho_i) dy_i^2 exactly
    rng = np.random.default_rng(3)
    eq = solve_equilibrium(platoon, rng.uniform(-1, 1, 6))
    x = eq.x + rng.normal(size=(50, 12))
    u = rng.normal(size=(50, 6))
    dy = x[:, 6:] - eq.x[6:]
    slack = np.sum((np.min(1 / platoon.rho) - 1 / platoon.rho) * dy * dy, axis=1)
    res = eip_residual(platoon, x, u, eq)
    assert np.allclose(res, slack, rtol=1e-9, atol=1e-9)
    assert np.all(res <= 1e-9)


def test_eip_zero_at_equilibrium(platoon, power):
    for model in (platoon, power):
        eq = solve_equilibrium(model, np.zeros(model.m))
        assert abs(eip_residual(model, eq.x, eq.u, eq)) < 1e-12


# -- power -------------------------------------------------------------------------


def test_power_balanced_equilibrium(power):
    x = np.concatenate([np.zeros(5), np.full(5, 60.0)])
    assert np.allclose(power_derivative(power, x, np.zeros(5)), 0.0, atol=1e-14)
    eq = solve_equilibrium(power, np.zeros(5))
    assert eq.feasible and np.allclose(eq.x[:5], 0.0, atol=1e-14)


def test_power_single_line_torque():
    model = two_node_power(b=7.0)
    d1, d2 = 0.3, -0.1
    x = np.array([d1, d2, 60.0, 60.0])
    ydot = power_derivative(model, x, np.zeros(2))[2:] * model.inertia
    assert ydot[0] == pytest.approx(-7.0 * math.sin(d1 - d2), rel=1e-14)
    assert ydot[1] == pytest.approx(7.0 * math.sin(d1 - d2), rel=1e-14)


def test_power_step_load_shift(power):
    rng = np.random.default_rng(4)
    x = np.concatenate([rng.uniform(-0.2, 0.2, 5), 60 + rng.normal(size=5)])
    u = rng.normal(size=5)
    dd = rng.normal(size=5)
    from dataclasses import replace

    shifted = replace(power, load=power.load + dd)
    diff = power_derivative(shifted, x, u)[5:] - power_derivative(power, x, u)[5:]
    assert np.allclose(diff, -dd / power.inertia, rtol=1e-12, atol=1e-12)


def test_power_region_flag():
    model = two_node_power()
    _, flag = power_derivative(model, np.array([2.0, 0.0, 60.0, 60.0]), np.zeros(2), return_flag=True)
    assert bool(flag)


def test_power_infeasible_when_load_exceeds_capacity():
    model = two_node_power(b=1.0, load=(3.0, -3.0))
    assert not solve_equilibrium(model, np.zeros(2)).feasible


def test_power_newton_unique_from_two_starts(power):
    u = np.array([0.5, -0.2, 0.1, 0.3, -0.4])
    a = power.solve_equilibrium(u, start=np.zeros(5))
    b = power.solve_equilibrium(u, start=np.array([0.2, -0.1, 0.05, 0.1, -0.25]))
    assert a.feasible and b.feasible
    assert np.linalg.norm(a.x - b.x) < 1e-8
    assert np.linalg.norm(power_derivative(power, a.x, u)) < 1e-9


def test_power_storage_taylor():
    model = two_node_power(b=9.0)
    eq = solve_equilibrium(model, np.array([0.4, -0.4]))
    assert eq.feasible
    rng = np.random.default_rng(5)
    dd, dy = 1e-3 * rng.normal(size=2), rng.normal(size=2)
    x = eq.x + np.concatenate([dd, dy])
    theta_star = (eq.x[:2] @ model.incidence)[0]
    approx = 0.5 * np.sum(model.inertia * dy * dy) + 0.5 * 9.0 * (dd @ model.incidence)[0] ** 2 * math.cos(theta_star)
    assert storage_value(model, x, eq) == pytest.approx(approx, rel=1e-5)


def test_power_eip_in_region(power):
    rng = np.random.default_rng(6)
    eq = solve_equilibrium(power, rng.uniform(-0.5, 0.5, 5))
    pts = 0
    while pts < 100:
        delta = eq.x[:5] + rng.uniform(-0.3, 0.3, 5)
        x = np.concatenate([delta, 60 + rng.normal(size=5)])
        if not power.in_region(x):
            continue
        assert eip_residual(power, x, rng.normal(size=5), eq) <= 1e-9
        pts += 1


def test_storage_nonnegative(platoon, power):
    rng = np.random.default_rng(7)
    for model in (platoon, power):
        eq = solve_equilibrium(model, np.zeros(model.m))
        x = eq.x + rng.uniform(-0.3, 0.3, (500, model.n))
        x = x[model.in_region(x)] if hasattr(model, "in_region") else x
        assert np.all(storage_value(model, x, eq) >= -1e-12)


def test_storage_requires_feasible_equilibrium():
    model = two_node_power(b=1.0, load=(3.0, -3.0))
    eq = solve_equilibrium(model, np.zeros(2))
    with pytest.raises(DomainError):
        storage_value(model, np.zeros(4), eq)


# -- parameter generation and files --------------------------------------------------------


def test_generate_platoon_ranges():
    model = generate_params("platoon", 20, seed=11)
    assert np.all((model.lambda0 >= 5) & (model.lambda0 <= 6))
    assert np.all(model.kappa == 1.0)
    assert np.all((model.rho >= 1) & (model.rho <= 2))
    assert np.all((model.cost_weights >= 0.025) & (model.cost_weights <= 0.075))
    assert model.incidence.shape == (20, 19)


def test_generate_deterministic():
    a, b = generate_params("power", 10, seed=3), generate_params("power", 10, seed=3)
    assert np.array_equal(a.inertia, b.inertia) and np.array_equal(a.susceptance, b.susceptance)
    assert a.incidence.shape == (10, 10)


def test_generate_rejects_small_m():
    with pytest.raises(ValueError):
        generate_params("platoon", 1)


@pytest.mark.parametrize("kind", ["platoon", "power"])
def test_model_file_round_trip(tmp_path, kind):
    model = generate_params(kind, 4, seed=5)
    save_model(model, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    for k, v in model.to_json_dict().items():
        assert back.to_json_dict()[k] == v
