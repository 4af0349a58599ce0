import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmppi.dynamics import (
    CostSpec,
    DubinsModel,
    NoiseProfile,
    SingleIntegrator,
    arc_step,
    batch_rollout,
    dubins_simulate,
    dubins_step,
    rollout,
    simulate,
    trajectory_cost,
)
from cmppi.environments import FOREST_BOUNDS, generate_forest, goal_distance_cost, sample_start_goal
from cmppi.errors import ConfigurationError
from cmppi.mppi import ControlPlan, sample_perturbations


def euler(state, omega, v, dt, substeps=1000, midpoint=True):
    """Explicit substepping; ``midpoint`` evaluates the heading half a substep ahead."""
    x, y, th = map(float, state)
    h = dt / substeps
    lead = 0.5 * h * omega if midpoint else 0.0
    for _ in range(substeps):
        x += h * v * math.cos(th + lead)
        y += h * v * math.sin(th + lead)
        th += h * omega
    return np.array([x, y, th])


def test_straight_line():
    m = DubinsModel(v=1, r_min=0.5, dt=1)
    assert np.allclose(dubins_step([0, 0, 0], 0.0, m), [1, 0, 0], atol=1e-15)


def test_quarter_arc():
    m = DubinsModel(v=1, r_min=0.5, dt=1)
    out = dubins_step([0, 0, 0], math.pi / 2, m)
    assert np.allclose(out, [2 / math.pi, 2 / math.pi, math.pi / 2], atol=1e-14)


def test_turn_rate_clamped():
    m = DubinsModel(v=1, r_min=1, dt=0.1)
    assert np.array_equal(dubins_step([0, 0, 0], 2.0, m), dubins_step([0, 0, 0], 1.0, m))
    assert np.array_equal(dubins_step([0, 0, 0], -5.0, m), dubins_step([0, 0, 0], -1.0, m))


def test_closed_form_matches_textbook_formula():
    th, w, v, dt = 0.3, 0.7, 1.3, 0.25
    ref = [v / w * (math.sin(th + w * dt) - math.sin(th)),
           -v / w * (math.cos(th + w * dt) - math.cos(th)), th + w * dt]
    assert np.allclose(arc_step([0, 0, th], v, w, dt), ref, atol=1e-14)


@settings(max_examples=60)
@given(st.floats(-math.pi, math.pi), st.floats(-1.0, 1.0))
def test_matches_fine_euler(theta, omega):
    m = DubinsModel(v=1, r_min=1, dt=0.1)
    out = dubins_step([0.0, 0.0, theta], omega, m)
    assert np.max(np.abs(out - euler([0, 0, theta], omega, 1.0, 0.1))) < 1e-6


@pytest.mark.parametrize("omega", [-1.0, -0.3, 0.0, 0.6, 1.0])
def test_forward_euler_converges_first_order(omega):
    # plain forward Euler has O(h) error: about v * |omega| * dt * h / 2
    m = DubinsModel(v=1, r_min=1, dt=0.1)
    out = dubins_step([0.0, 0.0, 0.4], omega, m)
    err = np.max(np.abs(out - euler([0, 0, 0.4], omega, 1.0, 0.1, midpoint=False)))
    assert err <= 0.6 * abs(omega) * 0.1 * 1e-4 + 1e-12


@given(st.floats(-math.pi, math.pi), st.floats(-2.0, 2.0))
def test_chord_never_exceeds_arc(theta, omega):
    m = DubinsModel(v=1.5, r_min=0.75, dt=0.2)
    out = dubins_step([0.0, 0.0, theta], omega, m)
    d = math.hypot(out[0], out[1])
    assert d <= 1.5 * 0.2 + 1e-15
    if omega == 0.0:
        assert d == pytest.approx(0.3, abs=1e-15)
    elif abs(omega) > 1e-3:
        assert d < 0.3


@settings(max_examples=30)
@given(st.integers(0, 2**31))
def test_vectorized_simulate_equals_stepping(seed):
    g = np.random.default_rng(seed)
    m = DubinsModel(v=1.0, r_min=1.0, dt=0.1)
    w = g.uniform(-1.5, 1.5, size=(5, 12))
    x0 = np.array([g.uniform(-5, 5), g.uniform(-5, 5), g.uniform(-3, 3)])
    fast = dubins_simulate(x0, w, m)
    x = np.broadcast_to(x0, (5, 3))
    assert np.array_equal(fast[:, 0], x)
    for i in range(12):
        x = dubins_step(x, w[:, i], m)
        assert np.array_equal(fast[:, i + 1], x)


def test_model_validation():
    for bad in ({"v": 0}, {"r_min": -1}, {"dt": 0}):
        with pytest.raises(ConfigurationError):
            DubinsModel(**bad)


def test_noise_profiles():
    assert not NoiseProfile("noiseless").control_noise
    p = NoiseProfile("control")
    assert p.control_noise and not p.process_noise
    q = NoiseProfile("control-and-process")
    assert q.process_noise and q.process_sigma.shape == (3, 3)
    with pytest.raises(ConfigurationError):
        NoiseProfile("sometimes")
    with pytest.raises(ConfigurationError):
        NoiseProfile("control", -np.eye(3))


def norm_cost():
    return CostSpec(lambda s, i: np.zeros(s.shape[:-1]), lambda s: np.hypot(s[..., 0], s[..., 1]))


def test_one_step_hand_cost():
    m = DubinsModel(v=1, r_min=1, dt=1)
    plan = ControlPlan(np.array([[0.5]]), [[0.1]], 1.0)
    # eps cancels the plan: omega = 0, straight unit step; penalty 1 * 0.5 / 0.1 * (-0.5) = -2.5
    r = rollout(m, np.zeros(3), plan, np.array([[-0.5]]), norm_cost())
    assert r.cost == pytest.approx(1.0 - 2.5, abs=1e-14)
    assert np.allclose(r.states[-1], [1, 0, 0])


def test_zero_everything_zero_cost():
    zero = CostSpec(lambda s, i: np.zeros(s.shape[:-1]), lambda s: np.zeros(s.shape[:-1]))
    plan = ControlPlan(np.zeros((4, 1)), [[0.1]], 1.0)
    r = rollout(DubinsModel(), np.zeros(3), plan, np.zeros((4, 1)), zero)
    assert r.cost == 0.0 and not r.failed


def test_planner_rollout_ignores_process_noise():
    prof = NoiseProfile("control-and-process", np.diag([0.5, 0.5, 0.1]))
    plan = ControlPlan(np.full((6, 1), 0.2), [[0.1]], 1.0)
    eps = np.full((6, 1), 0.1)
    a = rollout(DubinsModel(), np.zeros(3), plan, eps, norm_cost(), prof, seed=1)
    b = rollout(DubinsModel(), np.zeros(3), plan, eps, norm_cost())
    assert np.array_equal(a.states, b.states)
    c = rollout(DubinsModel(), np.zeros(3), plan, eps, norm_cost(), prof, seed=1, true_plant=True)
    assert not np.allclose(c.states[1:], b.states[1:])
    # true-plant draws are reproducible
    d = rollout(DubinsModel(), np.zeros(3), plan, eps, norm_cost(), prof, seed=1, true_plant=True)
    assert np.array_equal(c.states, d.states)


def test_nan_marks_failure():
    bad = CostSpec(lambda s, i: np.where(s[..., 0] > 0.25, np.nan, 0.0), lambda s: np.zeros(s.shape[:-1]))
    plan = ControlPlan(np.zeros((5, 1)), [[0.1]], 1.0)
    eps = sample_perturbations(4, 5, [[0.1]], seed=0)
    batch = batch_rollout(DubinsModel(), np.zeros(3), plan, eps, bad)
    assert batch.failed.all() and np.all(np.isinf(batch.costs))


def test_batch_equals_individual_rollouts():
    g = np.random.default_rng(4)
    plan = ControlPlan(g.normal(size=(7, 1)) * 0.3, [[0.1]], 1.3)
    eps = sample_perturbations(9, 7, [[0.1]], seed=2)
    cost = CostSpec(lambda s, i: (s[..., 0] - 1) ** 2 + 0.1 * i, lambda s: np.abs(s[..., 1]))
    batch = batch_rollout(DubinsModel(), [0.1, 0.2, 0.3], plan, eps, cost)
    for k in range(9):
        one = rollout(DubinsModel(), [0.1, 0.2, 0.3], plan, eps.eps[k], cost)
        assert one.cost == pytest.approx(batch.costs[k], rel=1e-13)
        assert np.array_equal(one.states, batch.states[k])
    assert len(batch) == 9 and batch[3].cost == batch.costs[3]


def test_cost_decomposes_from_states():
    plan = ControlPlan(np.full((10, 1), 0.1), [[0.1]], 1.0)
    eps = sample_perturbations(6, 10, [[0.1]], seed=8)
    cost = CostSpec(lambda s, i: np.cos(s[..., 2]) * (i + 1), lambda s: s[..., 0] ** 2)
    batch = batch_rollout(DubinsModel(), np.zeros(3), plan, eps, cost)
    for k in range(6):
        S = sum(cost.running(batch.states[k, i], i) for i in range(10)) + cost.terminal(batch.states[k, 10])
        S += sum(1.0 * 0.1 / 0.1 * eps.eps[k, i, 0] for i in range(10))
        assert S == pytest.approx(batch.costs[k], abs=1e-9)


def test_time_invariant_cost_path_matches_loop():
    states = np.random.default_rng(0).normal(size=(4, 6, 3))
    f = lambda s, i=0: s[..., 0] ** 2 + s[..., 1]
    loop = trajectory_cost(states, CostSpec(f, f))
    fast = trajectory_cost(states, CostSpec(f, f, time_invariant=True))
    assert np.allclose(loop, fast, rtol=1e-14)


def test_generic_model_simulation():
    m = SingleIntegrator(dim=2, dt=0.5)
    out = simulate(m, [1.0, -1.0], np.ones((3, 4, 2)))
    assert out.shape == (3, 5, 2)
    assert np.allclose(out[:, -1], [3.0, 1.0])


def test_forest_smoke_all_costs_finite():
    smap = generate_forest(3, FOREST_BOUNDS)
    start, goal = sample_start_goal(smap, 3)
    cost = CostSpec(lambda s, i: goal_distance_cost(s, goal, smap), lambda s: goal_distance_cost(s, goal, smap),
                    time_invariant=True)
    plan = ControlPlan(np.zeros((50, 1)), [[0.1]], 1.0)
    eps = sample_perturbations(500, 50, [[0.1]], "constant", seed=0)
    batch = batch_rollout(DubinsModel(), start, plan, eps, cost)
    assert np.all(np.isfinite(batch.costs)) and not batch.failed.any()
    assert np.all(batch.state_costs >= 0)
    assert np.all(batch.states[:, 0] == start)
