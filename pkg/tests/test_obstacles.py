import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmppi import obstacles
from cmppi.clustering import DbscanParams, clustered_mppi
from cmppi.dynamics import CostSpec, DubinsModel, batch_rollout
from cmppi.errors import ConfigurationError
from cmppi.mppi import ControlPlan, sample_perturbations
from cmppi.obstacles import (
    AugmentedCostSpec,
    ObstacleForecast,
    ObstacleModel,
    collision_indicator,
    dc_mppi,
    simulate_obstacles,
    unicycle_step,
)


def goal_cost(goal=(20.0, 0.0)):
    g = np.asarray(goal)
    f = lambda s, i=0: np.hypot(s[..., 0] - g[0], s[..., 1] - g[1])
    return CostSpec(f, f, time_invariant=True)


def fixed_forecast(points, radius=1.0, theta=None):
    """Forecast whose P trajectories sit still at ``points`` for 3 steps."""
    pts = np.asarray(points, dtype=float)
    traj = np.zeros((len(pts), 4, 3))
    traj[:, :, :2] = pts[:, None, :]
    th = np.full(len(pts), 1 / len(pts)) if theta is None else np.asarray(theta)
    return ObstacleForecast(traj, th, radius)


# --- forecasts ----------------------------------------------------------------

def test_straight_obstacle_hand_propagated():
    m = ObstacleModel([0, 0, 0], [1.0, 0.0], np.eye(2) * 1e-30, dt=1.0)
    f = simulate_obstacles([m], 1, 3, seed=0)[0]
    assert np.allclose(f.trajectories[0], [[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], atol=1e-12)
    assert list(f.theta) == [1.0]


def test_degenerate_noise_collapses_to_reference():
    m = ObstacleModel([2, 1, 0.3], [0.8, 0.2], np.eye(2) * 1e-12, dt=0.1)
    f = simulate_obstacles([m], 25, 40, seed=5)[0]
    ref = np.array([[2.0, 1.0, 0.3]])
    for _ in range(40):
        ref = np.vstack([ref, unicycle_step(ref[-1], [0.8, 0.2], 0.1)])
    assert np.max(np.abs(f.trajectories - ref[None])) < 1e-4


def test_non_spd_obstacle_sigma_rejected():
    with pytest.raises(ConfigurationError):
        ObstacleModel([0, 0, 0], [1, 0], [[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(ConfigurationError):
        ObstacleModel([0, 0, 0], [1, 0], np.eye(2), collision_radius=0.0)


def test_forecasts_deterministic_and_per_obstacle():
    a = ObstacleModel([0, 0, 0], [1, 0], np.eye(2) * 0.1, ident=0)
    b = ObstacleModel([0, 0, 0], [1, 0], np.eye(2) * 0.1, ident=1)
    f1 = simulate_obstacles([a, b], 10, 20, seed=3)
    f2 = simulate_obstacles([a, b], 10, 20, seed=3)
    assert np.array_equal(f1[0].trajectories, f2[0].trajectories)
    assert not np.array_equal(f1[0].trajectories, f1[1].trajectories)
    # obstacle streams do not depend on which other obstacles are present
    assert np.array_equal(simulate_obstacles([b], 10, 20, seed=3)[0].trajectories, f1[1].trajectories)


def test_time_varying_reference_inputs():
    u = np.column_stack([np.ones(5), np.linspace(0, 0.4, 5)])
    m = ObstacleModel([0, 0, 0], u, np.eye(2) * 1e-30, dt=0.5)
    f = simulate_obstacles([m], 1, 5, seed=0)[0]
    assert np.allclose(f.trajectories[0, -1, 2], 0.5 * u[:, 1].sum())
    with pytest.raises(ValueError):
        simulate_obstacles([m], 1, 6, seed=0)


@settings(max_examples=40)
@given(st.integers(1, 40), st.integers(0, 2**31), st.sampled_from(["uniform", "likelihood"]))
def test_theta_normalized(P, seed, mode):
    m = ObstacleModel([0, 0, 0], [1, 0], np.diag([0.08, 0.02]))
    f = simulate_obstacles([m], P, 10, seed, mode)[0]
    assert np.all(f.theta >= 0)
    assert abs(f.theta.sum() - 1) <= 1e-12


def test_likelihood_theta_prefers_typical_samples():
    m = ObstacleModel([0, 0, 0], [1, 0], np.diag([0.08, 0.02]))
    f = simulate_obstacles([m], 30, 10, 1, "likelihood")[0]
    assert f.theta.max() > 1 / 30 > f.theta.min()


def test_bad_arguments():
    m = ObstacleModel([0, 0, 0], [1, 0], np.eye(2))
    with pytest.raises(ValueError):
        simulate_obstacles([m], 0, 5, 0)
    with pytest.raises(ConfigurationError):
        simulate_obstacles([m], 3, 5, 0, "guess")


# --- indicator and augmented cost --------------------------------------------

@pytest.mark.parametrize("dist, hit", [(0.5, 1), (1.0, 1), (1.0 + 1e-9, 0), (5.0, 0)])
def test_indicator(dist, hit):
    f = fixed_forecast([[0.0, 0.0]])
    assert collision_indicator([dist, 0.0, 0.0], 2, f, 0) == hit


def test_indicator_is_time_aligned():
    traj = np.zeros((1, 3, 3))
    traj[0, :, 0] = [0.0, 5.0, 10.0]
    f = ObstacleForecast(traj, np.ones(1))
    assert collision_indicator([5.0, 0, 0], 1, f, 0) == 1
    assert collision_indicator([5.0, 0, 0], 2, f, 0) == 0


def test_no_obstacles_bitwise_base():
    base = goal_cost()
    aug = AugmentedCostSpec(base, [], 10.0)
    s = np.random.default_rng(0).normal(size=(7, 3)) * 5
    assert np.array_equal(aug.running(s, 0), base.running(s, 0))
    assert np.array_equal(aug.terminal(s), base.terminal(s))


def test_inside_all_trajectories_adds_beta():
    base = goal_cost()
    pts = np.random.default_rng(1).uniform(-0.3, 0.3, size=(25, 2))
    aug = AugmentedCostSpec(base, [fixed_forecast(pts)], 10.0)
    s = np.zeros((1, 3))
    assert aug.running(s, 1)[0] == pytest.approx(base.running(s, 1)[0] + 10.0, abs=1e-12)


def test_three_of_twenty_five():
    base = goal_cost()
    pts = np.full((25, 2), 50.0)
    pts[[2, 9, 17]] = [[0.2, 0.0], [0.0, -0.5], [0.9, 0.0]]
    aug = AugmentedCostSpec(base, [fixed_forecast(pts)], 10.0)
    s = np.zeros((1, 3))
    assert aug.running(s, 0)[0] - base.running(s, 0)[0] == pytest.approx(10 * 3 / 25, abs=1e-12)
    assert aug.terminal(s)[0] - base.terminal(s)[0] == pytest.approx(10 * 3 / 25, abs=1e-12)


def brute_obstacle_term(states, forecasts, i, beta):
    out = np.zeros(len(states))
    for k, x in enumerate(states):
        for f in forecasts:
            for p in range(f.count):
                out[k] += f.theta[p] * collision_indicator(x, i, f, p)
    return beta * out


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_indexed_term_matches_brute_force(seed):
    g = np.random.default_rng(seed)
    fc = []
    for ident in range(3):
        m = ObstacleModel(g.uniform(-3, 3, 3), [g.uniform(0.5, 1.5), g.uniform(-0.5, 0.5)],
                          np.diag([0.2, 0.05]), g.uniform(0.5, 1.5), 0.2, ident)
        fc += simulate_obstacles([m], 8, 6, seed)
    aug = AugmentedCostSpec(goal_cost(), fc, 10.0)
    states = g.uniform(-5, 5, size=(60, 3))
    for i in range(7):
        assert np.allclose(aug.obstacle_term(states, i), brute_obstacle_term(states, fc, i, 10.0), atol=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 2**31))
def test_adding_forecast_never_lowers_cost(seed):
    g = np.random.default_rng(seed)
    f1 = fixed_forecast(g.uniform(-2, 2, size=(5, 2)))
    f2 = fixed_forecast(g.uniform(-2, 2, size=(5, 2)))
    s = g.uniform(-3, 3, size=(50, 3))
    one = AugmentedCostSpec(goal_cost(), [f1], 10.0)
    two = AugmentedCostSpec(goal_cost(), [f1, f2], 10.0)
    for i in range(4):
        assert np.all(two.running(s, i) >= one.running(s, i))
        assert np.all(one.running(s, i) >= goal_cost().running(s, i))


def test_non_finite_state_gives_nan_term():
    aug = AugmentedCostSpec(goal_cost(), [fixed_forecast([[0, 0]])], 10.0)
    out = aug.obstacle_term(np.array([[0.0, 0.0, 0.0], [np.nan, 0.0, 0.0]]), 0)
    assert out[0] == 10.0 and np.isnan(out[1])


def test_beta_and_horizon_checks():
    with pytest.raises(ConfigurationError):
        AugmentedCostSpec(goal_cost(), [], 0.0)
    aug = AugmentedCostSpec(goal_cost(), [fixed_forecast([[0, 0]])], 1.0)
    with pytest.raises(IndexError):
        aug.obstacle_term(np.zeros((1, 3)), 4)
    short = ObstacleForecast(np.zeros((1, 2, 3)), np.ones(1))
    with pytest.raises(ValueError):
        AugmentedCostSpec(goal_cost(), [fixed_forecast([[0, 0]]), short], 1.0)


# --- DC-MPPI --------------------------------------------------------------

def test_zero_obstacles_equals_clustered():
    model = DubinsModel()
    plan = ControlPlan(np.zeros((20, 1)), [[0.1]], 1.0)
    x0 = np.array([0.0, 0.0, 0.5])
    out, _ = dc_mppi(plan, x0, [], 25, 200, DbscanParams(), goal_cost(), seed=7, dynamics=model)
    batch = batch_rollout(model, x0, plan, sample_perturbations(200, 20, [[0.1]], "constant", 7), goal_cost())
    ref, _ = clustered_mppi(plan, batch, DbscanParams(), goal_cost(), model, x0)
    assert np.array_equal(out, ref)


def test_simulation_count_independent_of_k():
    model = DubinsModel()
    plan = ControlPlan(np.zeros((20, 1)), [[0.1]], 1.0)
    obs = [ObstacleModel([5, float(j), np.pi], [1, 0], np.diag([0.08, 0.02]), ident=j) for j in range(3)]
    counts = []
    for K in (50, 400):
        _, diag = dc_mppi(plan, np.zeros(3), obs, 25, K, DbscanParams(), goal_cost(), 1, model)
        counts.append(diag.obstacle_simulations)
    assert counts == [75, 75]


def test_lookups_scale_with_rollouts_not_samples():
    model = DubinsModel()
    plan = ControlPlan(np.zeros((10, 1)), [[0.1]], 1.0)
    obs = [ObstacleModel([5, 0, np.pi], [1, 0], np.diag([0.08, 0.02]))]
    seen = []
    for P in (5, 50):
        obstacles.counters.clear()
        dc_mppi(plan, np.zeros(3), obs, P, 100, DbscanParams(), goal_cost(), 1, model)
        seen.append(dict(obstacles.counters))
    assert seen[0]["simulated_trajectories"] == 5 and seen[1]["simulated_trajectories"] == 50
    assert seen[0]["index_points"] == 5 * 11 and seen[1]["index_points"] == 50 * 11
    # K rollouts x (N + 1) states plus one noiseless evaluation per cluster
    assert seen[0]["lookups"] >= 100 * 11 and seen[0]["lookups"] < 100 * 11 + 11 * 100


def headon_first_control(algorithm):
    """First turning-rate command against an obstacle driving straight down the reference line."""
    model = DubinsModel()
    x0 = np.zeros(3)
    plan = ControlPlan(np.zeros((50, 1)), [[0.1]], 1.0)
    obs = ObstacleModel([6.0, 0.0, np.pi], [1.0, 0.0], np.diag([1 / 12, 1 / 12]), 1.0, 0.1)
    cost = goal_cost((25.0, 0.0))
    if algorithm == "dc-mppi":
        out, _ = dc_mppi(plan, x0, [obs], 25, 500, DbscanParams(), cost, 11, model)
    else:
        frozen = ObstacleForecast(np.repeat(obs.initial_state[None, None], 51, axis=1), np.ones(1))
        aug = AugmentedCostSpec(cost, [frozen], 10.0)
        batch = batch_rollout(model, x0, plan, sample_perturbations(500, 50, [[0.1]], "constant", 11), aug)
        out, _ = clustered_mppi(plan, batch, DbscanParams(), aug, model, x0)
    return float(model.clamp(out[0, 0]))


def test_headon_dc_deviates_more_than_clustered():
    assert abs(headon_first_control("dc-mppi")) > abs(headon_first_control("clustered"))
