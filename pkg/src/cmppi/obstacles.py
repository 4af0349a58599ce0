"""Dynamic-obstacle forecasts and obstacle-parameterized costs (DC-MPPI).

Obstacle trajectories are sampled once per control step. The resulting
cost only depends on the agent state and step index, so the K agent
rollouts share one read-only spatial index per time step: forecasting costs
L*P simulations however many rollouts are evaluated.
"""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import rng
from .clustering import DbscanParams, clustered_mppi
from .dynamics import CostSpec, arc_step, batch_rollout
from .errors import ConfigurationError
from .mppi import ControlPlan, cholesky_spd, sample_perturbations

# simulated_trajectories / index_points / lookups, for complexity checks
counters: Counter = Counter()

THETA_MODES = ("uniform", "likelihood")


def unicycle_step(states, inputs, dt: float) -> np.ndarray:
    """Obstacle motion: inputs are ``(v, omega)`` with no turning-rate limit."""
    u = np.asarray(inputs, dtype=float)
    return arc_step(states, u[..., 0], u[..., 1], dt)


@dataclass(frozen=True)
class ObstacleModel:
    initial_state: np.ndarray  # (x, y, theta)
    reference_inputs: np.ndarray  # (2,) held constant, or (N, 2)
    input_sigma: np.ndarray  # (2, 2)
    collision_radius: float = 1.0
    dt: float = 0.1
    ident: int = 0
    chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "initial_state", np.asarray(self.initial_state, dtype=float))
        object.__setattr__(self, "reference_inputs", np.asarray(self.reference_inputs, dtype=float))
        object.__setattr__(self, "input_sigma", np.atleast_2d(np.asarray(self.input_sigma, dtype=float)))
        if not self.collision_radius > 0:
            raise ConfigurationError("collision_radius must be positive")
        object.__setattr__(self, "chol", cholesky_spd(self.input_sigma))

    def inputs(self, N: int) -> np.ndarray:
        u = self.reference_inputs
        if u.ndim == 1:
            return np.broadcast_to(u, (N, u.shape[0]))
        if u.shape[0] < N:
            raise ValueError(f"obstacle reference has {u.shape[0]} steps, need {N}")
        return u[:N]


@dataclass(frozen=True)
class ObstacleForecast:
    trajectories: np.ndarray  # (P, N+1, 3)
    theta: np.ndarray  # (P,), sums to 1
    collision_radius: float = 1.0
    ident: int = 0

    @property
    def count(self) -> int:
        return self.trajectories.shape[0]

    def to_dict(self) -> dict:
        return {
            "ident": self.ident,
            "collision_radius": self.collision_radius,
            "theta": self.theta.tolist(),
            "trajectories": np.round(self.trajectories, 6).tolist(),
        }


def simulate_obstacles(models, P: int, N: int, seed: int, theta_mode: str = "uniform"):
    """Sample ``P`` noisy trajectories per obstacle over ``N`` steps.

    Each obstacle's noise comes from streams keyed by ``(seed, ident, p)``.
    ``theta`` is ``1/P`` (self-normalized Monte Carlo) or, in ``"likelihood"``
    mode, proportional to the Gaussian density of each sampled noise sequence.
    """
    if P < 1:
        raise ValueError("P must be >= 1")
    if theta_mode not in THETA_MODES:
        raise ConfigurationError(f"unknown theta mode {theta_mode!r}")
    out = []
    for model in models:
        m = model.input_sigma.shape[0]
        z = rng.normals(rng.derive_seed(seed, model.ident), np.arange(P), N * m).reshape(P, N, m)
        u = model.inputs(N)[None] + z @ model.chol.T
        traj = np.empty((P, N + 1, 3))
        traj[:, 0] = model.initial_state[:3]
        o = traj[:, 0]
        for i in range(N):
            o = unicycle_step(o, u[:, i], model.dt)
            traj[:, i + 1] = o
        if theta_mode == "uniform":
            theta = np.full(P, 1.0 / P)
        else:
            logp = -0.5 * np.sum(z * z, axis=(1, 2))
            theta = np.exp(logp - logp.max())
            theta /= theta.sum()
        counters["simulated_trajectories"] += P
        out.append(ObstacleForecast(traj, theta, float(model.collision_radius), model.ident))
    return out


def collision_indicator(agent_state, step: int, forecast: ObstacleForecast, p: int) -> int:
    """1 when the agent is within the collision radius (inclusive) of
    trajectory ``p`` at the same step index."""
    o = forecast.trajectories[p, step]
    a = np.asarray(agent_state, dtype=float)
    return int(np.hypot(a[0] - o[0], a[1] - o[1]) <= forecast.collision_radius)


class AugmentedCostSpec:
    """Base cost plus ``beta * sum_l sum_p theta_lp * 1[collision]``.

    The same obstacle term is added to the running and the terminal cost; the
    terminal cost is evaluated at the last forecast step. One KD-tree over the
    L*P obstacle positions is built per step at construction.
    """

    def __init__(self, base: CostSpec, forecasts, beta: float = 10.0):
        if not beta > 0:
            raise ConfigurationError("beta must be positive")
        self.base = base
        self.forecasts = list(forecasts)
        self.beta = float(beta)
        self.alpha = base.alpha
        self._trees = []
        self.horizon = None
        # with no forecasts the step index is irrelevant again
        self.time_invariant = bool(getattr(base, "time_invariant", False)) and not self.forecasts
        if self.forecasts:
            lens = {f.trajectories.shape[1] for f in self.forecasts}
            if len(lens) != 1:
                raise ValueError("forecasts must share one horizon")
            self.horizon = lens.pop() - 1
            self._theta = np.concatenate([f.theta for f in self.forecasts])
            self._radius = np.concatenate([np.full(f.count, f.collision_radius) for f in self.forecasts])
            self._rmax = float(self._radius.max())
            for i in range(self.horizon + 1):
                pts = np.concatenate([f.trajectories[:, i, :2] for f in self.forecasts])
                self._trees.append(cKDTree(pts))
                counters["index_points"] += pts.shape[0]

    def obstacle_term(self, states, i: int) -> np.ndarray:
        s = np.asarray(states, dtype=float)
        shape = s.shape[:-1]
        if not self.forecasts:
            return np.zeros(shape)
        if i > self.horizon:
            raise IndexError(f"step {i} beyond forecast horizon {self.horizon}")
        q = s.reshape(-1, s.shape[-1])[:, :2]
        counters["lookups"] += q.shape[0]
        total = np.zeros(q.shape[0])
        finite = np.isfinite(q).all(axis=1)
        if not finite.all():
            total[~finite] = np.nan
            q = np.where(finite[:, None], q, 0.0)
        hits = cKDTree(q).sparse_distance_matrix(self._trees[i], self._rmax, output_type="ndarray")
        if hits.size:
            keep = hits["v"] <= self._radius[hits["j"]]
            w = self._theta[hits["j"][keep]]
            np.add.at(total, hits["i"][keep], w)
        return (self.beta * total).reshape(shape)

    def running(self, states, i: int) -> np.ndarray:
        base = self.base.running(states, i)
        if not self.forecasts:
            return base
        return base + self.obstacle_term(states, i)

    def terminal(self, states) -> np.ndarray:
        base = self.base.terminal(states)
        if not self.forecasts:
            return base
        return base + self.obstacle_term(states, self.horizon)


@dataclass
class DCDiagnostics:
    clusters: object
    forecasts: list
    obstacle_simulations: int
    forecast_seconds: float


def dc_mppi(plan: ControlPlan, x0, models, P: int, K: int, params: DbscanParams,
            base_cost: CostSpec, seed: int, dynamics, beta: float = 10.0,
            mode: str = "constant", theta_mode: str = "uniform"):
    """Forecast obstacles once, bind them into the cost, run clustered MPPI.

    Agent perturbations use ``seed`` directly, so with no obstacles this is
    exactly clustered MPPI on ``base_cost``.
    """
    N = plan.horizon
    t0 = time.perf_counter()
    before = counters["simulated_trajectories"]
    forecasts = simulate_obstacles(models, P, N, rng.derive_seed(seed, 0x0B5), theta_mode)
    cost = AugmentedCostSpec(base_cost, forecasts, beta)
    t_forecast = time.perf_counter() - t0
    sims = counters["simulated_trajectories"] - before

    eps = sample_perturbations(K, N, plan.sigma, mode, seed)
    batch = batch_rollout(dynamics, x0, plan, eps, cost)
    inputs, cdiag = clustered_mppi(plan, batch, params, cost, dynamics, x0)
    return inputs, DCDiagnostics(cdiag, forecasts, sims, t_forecast)
