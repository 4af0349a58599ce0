"""Discrete-time agent models and rollouts.

State arrays have the state dimension last and any number of leading batch
dimensions, so a single call propagates all K rollouts at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng
from .errors import ConfigurationError
from .mppi import ControlPlan, PerturbationSet, penalty_terms

NOISE_KINDS = ("noiseless", "control", "control-and-process")
DEFAULT_PROCESS_SIGMA = np.diag([0.005, 0.005, 0.002])


def arc_step(state, v, omega, dt: float) -> np.ndarray:
    """Exact constant-rate unicycle integration over one step.

    ``v`` and ``omega`` broadcast against ``state[..., 0]``.
    """
    s = np.asarray(state, dtype=float)
    x, y, th = s[..., 0], s[..., 1], s[..., 2]
    v = np.asarray(v, dtype=float)
    w = np.asarray(omega, dtype=float)
    half = 0.5 * w * dt
    th1 = th + w * dt
    # (v/w)(sin(th+w dt) - sin th) rewritten without cancellation; sinc -> 1 as w -> 0
    chord = v * dt * np.sinc(half / np.pi)
    dx = chord * np.cos(th + half)
    dy = chord * np.sin(th + half)
    out = np.empty(np.shape(th1) + (3,), dtype=float)
    out[..., 0] = x + dx
    out[..., 1] = y + dy
    out[..., 2] = th1
    return out


@dataclass(frozen=True)
class DubinsModel:
    """Constant-speed planar car; the only input is the turning rate."""

    v: float = 1.0
    r_min: float = 1.0
    dt: float = 0.1

    def __post_init__(self):
        if not (self.v > 0 and self.r_min > 0 and self.dt > 0):
            raise ConfigurationError("Dubins v, r_min and dt must be positive")

    @property
    def omega_max(self) -> float:
        return self.v / self.r_min

    state_dim = 3
    input_dim = 1

    def clamp(self, omega):
        return np.clip(omega, -self.omega_max, self.omega_max)

    def step(self, states, controls) -> np.ndarray:
        """Batched step: ``controls`` has a trailing input axis of size 1."""
        omega = np.asarray(controls, dtype=float)[..., 0]
        return dubins_step(states, omega, self)

    def simulate(self, x0, controls) -> np.ndarray:
        return dubins_simulate(x0, np.asarray(controls, dtype=float)[..., 0], self)


def dubins_simulate(x0, omega, model: DubinsModel) -> np.ndarray:
    """All steps at once for ``omega`` of shape (K, N): headings and positions
    are running sums, accumulated in the same order as repeated stepping."""
    w = model.clamp(np.asarray(omega, dtype=float))
    K, N = w.shape
    x0 = np.asarray(x0, dtype=float)
    half = 0.5 * w * model.dt
    th = np.empty((K, N + 1))
    th[:, 0] = x0[2]
    th[:, 1:] = w * model.dt
    np.cumsum(th, axis=1, out=th)
    chord = model.v * model.dt * np.sinc(half / np.pi)
    mid = th[:, :-1] + half
    out = np.empty((K, N + 1, 3))
    out[:, 0, 0] = x0[0]
    out[:, 0, 1] = x0[1]
    out[:, 1:, 0] = chord * np.cos(mid)
    out[:, 1:, 1] = chord * np.sin(mid)
    np.cumsum(out[:, :, :2], axis=1, out=out[:, :, :2])
    out[:, :, 2] = th
    return out


def dubins_step(state, omega, model: DubinsModel) -> np.ndarray:
    """Advance by ``model.dt`` with the turning rate clamped to ``v / r_min``."""
    return arc_step(state, model.v, model.clamp(omega), model.dt)


@dataclass(frozen=True)
class SingleIntegrator:
    """``x' = x + u * dt``; a toy model for tests and 1-D examples."""

    dim: int = 1
    dt: float = 1.0

    @property
    def state_dim(self):
        return self.dim

    @property
    def input_dim(self):
        return self.dim

    def step(self, states, controls):
        return np.asarray(states, dtype=float) + self.dt * np.asarray(controls, dtype=float)


@dataclass(frozen=True)
class NoiseProfile:
    """Which disturbances the true plant sees; planners only model control noise."""

    kind: str = "noiseless"
    process_sigma: np.ndarray = field(default_factory=lambda: DEFAULT_PROCESS_SIGMA.copy())

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigurationError(f"unknown noise profile {self.kind!r}")
        ps = np.atleast_2d(np.asarray(self.process_sigma, dtype=float))
        if ps.ndim == 2 and ps.shape[0] == 1 and ps.shape[1] > 1:
            ps = np.diag(ps[0])
        if np.any(np.linalg.eigvalsh(0.5 * (ps + ps.T)) < -1e-12):
            raise ConfigurationError("process_sigma must be positive semidefinite")
        object.__setattr__(self, "process_sigma", ps)

    @property
    def control_noise(self) -> bool:
        return self.kind != "noiseless"

    @property
    def process_noise(self) -> bool:
        return self.kind == "control-and-process"

    def process_draw(self, seed: int, stream: int) -> np.ndarray:
        n = self.process_sigma.shape[0]
        # eigen-factor: PSD matrices with zero variance channels are allowed
        vals, vecs = np.linalg.eigh(self.process_sigma)
        factor = vecs * np.sqrt(np.clip(vals, 0, None))
        return factor @ rng.normals(seed, [stream], n)[0]


@dataclass(frozen=True)
class CostSpec:
    """State cost functions, vectorized over leading axes.

    ``running(states, i)`` and ``terminal(states)`` take ``(..., n)`` arrays and
    return ``(...)`` costs.
    """

    running: Callable[[np.ndarray, int], np.ndarray]
    terminal: Callable[[np.ndarray], np.ndarray]
    alpha: float = 1000.0
    # running cost ignores the step index: evaluate all steps in one call
    time_invariant: bool = False


@dataclass(frozen=True)
class Rollout:
    states: np.ndarray  # (N+1, n)
    perturbations: np.ndarray  # (N, m)
    cost: float
    failed: bool = False


@dataclass(frozen=True)
class RolloutBatch:
    """K rollouts stored as stacked arrays; indexing yields a Rollout."""

    states: np.ndarray  # (K, N+1, n)
    perturbations: np.ndarray  # (K, N, m)
    costs: np.ndarray  # (K,)
    state_costs: np.ndarray  # (K,) costs without the control penalty
    failed: np.ndarray  # (K,) bool
    mode: str = "per-step"

    def __len__(self):
        return self.costs.shape[0]

    def __getitem__(self, k) -> Rollout:
        return Rollout(self.states[k], self.perturbations[k], float(self.costs[k]), bool(self.failed[k]))

    def subset(self, idx) -> "RolloutBatch":
        return RolloutBatch(self.states[idx], self.perturbations[idx], self.costs[idx],
                            self.state_costs[idx], self.failed[idx], self.mode)


def simulate(dynamics, x0, controls) -> np.ndarray:
    """Propagate ``controls`` (K, N, m) from ``x0``; returns (K, N+1, n)."""
    u = np.asarray(controls, dtype=float)
    if hasattr(dynamics, "simulate"):
        return dynamics.simulate(x0, u)
    K, N = u.shape[:2]
    x = np.broadcast_to(np.asarray(x0, dtype=float), (K, len(x0))).copy()
    out = np.empty((K, N + 1, x.shape[-1]))
    out[:, 0] = x
    for i in range(N):
        x = dynamics.step(x, u[:, i])
        out[:, i + 1] = x
    return out


def trajectory_cost(states, cost: CostSpec) -> np.ndarray:
    """``sum_{i<N} running(x_i, i) + terminal(x_N)`` per trajectory."""
    N = states.shape[-2] - 1
    if getattr(cost, "time_invariant", False):
        total = np.sum(cost.running(states[..., :N, :], 0), axis=-1) if N else np.zeros(states.shape[:-2])
        return total + cost.terminal(states[..., N, :])
    total = np.zeros(states.shape[:-2])
    for i in range(N):
        total = total + cost.running(states[..., i, :], i)
    return total + cost.terminal(states[..., N, :])


def _finish(states, eps, state_costs, penalty, mode) -> RolloutBatch:
    bad = ~np.isfinite(states).all(axis=(1, 2)) | ~np.isfinite(state_costs)
    costs = state_costs + penalty
    bad |= ~np.isfinite(costs)
    costs = np.where(bad, np.inf, costs)
    state_costs = np.where(bad, np.inf, state_costs)
    return RolloutBatch(states, eps, costs, state_costs, bad, mode)


def batch_rollout(dynamics, x0, plan: ControlPlan, perturbations, cost: CostSpec) -> RolloutBatch:
    """Simulate ``U + eps_k`` for every k and accumulate
    ``S_k = sum_i [psi(x_i) + lambda u_i^T Sigma^-1 eps_i] + phi(x_N)``.

    Rollouts whose state or cost goes non-finite are flagged ``failed`` with
    infinite cost instead of aborting the batch.
    """
    if isinstance(perturbations, PerturbationSet):
        eps, mode = perturbations.eps, perturbations.mode
    else:
        eps, mode = np.asarray(perturbations, dtype=float), "per-step"
    if eps.shape[1:] != plan.inputs.shape:
        raise ValueError(f"perturbations {eps.shape} do not match plan {plan.inputs.shape}")
    with np.errstate(invalid="ignore", over="ignore"):
        states = simulate(dynamics, x0, plan.inputs[None] + eps)
        state_costs = trajectory_cost(states, cost)
    return _finish(states, eps, state_costs, penalty_terms(plan, eps, mode), mode)


def rollout(dynamics, x0, plan: ControlPlan, eps_row, cost: CostSpec,
            profile: NoiseProfile | None = None, seed: int = 0, true_plant: bool = False) -> Rollout:
    """One rollout. Process noise is drawn only for true-plant execution under
    a ``control-and-process`` profile; planner simulations never see it."""
    eps = np.asarray(eps_row, dtype=float)
    if eps.ndim == 1:
        eps = eps[:, None]
    if eps.shape != plan.inputs.shape:
        raise ValueError(f"perturbation row {eps.shape} does not match plan {plan.inputs.shape}")
    if not (true_plant and profile is not None and profile.process_noise):
        return batch_rollout(dynamics, x0, plan, eps[None], cost)[0]
    u = plan.inputs + eps
    x = np.asarray(x0, dtype=float)
    states = [x]
    with np.errstate(invalid="ignore", over="ignore"):
        for i in range(plan.horizon):
            x = dynamics.step(x, u[i]) + profile.process_draw(seed, i)
            states.append(x)
        states = np.array(states)[None]
        state_costs = trajectory_cost(states, cost)
    return _finish(states, eps[None], state_costs, penalty_terms(plan, eps[None]), "per-step")[0]
