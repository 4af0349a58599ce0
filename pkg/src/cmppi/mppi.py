"""Baseline MPPI: perturbation sampling, cost-weighted averaging and the
control update, independent of any dynamics or cost."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import ConfigurationError, DataError

SAMPLING_MODES = ("per-step", "constant")


def cholesky_spd(sigma) -> np.ndarray:
    """Lower Cholesky factor of ``sigma``; non-SPD input is a ConfigurationError."""
    s = np.atleast_2d(np.asarray(sigma, dtype=float))
    if s.shape[0] != s.shape[1]:
        raise ConfigurationError(f"covariance must be square, got {s.shape}")
    if not np.all(np.isfinite(s)) or not np.allclose(s, s.T, rtol=0, atol=1e-12):
        raise ConfigurationError("covariance must be finite and symmetric")
    try:
        return np.linalg.cholesky(s)
    except np.linalg.LinAlgError as exc:
        raise ConfigurationError("covariance is not positive definite") from exc


@dataclass(frozen=True)
class ControlPlan:
    """Reference input sequence ``inputs`` (N x m) with its sampling covariance."""

    inputs: np.ndarray
    sigma: np.ndarray
    lambda_: float = 1.0
    chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        u = np.asarray(self.inputs, dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        s = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if u.ndim != 2 or u.shape[0] < 1:
            raise ConfigurationError("plan needs at least one input")
        if s.shape != (u.shape[1], u.shape[1]):
            raise ConfigurationError(f"sigma shape {s.shape} does not match input dim {u.shape[1]}")
        if not self.lambda_ > 0:
            raise ConfigurationError("lambda must be positive")
        object.__setattr__(self, "inputs", u)
        object.__setattr__(self, "sigma", s)
        object.__setattr__(self, "chol", cholesky_spd(s))

    @property
    def horizon(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def with_inputs(self, inputs) -> "ControlPlan":
        return ControlPlan(inputs, self.sigma, self.lambda_)

    def sigma_inv_inputs(self) -> np.ndarray:
        """Rows ``Sigma^-1 u_i`` via the Cholesky factor."""
        L = self.chol
        y = np.linalg.solve(L, self.inputs.T)
        return np.linalg.solve(L.T, y).T


@dataclass(frozen=True)
class PerturbationSet:
    eps: np.ndarray  # (K, N, m)
    seed: int
    mode: str = "per-step"

    @property
    def count(self) -> int:
        return self.eps.shape[0]

    def __len__(self):
        return self.eps.shape[0]

    def subset(self, idx) -> "PerturbationSet":
        return PerturbationSet(self.eps[idx], self.seed, self.mode)


def sample_perturbations(K: int, N: int, sigma, mode: str = "per-step", seed: int = 0) -> PerturbationSet:
    """Draw ``K`` zero-mean Gaussian perturbation sequences of length ``N``.

    Row ``k`` is generated from its own counter-based stream keyed by
    ``(seed, k)``: asking for more rollouts never changes the earlier ones.
    In ``"constant"`` mode one draw per rollout is repeated over the horizon.
    """
    if K < 1 or N < 1:
        raise ValueError("K and N must be >= 1")
    if mode not in SAMPLING_MODES:
        raise ConfigurationError(f"unknown sampling mode {mode!r}")
    L = cholesky_spd(sigma)
    m = L.shape[0]
    steps = 1 if mode == "constant" else N
    z = rng.normals(seed, np.arange(K), steps * m).reshape(K, steps, m)
    eps = z @ L.T
    if mode == "constant":
        eps = np.repeat(eps, N, axis=1)
    return PerturbationSet(eps, int(seed), mode)


def compute_weights(costs, lambda_: float) -> np.ndarray:
    """Softmin importance weights with the minimum cost subtracted first.

    ``+inf`` costs (failed rollouts) get zero weight; NaN is rejected.
    """
    s = np.asarray(costs, dtype=float).ravel()
    if s.size == 0:
        raise ValueError("empty cost list")
    if np.isnan(s).any():
        raise DataError("NaN cost")
    if not lambda_ > 0:
        raise ValueError("lambda must be positive")
    rho = s.min()
    if not np.isfinite(rho):
        raise DataError("no finite cost in batch")
    w = np.exp(-(s - rho) / lambda_)
    return w / w.sum()


def update_control(inputs, eps, weights) -> np.ndarray:
    """``u*_i = u_i + sum_k w_k eps_i^(k)`` for every step ``i``."""
    u = np.asarray(inputs, dtype=float)
    e = eps.eps if isinstance(eps, PerturbationSet) else np.asarray(eps, dtype=float)
    w = np.asarray(weights, dtype=float).ravel()
    if u.ndim == 1:
        u = u[:, None]
    if e.ndim != 3 or e.shape[1:] != u.shape:
        raise ValueError(f"perturbations {e.shape} do not match plan {u.shape}")
    if w.shape[0] != e.shape[0]:
        raise ValueError(f"{w.shape[0]} weights for {e.shape[0]} perturbations")
    return u + np.tensordot(w, e, axes=1)


def running_cost_penalty(u_i, eps_i, sigma, lambda_: float) -> float:
    """``lambda * u_i^T Sigma^-1 eps_i``.

    Accumulated into the rollout cost during simulation. Summed over the
    horizon this reproduces the perturbation-dependent part of the
    likelihood-ratio term ``R(E_k)``; the remaining ``u^T Sigma^-1 u / 2`` part
    is identical for every rollout and cancels in the normalized weights.
    """
    L = cholesky_spd(sigma)
    u = np.atleast_1d(np.asarray(u_i, dtype=float))
    e = np.atleast_1d(np.asarray(eps_i, dtype=float))
    a = np.linalg.solve(L, u)
    b = np.linalg.solve(L, e)
    return float(lambda_ * a @ b)


def penalty_terms(plan: ControlPlan, eps: np.ndarray, mode: str = "per-step") -> np.ndarray:
    """Vectorized ``sum_i lambda u_i^T Sigma^-1 eps_i`` for each of K rollouts.

    In ``"constant"`` mode a rollout is one m-dimensional draw repeated over
    the horizon, so the likelihood-ratio correction is taken once, against
    the horizon-averaged input; summing it N times would overweight it N-fold
    and pull every update toward zero input.
    """
    total = plan.lambda_ * np.einsum("knm,nm->k", eps, plan.sigma_inv_inputs())
    return total / plan.horizon if mode == "constant" else total


def mppi_update(plan: ControlPlan, eps, costs) -> np.ndarray:
    w = compute_weights(costs, plan.lambda_)
    return update_control(plan.inputs, eps, w)
