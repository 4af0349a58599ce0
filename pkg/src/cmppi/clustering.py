"""Clustered MPPI.

Rollouts are clustered with DBSCAN on (perturbation, cost) points; MPPI
averaging runs inside each cluster only, and the cluster plan with the lowest
noiseless cost wins. Within a cluster the importance weights are just the
baseline softmin weights restricted to that cluster's costs, so clustering
needs no extra cost evaluations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .dynamics import CostSpec, RolloutBatch, simulate, trajectory_cost
from .errors import ConfigurationError
from .mppi import ControlPlan, compute_weights, update_control

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DbscanParams:
    eps_radius: float = 0.5
    min_pts: int = 5
    standardize: bool = True

    def __post_init__(self):
        if not self.eps_radius > 0:
            raise ConfigurationError("eps_radius must be positive")
        if int(self.min_pts) < 1:
            raise ConfigurationError("min_pts must be >= 1")


@dataclass(frozen=True)
class ClusterSet:
    labels: np.ndarray  # cluster id per point, -1 for outliers
    count: int

    def members(self, m: int) -> np.ndarray:
        return np.flatnonzero(self.labels == m)

    @property
    def outliers(self) -> np.ndarray:
        return np.flatnonzero(self.labels < 0)


def standardize(points) -> np.ndarray:
    """Per-column z-score; constant columns map to zero."""
    X = np.asarray(points, dtype=float)
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    scale = np.where(sd > 0, sd, 1.0)
    return np.where(sd > 0, (X - mu) / scale, 0.0)


def rollout_points(rollouts: RolloutBatch) -> np.ndarray:
    """Feature rows ``[flattened perturbations..., state cost]``.

    With constant-over-horizon sampling the perturbation sequence is one
    value repeated N times, so only the first step is kept; repeating it
    would weight the perturbation N times more than the cost.
    """
    eps = rollouts.perturbations
    if rollouts.mode == "constant":
        eps = eps[:, :1]
    flat = eps.reshape(eps.shape[0], -1)
    return np.column_stack([flat, rollouts.state_costs])


def dbscan(points, params: DbscanParams = DbscanParams()) -> ClusterSet:
    """Classical DBSCAN with Euclidean distance and inclusive radius.

    A point is core when its closed ``eps_radius`` ball holds at least
    ``min_pts`` points, itself included. Cluster ids follow the index of each
    cluster's first core point, and a border point reachable from several
    clusters joins the lowest id; the result is what a sequential scan with
    breadth-first expansion produces.
    """
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    K = X.shape[0]
    if K == 0:
        return ClusterSet(np.zeros(0, dtype=int), 0)
    if params.standardize:
        X = standardize(X)
    pairs = cKDTree(X).query_pairs(params.eps_radius, output_type="ndarray")
    i, j = (pairs[:, 0], pairs[:, 1]) if len(pairs) else (np.zeros(0, int), np.zeros(0, int))
    degree = 1 + np.bincount(i, minlength=K) + np.bincount(j, minlength=K)
    core = degree >= params.min_pts

    labels = np.full(K, -1, dtype=int)
    core_idx = np.flatnonzero(core)
    if core_idx.size == 0:
        return ClusterSet(labels, 0)
    both = core[i] & core[j]
    pos = np.full(K, -1)
    pos[core_idx] = np.arange(core_idx.size)
    M, comp = connected_components(_edge_graph(pos[i[both]], pos[j[both]], core_idx.size),
                                   directed=True, connection="weak")
    # renumber components by their lowest core index (scan order)
    first = np.full(M, K)
    np.minimum.at(first, comp, core_idx)
    rank = np.empty(M, dtype=int)
    rank[np.argsort(first, kind="stable")] = np.arange(M)
    labels[core_idx] = rank[comp]

    # border points: non-core with at least one core neighbour
    a = np.concatenate([i, j])
    b = np.concatenate([j, i])
    edge = core[a] & ~core[b]
    if edge.any():
        border_label = np.full(K, M)
        np.minimum.at(border_label, b[edge], labels[a[edge]])
        hit = border_label < M
        labels[hit] = border_label[hit]
    return ClusterSet(labels, int(M))


def _edge_graph(rows, cols, n: int) -> csr_matrix:
    """CSR adjacency grouped by row without sorting columns; the stable
    argsort on int16 keys is a radix sort, far cheaper than a comparison sort."""
    key = rows.astype(np.int16) if n <= np.iinfo(np.int16).max else rows
    order = np.argsort(key, kind="stable")
    indptr = np.zeros(n + 1, dtype=np.int32)
    np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
    return csr_matrix((np.ones(rows.size), cols[order].astype(np.int32), indptr), shape=(n, n))


def cluster_weights(costs, lambda_: float) -> np.ndarray:
    """Importance weights of one cluster: softmin over its own costs."""
    c = np.asarray(costs, dtype=float).ravel()
    if c.size == 0:
        raise ValueError("empty cluster")
    return compute_weights(c, lambda_)


@dataclass
class ClusterDiagnostics:
    labels: np.ndarray
    count: int
    candidate_inputs: np.ndarray  # (M, N, m)
    candidate_costs: np.ndarray  # (M,)
    chosen: int
    fallback: bool
    cluster_sizes: list

    @property
    def max_cluster_fraction(self) -> float:
        n = len(self.labels)
        return max(self.cluster_sizes) / n if self.cluster_sizes and n else 0.0

    def to_dict(self) -> dict:
        return {
            "labels": self.labels.tolist(),
            "clusters": self.count,
            "cluster_sizes": list(self.cluster_sizes),
            "candidate_costs": [_jsonable(c) for c in self.candidate_costs],
            "chosen": self.chosen,
            "fallback": self.fallback,
            "max_cluster_fraction": self.max_cluster_fraction,
        }


def _jsonable(x: float):
    x = float(x)
    return x if np.isfinite(x) else None


def clustered_mppi(plan: ControlPlan, rollouts: RolloutBatch, params: DbscanParams,
                   nominal_cost: CostSpec, dynamics, x0):
    """Pick the best per-cluster MPPI plan.

    Returns ``(inputs, diagnostics)``. Candidates are scored by a noiseless
    rollout through ``nominal_cost`` (state cost only). If DBSCAN labels
    everything as an outlier, falls back to baseline MPPI over all rollouts.
    """
    K = len(rollouts)
    if K < 1:
        raise ValueError("need at least one rollout")
    ok = ~rollouts.failed
    labels = np.full(K, -1, dtype=int)
    M = 0
    if ok.any():
        cs = dbscan(rollout_points(rollouts.subset(ok)), params)
        labels[ok] = cs.labels
        M = cs.count

    eps, costs = rollouts.perturbations, rollouts.costs
    if M == 0:
        log.warning("dbscan found no clusters among %d rollouts; using baseline MPPI", K)
        candidates = [update_control(plan.inputs, eps, compute_weights(costs, plan.lambda_))]
        sizes = []
        fallback = True
    else:
        candidates = []
        sizes = []
        for m in range(M):
            idx = np.flatnonzero(labels == m)
            w = cluster_weights(costs[idx], plan.lambda_)
            candidates.append(update_control(plan.inputs, eps[idx], w))
            sizes.append(int(idx.size))
        fallback = False
    cand = np.stack(candidates)
    with np.errstate(invalid="ignore", over="ignore"):
        cand_costs = trajectory_cost(simulate(dynamics, x0, cand), nominal_cost)
    cand_costs = np.where(np.isnan(cand_costs), np.inf, cand_costs)
    chosen = int(np.argmin(cand_costs))
    diag = ClusterDiagnostics(labels, M, cand, cand_costs, chosen, fallback, sizes)
    return cand[chosen], diag
