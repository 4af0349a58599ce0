"""Sampling-based trajectory optimization: baseline MPPI, clustered MPPI and
obstacle-forecast (DC) MPPI, plus a deterministic simulation harness."""

from .errors import ConfigurationError, DataError
from .mppi import (
    ControlPlan,
    PerturbationSet,
    compute_weights,
    running_cost_penalty,
    sample_perturbations,
    update_control,
)
from .dynamics import (
    CostSpec,
    DubinsModel,
    NoiseProfile,
    Rollout,
    RolloutBatch,
    batch_rollout,
    dubins_step,
    rollout,
)
from .clustering import (
    ClusterSet,
    DbscanParams,
    cluster_weights,
    clustered_mppi,
    dbscan,
)
from .obstacles import (
    AugmentedCostSpec,
    ObstacleForecast,
    ObstacleModel,
    collision_indicator,
    dc_mppi,
    simulate_obstacles,
)

__version__ = "0.1.0"
