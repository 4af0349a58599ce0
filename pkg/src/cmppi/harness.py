"""Closed-loop episodes, batch experiments and result export."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from contextlib import nullcontext
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .clustering import DbscanParams, clustered_mppi
from .dynamics import CostSpec, DubinsModel, NoiseProfile, batch_rollout, dubins_step, simulate, trajectory_cost
from .environments import (
    FIELD_BOUNDS,
    FOREST_BOUNDS,
    DynamicField,
    StaticMap,
    generate_forest,
    goal_distance_cost,
    sample_dynamic_field,
    sample_start_goal,
    static_collision,
)
from .errors import ConfigurationError
from .mppi import ControlPlan, mppi_update, sample_perturbations
from .obstacles import AugmentedCostSpec, ObstacleForecast, ObstacleModel, dc_mppi

log = logging.getLogger(__name__)

ALGORITHMS = ("baseline", "clustered", "dc-mppi")
ENVIRONMENTS = ("forest", "dynamic", "head-on")
BELIEFS = ("population", "per-obstacle")
OUTCOMES = ("reached-goal", "collided", "timeout")


@dataclass
class ExperimentConfig:
    algorithm: str = "clustered"
    environment: str = "forest"
    K: int = 500
    N: int = 50
    dt: float = 0.1
    lambda_: float = 1.0
    alpha: float = 1000.0
    beta: float = 10.0
    sigma: float = 0.1
    P: int = 25
    dbscan_eps: float = 0.5
    dbscan_min_pts: int = 5
    sampling_mode: str = "constant"
    noise: str = "control"
    process_sigma: list = field(default_factory=lambda: [0.005, 0.005, 0.002])
    v: float = 1.0
    r_min: float = 1.0
    goal_radius: float = 1.0
    agent_radius: float = 0.0
    forest_bounds: list = field(default_factory=lambda: list(FOREST_BOUNDS))
    forest_obstacles: int = 30
    forest_size: list = field(default_factory=lambda: [0.5, 2.5])
    start_clearance: float = 2.0
    min_separation: float = 10.0
    field_bounds: list = field(default_factory=lambda: list(FIELD_BOUNDS))
    field_obstacles: int = 100
    obstacle_radius: float = 1.0
    planning_margin: float = 0.5
    obstacle_v_range: list = field(default_factory=lambda: [0.5, 1.5])
    obstacle_omega_range: list = field(default_factory=lambda: [-0.5, 0.5])
    headon_distance: float = 12.0
    theta_mode: str = "uniform"
    belief: str = "population"
    max_steps: int | None = None
    seed: int = 0
    runs: int = 1

    # JSON spelling differs only for the Python keyword
    _ALIASES = {"lambda": "lambda_"}

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"algorithm must be one of {ALGORITHMS}")
        if self.environment not in ENVIRONMENTS:
            raise ConfigurationError(f"environment must be one of {ENVIRONMENTS}")
        if self.K < 1 or self.N < 1 or self.P < 1 or self.runs < 1:
            raise ConfigurationError("K, N, P and runs must be >= 1")
        for name in ("dt", "lambda_", "alpha", "beta", "sigma", "v", "r_min", "goal_radius", "dbscan_eps"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.sampling_mode not in ("constant", "per-step"):
            raise ConfigurationError("sampling_mode must be 'constant' or 'per-step'")
        if self.planning_margin < 0 or self.agent_radius < 0:
            raise ConfigurationError("planning_margin and agent_radius must be >= 0")
        if self.belief not in BELIEFS:
            raise ConfigurationError(f"belief must be one of {BELIEFS}")
        NoiseProfile(self.noise, np.diag(self.process_sigma))
        DbscanParams(self.dbscan_eps, self.dbscan_min_pts)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        kw = {}
        for k, v in d.items():
            key = cls._ALIASES.get(k, k)
            if key not in names:
                raise ConfigurationError(f"unknown config key {k!r}")
            kw[key] = v
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigurationError("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    @property
    def model(self) -> DubinsModel:
        return DubinsModel(self.v, self.r_min, self.dt)

    @property
    def profile(self) -> NoiseProfile:
        return NoiseProfile(self.noise, np.diag(self.process_sigma))

    @property
    def dbscan(self) -> DbscanParams:
        return DbscanParams(self.dbscan_eps, int(self.dbscan_min_pts))

    @property
    def sigma_matrix(self) -> np.ndarray:
        return np.array([[float(self.sigma)]])

    def obstacle_belief(self, v=None, omega=None):
        """Gaussian (mean, covariance) over obstacle (v, omega).

        The covariance always matches the uniform ranges the field is drawn
        from. Under ``belief="population"`` the mean is the centre of those
        ranges; under ``"per-obstacle"`` it is the given obstacle's own
        ``(v, omega)``, standing in for an external velocity estimate.
        """
        lo_v, hi_v = self.obstacle_v_range
        lo_w, hi_w = self.obstacle_omega_range
        mean = np.array([(lo_v + hi_v) / 2, (lo_w + hi_w) / 2])
        if self.belief == "per-obstacle" and v is not None:
            mean = np.array([float(v), float(omega)])
        cov = np.diag([(hi_v - lo_v) ** 2 / 12, (hi_w - lo_w) ** 2 / 12])
        return mean, cov

    @property
    def planning_radius(self) -> float:
        """Collision radius the planners' obstacle costs use."""
        return self.obstacle_radius + self.agent_radius + self.planning_margin

    def obstacle_models(self, field_, states, idx):
        out = []
        for j in idx:
            mean, cov = self.obstacle_belief(field_.v[j], field_.omega[j])
            out.append(ObstacleModel(states[j], mean, cov, self.planning_radius, self.dt, int(j)))
        return out


@dataclass
class Scenario:
    smap: StaticMap
    field: DynamicField | None
    start: np.ndarray
    goal: np.ndarray
    model: DubinsModel
    N: int

    @property
    def timeout_steps(self) -> int:
        # three laps of the workspace boundary at full speed
        return int(math.ceil(3 * self.smap.perimeter / self.model.v / self.model.dt))


def build_scenario(config: ExperimentConfig, seed: int) -> Scenario:
    model = config.model
    if config.environment == "forest":
        smap = generate_forest(seed, tuple(config.forest_bounds), config.forest_obstacles,
                               tuple(config.forest_size), config.agent_radius)
        start, goal = sample_start_goal(smap, seed, config.start_clearance, config.min_separation)
        return Scenario(smap, None, start, goal, model, config.N)

    smap = StaticMap(tuple(config.field_bounds), seed=seed)
    if config.environment == "head-on":
        # one obstacle on the straight line between start and goal, driving at the agent
        gen = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x4E])
        x0, y0, x1, y1 = config.field_bounds
        yc = (y0 + y1) / 2
        start = np.array([x0 + 10.0, yc, 0.0])
        goal = np.array([start[0] + 2.5 * config.headon_distance, yc])
        ob = np.array([[start[0] + config.headon_distance, yc, np.pi]])
        v = gen.uniform(*config.obstacle_v_range, 1)
        field_ = DynamicField(ob, v, np.zeros(1), config.obstacle_radius, tuple(config.field_bounds), seed)
        return Scenario(smap, field_, start, goal, model, config.N)

    field_ = sample_dynamic_field(seed, config.field_obstacles, tuple(config.field_bounds),
                                  tuple(config.obstacle_v_range), tuple(config.obstacle_omega_range),
                                  config.obstacle_radius)
    gen = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x57])
    x0, y0, x1, y1 = config.field_bounds
    clear = config.obstacle_radius + config.start_clearance
    for _ in range(10_000):
        start = np.array([gen.uniform(x0 + 5, x0 + 15), gen.uniform(y0 + 10, y1 - 10)])
        if field_.count == 0 or np.min(np.hypot(*(field_.states[:, :2] - start).T)) > clear:
            break
    goal = np.array([gen.uniform(x1 - 15, x1 - 5), gen.uniform(y0 + 10, y1 - 10)])
    heading = float(np.arctan2(goal[1] - start[1], goal[0] - start[0]))
    return Scenario(smap, field_, np.array([start[0], start[1], heading]), goal, model, config.N)


def base_cost(config: ExperimentConfig, scen: Scenario) -> CostSpec:
    goal, smap, alpha = scen.goal, scen.smap, config.alpha

    def psi(states, i):
        return goal_distance_cost(states, goal, smap, alpha)

    def phi(states):
        return goal_distance_cost(states, goal, smap, alpha)

    return CostSpec(psi, phi, alpha, time_invariant=True)


def _advance_obstacles(states, v, omega, dt):
    from .dynamics import arc_step
    return arc_step(states, v, omega, dt)


class Planner:
    """Receding-horizon wrapper holding the warm-started plan."""

    def __init__(self, config: ExperimentConfig, scen: Scenario, seed: int):
        self.config = config
        self.scen = scen
        self.seed = seed
        self.model = scen.model
        self.inputs = np.zeros((config.N, 1))  # drive straight
        self.cost = base_cost(config, scen)
        self.reach_static = (self.model.v * config.N * config.dt + config.planning_radius + 1.0)
        hi_v = max(abs(x) for x in config.obstacle_v_range)
        self.reach_dynamic = (self.model.v + 2 * hi_v) * config.N * config.dt + config.planning_radius + 1.0

    def _relevant(self, x, obs_states, reach):
        if obs_states is None or len(obs_states) == 0:
            return np.zeros(0, dtype=int)
        d = np.hypot(obs_states[:, 0] - x[0], obs_states[:, 1] - x[1])
        return np.flatnonzero(d <= reach)

    def plan(self, x, t: int, obs_states=None):
        cfg = self.config
        seed = rng.derive_seed(self.seed, t)
        plan = ControlPlan(self.inputs, cfg.sigma_matrix, cfg.lambda_)
        cost = self.cost
        info = {}
        if cfg.algorithm == "dc-mppi" and obs_states is not None:
            idx = self._relevant(x, obs_states, self.reach_dynamic)
            models = cfg.obstacle_models(self.scen.field, obs_states, idx)
            new, diag = dc_mppi(plan, x, models, cfg.P, cfg.K, cfg.dbscan, cost, seed, self.model,
                                cfg.beta, cfg.sampling_mode, cfg.theta_mode)
            info["clusters"] = diag.clusters
            info["forecasts"] = diag.forecasts
        else:
            if obs_states is not None:
                # static-world assumption: each obstacle frozen where it is now
                idx = self._relevant(x, obs_states, self.reach_static)
                frozen = [ObstacleForecast(np.repeat(obs_states[j][None, None, :3], cfg.N + 1, axis=1),
                                           np.ones(1), cfg.planning_radius, int(j)) for j in idx]
                cost = AugmentedCostSpec(cost, frozen, cfg.beta)
            eps = sample_perturbations(cfg.K, cfg.N, cfg.sigma_matrix, cfg.sampling_mode, seed)
            batch = batch_rollout(self.model, x, plan, eps, cost)
            if cfg.algorithm == "baseline":
                new = mppi_update(plan, eps, batch.costs)
            else:
                new, diag = clustered_mppi(plan, batch, cfg.dbscan, cost, self.model, x)
                info["clusters"] = diag
        new = self.model.clamp(new)
        u0 = float(new[0, 0])
        # warm start: shift by one step, repeat the final input
        self.inputs = np.concatenate([new[1:], new[-1:]], axis=0)
        return u0, new, info


@dataclass
class EpisodeResult:
    seed: int
    algorithm: str
    outcome: str
    steps: int
    final_distance: float
    step_ms: float = 0.0  # measured; excluded from determinism checks
    error: str = ""
    log_ref: str = ""

    def record(self) -> dict:
        """Deterministic fields only."""
        return {"algorithm": self.algorithm, "seed": self.seed, "outcome": self.outcome,
                "steps": self.steps, "final_distance": round(self.final_distance, 9), "error": self.error}


def run_episode(config: ExperimentConfig, seed: int | None = None, keep_log: bool = False,
                scenario: Scenario | None = None):
    """Run one closed-loop episode. Returns EpisodeResult, or
    ``(EpisodeResult, log_dict)`` when ``keep_log`` is set.

    ``scenario`` replaces the one the config would generate for ``seed``.
    """
    seed = config.seed if seed is None else int(seed)
    scen = build_scenario(config, seed) if scenario is None else scenario
    model, profile = scen.model, config.profile
    planner = Planner(config, scen, seed)
    max_steps = config.max_steps if config.max_steps is not None else scen.timeout_steps
    cost = base_cost(config, scen)

    x = scen.start.copy()
    obs = scen.field.states.copy() if scen.field is not None else None
    states, inputs, diags = [x.copy()], [], []
    forecasts = None
    times = []
    outcome, error = "timeout", ""
    t = 0
    for t in range(max_steps):
        t0 = time.perf_counter()
        try:
            u0, _, info = planner.plan(x, t, obs)
        except Exception as exc:  # planner failure ends the episode
            error = f"planner failure at step {t}: {exc}"
            log.warning(error)
            break
        times.append(time.perf_counter() - t0)
        if keep_log:
            if "clusters" in info:
                diags.append(info["clusters"].to_dict())
            if forecasts is None and info.get("forecasts") is not None:
                forecasts = [f.to_dict() for f in info["forecasts"]]

        omega = u0
        if profile.control_noise:
            omega += float(np.sqrt(config.sigma)) * rng.normals(rng.derive_seed(seed, t, 1), [0], 1)[0, 0]
        x = dubins_step(x, omega, model)
        if profile.process_noise:
            x = x + profile.process_draw(rng.derive_seed(seed, t, 2), 0)
        inputs.append(omega)
        states.append(x.copy())
        if obs is not None:
            obs = _advance_obstacles(obs, scen.field.v, scen.field.omega, model.dt)

        hit = bool(static_collision(x, scen.smap))
        if obs is not None and len(obs):
            hit |= bool(np.min(np.hypot(obs[:, 0] - x[0], obs[:, 1] - x[1])) <= scen.field.radius + config.agent_radius)
        if hit:
            outcome = "collided"
            break
        if np.hypot(x[0] - scen.goal[0], x[1] - scen.goal[1]) <= config.goal_radius:
            outcome = "reached-goal"
            break
    steps = len(inputs)
    result = EpisodeResult(seed, config.algorithm, outcome, steps,
                           float(np.hypot(x[0] - scen.goal[0], x[1] - scen.goal[1])),
                           1000.0 * float(np.mean(times)) if times else 0.0, error)
    if not keep_log:
        return result
    S = np.array(states)
    run_cost = cost.running(S, 0)
    episode_log = {
        "version": 1,
        "config": config.to_dict(),
        "seed": seed,
        "result": result.record(),
        "start": scen.start.tolist(),
        "goal": scen.goal.tolist(),
        "environment": (scen.field.to_dict() if scen.field is not None else scen.smap.to_dict()),
        "trajectory": [{"step": i, "x": s[0], "y": s[1], "theta": s[2],
                        "u": (inputs[i] if i < steps else None), "cost": float(c)}
                       for i, (s, c) in enumerate(zip(S.tolist(), run_cost))],
        "clusters": diags,
        "forecasts": forecasts or [],
    }
    return result, episode_log


@dataclass
class AggregateStats:
    runs: int
    collisions: int
    timeouts: int
    successes: int
    failure_pct: float
    mean_step_ms: float
    by_algorithm: dict = field(default_factory=dict)

    @classmethod
    def from_results(cls, results, breakdown: bool = True) -> "AggregateStats":
        results = list(results)
        n = len(results)
        col = sum(r.outcome == "collided" for r in results)
        to = sum(r.outcome == "timeout" for r in results)
        ok = sum(r.outcome == "reached-goal" for r in results)
        ms = [r.step_ms for r in results if r.steps]
        by = {}
        if breakdown:
            for alg in dict.fromkeys(r.algorithm for r in results):
                by[alg] = cls.from_results([r for r in results if r.algorithm == alg], breakdown=False)
        return cls(n, col, to, ok, 100.0 * (col + to) / n if n else 0.0,
                   float(np.mean(ms)) if ms else 0.0, by)

    def counts(self) -> dict:
        """Deterministic summary (no timing)."""
        d = {"runs": self.runs, "collisions": self.collisions, "timeouts": self.timeouts,
             "successes": self.successes, "failure_pct": round(self.failure_pct, 6)}
        if self.by_algorithm:
            d["by_algorithm"] = {k: v.counts() for k, v in self.by_algorithm.items()}
        return d


def _episode_task(args):
    cfg_dict, alg, seed = args
    cfg = ExperimentConfig.from_dict(cfg_dict).replace(algorithm=alg)
    try:
        return run_episode(cfg, seed)
    except Exception as exc:  # recorded, never aborts the batch
        return EpisodeResult(seed, alg, "timeout", 0, float("nan"), 0.0, f"episode error: {exc}")


def run_batch(config: ExperimentConfig, runs: int | None = None, out_dir=None, threads: int = 1,
              algorithms=None) -> tuple[AggregateStats, list]:
    """Episodes over seeds ``seed .. seed+runs-1`` for each algorithm.

    Results are ordered by (algorithm, seed) whatever the worker count.
    Writes ``episodes.csv``, ``summary.json`` (both deterministic) and
    ``timing.json`` when ``out_dir`` is given.
    """
    runs = config.runs if runs is None else int(runs)
    if runs < 1:
        raise ConfigurationError("runs must be >= 1")
    algorithms = list(algorithms or [config.algorithm])
    for a in algorithms:
        if a not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {a!r}")
    cfg_dict = config.to_dict()
    tasks = [(cfg_dict, a, config.seed + i) for a in algorithms for i in range(runs)]
    results = []
    with ProcessPoolExecutor(max_workers=threads) if threads > 1 else nullcontext() as ex:
        for r in (ex.map(_episode_task, tasks) if ex else map(_episode_task, tasks)):
            results.append(r)
            log.info("%d/%d %s seed %d: %s", len(results), len(tasks), r.algorithm, r.seed, r.outcome)
    stats = AggregateStats.from_results(results)
    if out_dir is not None:
        write_batch(out_dir, config, stats, results)
    return stats, results


def write_batch(out_dir, config, stats: AggregateStats, results):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "episodes.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["algorithm", "seed", "outcome", "steps", "final_distance", "error"],
                           lineterminator="\n")
        w.writeheader()
        for r in results:
            w.writerow(r.record())
    summary = {"config": config.to_dict(), "stats": stats.counts()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    timing = {"mean_step_ms": stats.mean_step_ms,
              "by_algorithm": {k: v.mean_step_ms for k, v in stats.by_algorithm.items()},
              "episodes": [{"algorithm": r.algorithm, "seed": r.seed, "step_ms": r.step_ms} for r in results]}
    (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")


def value_slice(config: ExperimentConfig, seed: int | None = None, dev_min: float = -1.0,
                dev_max: float = 1.0, steps: int = 41) -> list[dict]:
    """Cost and value of constant turning-rate deviations from the straight
    reference at the scenario's first step.

    ``cost`` is what baseline/clustered see (obstacles frozen); ``cost_dc``
    adds the sampled obstacle forecasts (dynamic environments only).
    Values are ``exp(-(J - min J) / lambda)``.
    """
    seed = config.seed if seed is None else int(seed)
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    scen = build_scenario(config, seed)
    devs = np.linspace(dev_min, dev_max, steps)
    controls = np.repeat(devs[:, None, None], config.N, axis=1)
    states = simulate(scen.model, scen.start, controls)
    base = base_cost(config, scen)
    cols = {}
    if scen.field is None:
        cols["cost"] = trajectory_cost(states, base)
    else:
        obs = scen.field.states
        frozen = [ObstacleForecast(np.repeat(o[None, None, :3], config.N + 1, axis=1), np.ones(1),
                                   config.planning_radius, j) for j, o in enumerate(obs)]
        cols["cost"] = trajectory_cost(states, AugmentedCostSpec(base, frozen, config.beta))
        from .obstacles import simulate_obstacles
        models = config.obstacle_models(scen.field, obs, range(len(obs)))
        fc = simulate_obstacles(models, config.P, config.N, rng.derive_seed(rng.derive_seed(seed, 0), 0x0B5),
                                config.theta_mode)
        cols["cost_dc"] = trajectory_cost(states, AugmentedCostSpec(base, fc, config.beta))
    rows = []
    for k, d in enumerate(devs):
        row = {"deviation": float(d)}
        for name, c in cols.items():
            row[name] = float(c[k])
            row["value" + name[4:]] = float(np.exp(-(c[k] - c.min()) / config.lambda_))
        rows.append(row)
    return rows


def _write_table(rows, path: Path, fmt: str):
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            if rows:
                w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
                w.writeheader()
                w.writerows(rows)
    else:
        path.write_text(json.dumps(rows, indent=2) + "\n")


TRAJECTORY_FIELDS = ["step", "x", "y", "theta", "u", "cost"]


def export_run(log_path, fmt: str = "csv", out_dir=None) -> list[Path]:
    """Write trajectory table, cluster diagnostics, obstacle forecasts and a
    value-slice table for a logged episode."""
    if fmt not in ("csv", "json"):
        raise ConfigurationError(f"unknown export format {fmt!r}")
    p = Path(log_path)
    if not p.is_file():
        raise LookupError(f"no episode log at {p}")
    data = json.loads(p.read_text())
    out = Path(out_dir) if out_dir is not None else p.parent
    out.mkdir(parents=True, exist_ok=True)
    stem = p.stem
    written = []

    traj = out / f"{stem}.trajectory.{fmt}"
    if fmt == "csv":
        with open(traj, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TRAJECTORY_FIELDS, lineterminator="\n")
            w.writeheader()
            for row in data["trajectory"]:
                w.writerow({k: ("" if row[k] is None else row[k]) for k in TRAJECTORY_FIELDS})
    else:
        traj.write_text(json.dumps(data["trajectory"], indent=2) + "\n")
    written.append(traj)

    clusters = out / f"{stem}.clusters.json"
    clusters.write_text(json.dumps(data.get("clusters", []), indent=1) + "\n")
    forecasts = out / f"{stem}.forecasts.json"
    forecasts.write_text(json.dumps(data.get("forecasts", []), indent=1) + "\n")
    written += [clusters, forecasts]

    cfg = ExperimentConfig.from_dict(data["config"])
    vs = out / f"{stem}.value_slice.{fmt}"
    _write_table(value_slice(cfg, data["seed"]), vs, fmt)
    written.append(vs)
    return written


def save_log(episode_log: dict, path) -> Path:
    p = Path(path)
    if p.parent and not p.parent.exists():
        os.makedirs(p.parent, exist_ok=True)
    p.write_text(json.dumps(episode_log) + "\n")
    return p
