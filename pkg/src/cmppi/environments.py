"""Random forest and dynamic obstacle field generators, collision checks and
the goal-distance cost."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, GenerationError

SCHEMA_VERSION = 1

FOREST_BOUNDS = (0.0, 0.0, 50.0, 50.0)
FIELD_BOUNDS = (0.0, 0.0, 75.0, 50.0)


@dataclass(frozen=True)
class StaticMap:
    """Axis-aligned workspace with circle and convex-polygon obstacles.

    Obstacles are stored already inflated by ``agent_radius`` so collision
    checks treat the agent as a point.
    """

    bounds: tuple  # (xmin, ymin, xmax, ymax)
    circles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))  # (C, 3): x, y, r
    polygons: tuple = ()  # each (V, 2), counter-clockwise
    seed: int | None = None
    agent_radius: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))
        object.__setattr__(self, "circles", np.asarray(self.circles, dtype=float).reshape(-1, 3))
        polys = tuple(_ccw(np.asarray(p, dtype=float)) for p in self.polygons)
        object.__setattr__(self, "polygons", polys)
        # bounding circles for the polygon prefilter
        if polys:
            centers = np.array([p.mean(axis=0) for p in polys])
            radii = np.array([np.max(np.hypot(*(p - c).T)) for p, c in zip(polys, centers)])
        else:
            centers, radii = np.zeros((0, 2)), np.zeros(0)
        object.__setattr__(self, "_poly_centers", centers)
        object.__setattr__(self, "_poly_radii", radii)
        # vertices padded to a common count by repeating the last one; the
        # resulting zero-length edges never reject a point
        vmax = max((len(p) for p in polys), default=0)
        padded = np.array([np.vstack([p, np.repeat(p[-1:], vmax - len(p), axis=0)]) for p in polys]).reshape(len(polys), vmax, 2)
        object.__setattr__(self, "_poly_vertices", padded)
        object.__setattr__(self, "_grid", self._build_grid())
        object.__setattr__(self, "_raster", self._build_raster())

    def _build_grid(self, cell: float = 1.0):
        """Uniform grid over the bounds; each cell lists the obstacles whose
        bounding box (plus agent radius) touches it, in CSR form."""
        x0, y0, x1, y1 = self.bounds
        nx = max(1, int(np.ceil((x1 - x0) / cell)))
        ny = max(1, int(np.ceil((y1 - y0) / cell)))
        ar = self.agent_radius
        centers = np.vstack([self.circles[:, :2], self._poly_centers])
        reach = np.concatenate([self.circles[:, 2], self._poly_radii + ar])
        cells, ids = [], []
        for k, (c, r) in enumerate(zip(centers, reach)):
            ix = np.arange(max(0, int((c[0] - r - x0) // cell)), min(nx, int((c[0] + r - x0) // cell) + 1))
            iy = np.arange(max(0, int((c[1] - r - y0) // cell)), min(ny, int((c[1] + r - y0) // cell) + 1))
            flat = (iy[:, None] * nx + ix[None, :]).ravel()
            cells.append(flat)
            ids.append(np.full(flat.size, k))
        cells = np.concatenate(cells) if cells else np.zeros(0, dtype=int)
        ids = np.concatenate(ids) if ids else np.zeros(0, dtype=int)
        order = np.argsort(cells, kind="stable")
        counts = np.bincount(cells, minlength=nx * ny)
        start = np.concatenate([[0], np.cumsum(counts)[:-1]])
        return cell, nx, ny, counts, start, ids[order]

    def _build_raster(self, cell: float = 0.1):
        """Fine cell status: 0 free, 1 certainly occupied, 2 needs an exact test.

        The grid carries a one-cell border of status 2 so out-of-range and
        non-finite points fall through to the exact path. A cell is occupied
        when its corners lie inside one obstacle shrunk by a small margin
        (obstacles are convex), and free when no obstacle bounding box comes
        within a cell of it; the slack absorbs rounding in cell assignment.
        """
        x0, y0, x1, y1 = self.bounds
        nx = max(1, int(np.ceil((x1 - x0) / cell)))
        ny = max(1, int(np.ceil((y1 - y0) / cell)))
        status = np.full((ny + 2, nx + 2), 2, dtype=np.uint8)
        inner = status[1:-1, 1:-1]
        inner[:] = 0
        full = np.zeros((ny, nx), dtype=bool)
        margin = 1e-9
        C = len(self.circles)
        centers = np.vstack([self.circles[:, :2], self._poly_centers])
        reach = np.concatenate([self.circles[:, 2], self._poly_radii + self.agent_radius])
        for k, (c, r) in enumerate(zip(centers, reach)):
            i0 = max(0, int((c[0] - r - x0) // cell) - 1)
            i1 = min(nx, int((c[0] + r - x0) // cell) + 2)
            j0 = max(0, int((c[1] - r - y0) // cell) - 1)
            j1 = min(ny, int((c[1] + r - y0) // cell) + 2)
            if i0 >= i1 or j0 >= j1:
                continue
            inner[j0:j1, i0:i1] = 2
            px, py = np.meshgrid(x0 + cell * np.arange(i0, i1 + 1), y0 + cell * np.arange(j0, j1 + 1))
            if k < C:
                rr = self.circles[k, 2] - margin
                inside = (px - c[0]) ** 2 + (py - c[1]) ** 2 <= rr * rr if rr > 0 else np.zeros(px.shape, bool)
            else:
                poly = self.polygons[k - C]
                inside = np.ones(px.shape, dtype=bool)
                for a, d in zip(poly, np.roll(poly, -1, axis=0) - poly):
                    inside &= d[0] * (py - a[1]) - d[1] * (px - a[0]) >= margin * np.hypot(*d)
            full[j0:j1, i0:i1] |= inside[:-1, :-1] & inside[1:, :-1] & inside[:-1, 1:] & inside[1:, 1:]
        inner[full] = 1
        return cell, nx + 2, ny + 2, status.ravel()

    @property
    def obstacle_count(self) -> int:
        return len(self.circles) + len(self.polygons)

    @property
    def perimeter(self) -> float:
        x0, y0, x1, y1 = self.bounds
        return 2.0 * ((x1 - x0) + (y1 - y0))

    def inflated(self, extra: float) -> "StaticMap":
        """Copy with every obstacle grown by ``extra`` metres (walls unchanged)."""
        if extra == 0:
            return self
        c = self.circles.copy()
        c[:, 2] += extra
        return StaticMap(self.bounds, c, self.polygons, self.seed, self.agent_radius + extra)

    def to_dict(self) -> dict:
        obstacles = [{"type": "circle", "center": [c[0], c[1]], "radius": c[2]} for c in self.circles.tolist()]
        obstacles += [{"type": "polygon", "vertices": p.tolist()} for p in self.polygons]
        return {"version": SCHEMA_VERSION, "kind": "static-map", "bounds": list(self.bounds),
                "agent_radius": self.agent_radius, "seed": self.seed, "obstacles": obstacles}

    @classmethod
    def from_dict(cls, d: dict) -> "StaticMap":
        _check_header(d, "static-map")
        circles, polys = [], []
        for ob in d["obstacles"]:
            if ob["type"] == "circle":
                circles.append([*ob["center"], ob["radius"]])
            elif ob["type"] == "polygon":
                polys.append(ob["vertices"])
            else:
                raise ConfigurationError(f"unknown obstacle type {ob['type']!r}")
        return cls(tuple(d["bounds"]), np.array(circles).reshape(-1, 3), tuple(polys),
                   d.get("seed"), d.get("agent_radius", 0.0))


def _ccw(p: np.ndarray) -> np.ndarray:
    x, y = p[:, 0], p[:, 1]
    area2 = np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    return p if area2 >= 0 else p[::-1].copy()


def _check_header(d: dict, kind: str):
    if d.get("version") != SCHEMA_VERSION or d.get("kind") != kind:
        raise ConfigurationError(f"expected {kind} document version {SCHEMA_VERSION}")


def _random_convex_polygon(gen: np.random.Generator, center, radius: float) -> np.ndarray:
    n = int(gen.integers(5, 9))
    while True:
        ang = np.sort(gen.uniform(0.0, 2 * np.pi, n))
        gaps = np.diff(np.append(ang, ang[0] + 2 * np.pi))
        # keep the center inside so the shape is not a sliver
        if gaps.max() < 0.75 * np.pi:
            break
    return np.column_stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)])


def generate_forest(seed: int, bounds=FOREST_BOUNDS, obstacle_count: int = 30,
                    size_range=(0.5, 2.5), agent_radius: float = 0.0) -> StaticMap:
    """Random circles and 5-8 vertex convex polygons, roughly half each.

    Sizes are radii (circles) or circumradii (polygons) drawn uniformly from
    ``size_range``; every obstacle lies fully inside ``bounds``.
    """
    if obstacle_count < 0:
        raise ConfigurationError("obstacle_count must be >= 0")
    lo, hi = size_range
    if not 0 < lo <= hi:
        raise ConfigurationError("size_range must satisfy 0 < min <= max")
    x0, y0, x1, y1 = bounds
    if x1 - x0 <= 2 * hi or y1 - y0 <= 2 * hi:
        raise ConfigurationError("workspace too small for the obstacle sizes")
    gen = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0xF0])
    circles, polys = [], []
    for _ in range(obstacle_count):
        r = gen.uniform(lo, hi)
        c = (gen.uniform(x0 + r, x1 - r), gen.uniform(y0 + r, y1 - r))
        if gen.random() < 0.5:
            circles.append([c[0], c[1], r + agent_radius])
        else:
            poly = _random_convex_polygon(gen, c, r)
            polys.append(poly)
    return StaticMap(tuple(bounds), np.array(circles).reshape(-1, 3), tuple(polys), int(seed), agent_radius)


def _in_convex(poly: np.ndarray, pts: np.ndarray) -> np.ndarray:
    # inclusive: on-edge counts as inside
    a = poly
    b = np.roll(poly, -1, axis=0)
    ex = (b - a)[:, 0][None]
    ey = (b - a)[:, 1][None]
    cross = ex * (pts[:, 1:2] - a[:, 1][None]) - ey * (pts[:, 0:1] - a[:, 0][None])
    return np.all(cross >= 0, axis=1)


def _segment_distance(poly: np.ndarray, pts: np.ndarray) -> np.ndarray:
    a = poly[None]
    d = (np.roll(poly, -1, axis=0) - poly)[None]
    p = pts[:, None]
    t = np.clip(np.sum((p - a) * d, axis=-1) / np.maximum(np.sum(d * d, axis=-1), 1e-300), 0, 1)
    return np.min(np.hypot(*(p - a - t[..., None] * d).transpose(2, 0, 1)), axis=1)


def static_collision(x, smap: StaticMap) -> np.ndarray:
    """1 where the point is outside the bounds or inside (or on) an obstacle.

    ``x`` is any ``(..., >=2)`` array of states; returns an int array of shape
    ``x.shape[:-1]``.
    """
    s = np.asarray(x, dtype=float)
    shape = s.shape[:-1]
    x0, y0, x1, y1 = smap.bounds
    fcell, fnx, fny, status = smap._raster
    # raster lookup decides most points; NaN/inf land on the border
    # (fmax/fmin return the non-NaN operand)
    with np.errstate(invalid="ignore"):
        fx = np.fmin(np.fmax(np.floor((s[..., 0] - x0) / fcell), -1.0), fnx - 2).astype(np.intp) + 1
        fy = np.fmin(np.fmax(np.floor((s[..., 1] - y0) / fcell), -1.0), fny - 2).astype(np.intp) + 1
    st = status[(fy * fnx + fx).ravel()]
    hit = st == 1
    live = np.flatnonzero(st == 2)
    if live.size == 0:
        return hit.astype(int).reshape(shape)
    p = s.reshape(-1, s.shape[-1])[live, :2]
    finite = np.isfinite(p).all(axis=1)
    pf = np.where(finite[:, None], p, x0 - 1.0)
    out = ~finite | (pf[:, 0] < x0) | (pf[:, 0] > x1) | (pf[:, 1] < y0) | (pf[:, 1] > y1)
    hit[live[out]] = True
    live, pf = live[~out], pf[~out]
    if smap.obstacle_count == 0 or live.size == 0:
        return hit.astype(int).reshape(shape)

    cell, nx, ny, counts, start, ids = smap._grid
    ix = np.minimum(((pf[:, 0] - x0) // cell).astype(int), nx - 1)
    iy = np.minimum(((pf[:, 1] - y0) // cell).astype(int), ny - 1)
    c = iy * nx + ix
    n = counts[c]
    total = int(n.sum())
    if total == 0:
        return hit.astype(int).reshape(shape)
    local = np.repeat(np.arange(live.size), n)
    offs = np.arange(total) - np.repeat(np.cumsum(n) - n, n)
    ob = ids[np.repeat(start[c], n) + offs]
    q = pf[local]
    pi = live[local]

    C = len(smap.circles)
    is_c = ob < C
    if is_c.any():
        circ = smap.circles[ob[is_c]]
        d2 = (q[is_c, 0] - circ[:, 0]) ** 2 + (q[is_c, 1] - circ[:, 1]) ** 2
        hit[pi[is_c][d2 <= circ[:, 2] ** 2]] = True
    is_p = ~is_c
    if is_p.any():
        gi = ob[is_p] - C
        qp = q[is_p][:, None, :]
        a = smap._poly_vertices[gi]
        e = np.roll(a, -1, axis=1) - a
        cross = e[..., 0] * (qp[..., 1] - a[..., 1]) - e[..., 1] * (qp[..., 0] - a[..., 0])
        inside = np.all(cross >= 0, axis=1)
        ar = smap.agent_radius
        if ar > 0:
            for g in np.unique(gi[~inside]):
                sel = np.flatnonzero((gi == g) & ~inside)
                inside[sel] = _segment_distance(smap.polygons[g], qp[sel, 0]) <= ar
        hit[pi[is_p][inside]] = True
    return hit.astype(int).reshape(shape)


def goal_distance_cost(x, goal, smap: StaticMap | None = None, alpha: float = 1000.0) -> np.ndarray:
    """Euclidean distance to ``goal`` plus ``alpha`` times the collision flag."""
    s = np.asarray(x, dtype=float)
    d = np.hypot(s[..., 0] - goal[0], s[..., 1] - goal[1])
    if smap is None:
        return d
    return d + alpha * static_collision(s, smap)


def sample_start_goal(smap: StaticMap, seed: int, clearance: float = 2.0,
                      min_separation: float = 10.0, max_tries: int = 10_000):
    """Collision-free start pose (heading at the goal) and goal position.

    Both points keep ``clearance`` metres from every obstacle and the
    boundary; raises GenerationError after ``max_tries`` rejections.
    """
    gen = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x5A])
    x0, y0, x1, y1 = smap.bounds
    cl = smap.inflated(clearance)

    def draw():
        for _ in range(max_tries):
            p = gen.uniform([x0 + clearance, y0 + clearance], [x1 - clearance, y1 - clearance])
            if not static_collision(p, cl):
                return p
        raise GenerationError(f"no free point found after {max_tries} samples")

    for _ in range(max_tries):
        start = draw()
        goal = draw()
        if np.hypot(*(goal - start)) >= min_separation:
            heading = float(np.arctan2(goal[1] - start[1], goal[0] - start[0]))
            return np.array([start[0], start[1], heading]), goal
    raise GenerationError(f"no start/goal pair {min_separation} m apart after {max_tries} samples")


@dataclass(frozen=True)
class DynamicField:
    """Moving Dubins obstacles with fixed (true) speeds and turning rates."""

    states: np.ndarray  # (L, 3) initial x, y, theta
    v: np.ndarray  # (L,)
    omega: np.ndarray  # (L,)
    radius: float = 1.0
    bounds: tuple = FIELD_BOUNDS
    seed: int | None = None

    @property
    def count(self) -> int:
        return self.states.shape[0]

    def to_dict(self) -> dict:
        obs = [{"x": s[0], "y": s[1], "theta": s[2], "v": v, "omega": w}
               for s, v, w in zip(self.states.tolist(), self.v.tolist(), self.omega.tolist())]
        return {"version": SCHEMA_VERSION, "kind": "dynamic-field", "bounds": list(self.bounds),
                "radius": self.radius, "seed": self.seed, "obstacles": obs}

    @classmethod
    def from_dict(cls, d: dict) -> "DynamicField":
        _check_header(d, "dynamic-field")
        obs = d["obstacles"]
        states = np.array([[o["x"], o["y"], o["theta"]] for o in obs]).reshape(-1, 3)
        return cls(states, np.array([o["v"] for o in obs], dtype=float),
                   np.array([o["omega"] for o in obs], dtype=float),
                   d.get("radius", 1.0), tuple(d["bounds"]), d.get("seed"))


def sample_dynamic_field(seed: int, L: int = 100, bounds=FIELD_BOUNDS, v_range=(0.5, 1.5),
                         omega_range=(-0.5, 0.5), radius: float = 1.0) -> DynamicField:
    if L < 0:
        raise ConfigurationError("L must be >= 0")
    gen = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0xD7])
    x0, y0, x1, y1 = bounds
    xs = gen.uniform(x0, x1, L)
    ys = gen.uniform(y0, y1, L)
    th = gen.uniform(0.0, 2 * np.pi, L)
    v = gen.uniform(*v_range, L)
    w = gen.uniform(*omega_range, L)
    return DynamicField(np.column_stack([xs, ys, th]), v, w, radius, tuple(bounds), int(seed))


def dumps(obj) -> str:
    return json.dumps(obj.to_dict(), indent=2, sort_keys=True)


def loads(text: str):
    d = json.loads(text)
    kind = d.get("kind")
    if kind == "static-map":
        return StaticMap.from_dict(d)
    if kind == "dynamic-field":
        return DynamicField.from_dict(d)
    raise ConfigurationError(f"unknown document kind {kind!r}")
