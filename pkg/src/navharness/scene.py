"""2.5D grid world: scenes, obstacle inflation, and grid geodesics.

Cell ``(i, j)`` is column ``i`` (x) and row ``j`` (y) and covers
``[i*cs, (i+1)*cs) x [j*cs, (j+1)*cs)``. Arrays are indexed ``[row, col]``.
Geodesics run 8-connected Dijkstra over unblocked cells; a diagonal step is
only allowed when both orthogonal cells it squeezes between are free.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Sequence

import jsonschema
import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .errors import GenerationFailed, OutOfBounds, SchemaError, Unreachable, ValidationError

SCHEMA_VERSION = 1
DEFAULT_CELL_SIZE = 0.10
DEFAULT_ROBOT_RADIUS = 0.30
UNREACHABLE = math.inf

Point = tuple[float, float]


class Pose(NamedTuple):
    x: float
    y: float
    yaw: float


@dataclass(frozen=True, eq=False)
class Scene:
    scene_id: str
    cell_size: float
    occupied: np.ndarray
    ground_height: np.ndarray
    start_pose: Pose
    goal: Point
    reference_path: tuple[Point, ...]
    instruction: str

    def __post_init__(self) -> None:
        occ = np.array(self.occupied, dtype=bool)
        ground = np.array(self.ground_height, dtype=float)
        occ.setflags(write=False)
        ground.setflags(write=False)
        object.__setattr__(self, "occupied", occ)
        object.__setattr__(self, "ground_height", ground)
        object.__setattr__(self, "start_pose", Pose(*map(float, self.start_pose)))
        object.__setattr__(self, "goal", (float(self.goal[0]), float(self.goal[1])))
        object.__setattr__(
            self, "reference_path", tuple((float(x), float(y)) for x, y in self.reference_path)
        )

    @property
    def width(self) -> int:
        return self.occupied.shape[1]

    @property
    def height(self) -> int:
        return self.occupied.shape[0]

    @property
    def extent(self) -> tuple[float, float]:
        return self.width * self.cell_size, self.height * self.cell_size

    def contains(self, x: float, y: float) -> bool:
        w, h = self.extent
        return 0.0 <= x < w and 0.0 <= y < h

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return _cell_of(x, y, self.cell_size, self.occupied.shape)

    def with_occupancy(self, occupied: np.ndarray, **changes) -> Scene:
        return replace(self, occupied=occupied, **changes)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return scene_to_dict(self) == scene_to_dict(other)


def _cell_of(x: float, y: float, cell_size: float, shape: tuple[int, int]) -> tuple[int, int]:
    i = math.floor(x / cell_size)
    j = math.floor(y / cell_size)
    if not (0 <= i < shape[1] and 0 <= j < shape[0]):
        raise OutOfBounds(f"point ({x:.3f}, {y:.3f}) outside grid")
    return i, j


def cell_center(cell: tuple[int, int], cell_size: float) -> Point:
    return ((cell[0] + 0.5) * cell_size, (cell[1] + 0.5) * cell_size)


# --- traversability -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TraversabilityGrid:
    cell_size: float
    blocked: np.ndarray
    radius: float = 0.0
    _graph: list = field(default_factory=list, repr=False)
    _fields: OrderedDict = field(default_factory=OrderedDict, repr=False)
    _nearest: list = field(default_factory=list, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.blocked.shape

    def cell_of(self, point: Sequence[float]) -> tuple[int, int]:
        return _cell_of(point[0], point[1], self.cell_size, self.blocked.shape)

    def center(self, cell: tuple[int, int]) -> Point:
        return cell_center(cell, self.cell_size)

    def is_blocked(self, cell: tuple[int, int]) -> bool:
        return bool(self.blocked[cell[1], cell[0]])

    def flat(self, cell: tuple[int, int]) -> int:
        return cell[1] * self.shape[1] + cell[0]

    def unflat(self, index: int) -> tuple[int, int]:
        j, i = divmod(int(index), self.shape[1])
        return i, j

    def graph(self) -> csr_matrix:
        if not self._graph:
            self._graph.append(_build_graph(self.blocked, self.cell_size))
        return self._graph[0]

    def field_from(self, cell: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        """Geodesic distances and predecessors from ``cell`` to every cell (flat arrays)."""
        key = self.flat(cell)
        hit = self._fields.get(key)
        if hit is not None:
            self._fields.move_to_end(key)
            return hit
        dist, pred = dijkstra(self.graph(), directed=True, indices=key, return_predecessors=True)
        if self.blocked[cell[1], cell[0]]:
            dist[:] = np.inf
            pred[:] = -9999
        else:
            dist = _exact_distances(dist, pred, self.shape[1], self.cell_size)
        self._fields[key] = (dist, pred)
        if len(self._fields) > 32:
            self._fields.popitem(last=False)
        return dist, pred

    def nearest_free(self, cell: tuple[int, int]) -> tuple[int, int]:
        """Closest unblocked cell (itself when free); raises Unreachable if none exists."""
        if not self.is_blocked(cell):
            return cell
        if self.blocked.all():
            raise Unreachable("every cell is blocked")
        if not self._nearest:
            _, idx = ndimage.distance_transform_edt(self.blocked, return_indices=True)
            self._nearest.append(idx)
        idx = self._nearest[0]
        return int(idx[1][cell[1], cell[0]]), int(idx[0][cell[1], cell[0]])


def octile_length(straight: int, diagonal: int, cell_size: float) -> float:
    """Length of a grid path with the given move counts, rounded once."""
    return straight * cell_size + diagonal * (cell_size * math.sqrt(2.0))


def _exact_distances(dist: np.ndarray, pred: np.ndarray, width: int, cell_size: float) -> np.ndarray:
    """Re-derive each distance from the move counts along its predecessor chain.

    A running float sum depends on the order of straight and diagonal moves,
    so equally short paths could differ in the last bit. The optimal counts are
    unique (sqrt 2 is irrational), which makes the recount order independent.
    """
    reach = np.flatnonzero(np.isfinite(dist))
    order = reach[np.argsort(dist[reach], kind="stable")]
    straight = np.zeros(dist.shape, dtype=np.int64)
    diagonal = np.zeros(dist.shape, dtype=np.int64)
    for node in order.tolist():
        p = int(pred[node])
        if p < 0:
            continue
        if node % width != p % width and node // width != p // width:
            straight[node], diagonal[node] = straight[p], diagonal[p] + 1
        else:
            straight[node], diagonal[node] = straight[p] + 1, diagonal[p]
    out = np.full(dist.shape, np.inf)
    out[reach] = octile_length(straight[reach], diagonal[reach], cell_size)
    return out


_NEIGHBORS = [(0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (1, -1), (-1, 1), (-1, -1)]


def _build_graph(blocked: np.ndarray, cell_size: float) -> csr_matrix:
    h, w = blocked.shape
    free = np.pad(~blocked, 1, constant_values=False)
    idx = np.arange(h * w).reshape(h, w)
    src_free = free[1:-1, 1:-1]
    rows, cols, weights = [], [], []
    for dj, di in _NEIGHBORS:
        dst = free[1 + dj : h + 1 + dj, 1 + di : w + 1 + di]
        mask = src_free & dst
        step = cell_size
        if dj and di:
            mask &= free[1 + dj : h + 1 + dj, 1:-1] & free[1:-1, 1 + di : w + 1 + di]
            step = cell_size * math.sqrt(2.0)
        src = idx[mask]
        rows.append(src)
        cols.append(src + dj * w + di)
        weights.append(np.full(src.shape, step))
    return csr_matrix(
        (np.concatenate(weights), (np.concatenate(rows), np.concatenate(cols))), shape=(h * w, h * w)
    )


def inflate(scene: Scene | np.ndarray, radius: float, cell_size: float | None = None) -> TraversabilityGrid:
    """Block every cell whose center lies within ``radius`` (closed) of an occupied cell center."""
    if isinstance(scene, Scene):
        occupied, cell_size = scene.occupied, scene.cell_size
    else:
        occupied = np.asarray(scene, dtype=bool)
        if cell_size is None:
            raise TypeError("cell_size is required with a raw occupancy array")
    if radius < 0:
        raise ValueError("radius must be non-negative")
    if not occupied.any():
        blocked = np.zeros_like(occupied, dtype=bool)
    else:
        dist = ndimage.distance_transform_edt(~occupied)
        blocked = dist <= radius / cell_size + 1e-9
    blocked.setflags(write=False)
    return TraversabilityGrid(cell_size=cell_size, blocked=blocked, radius=radius)


def geodesic_distance(grid: TraversabilityGrid, a: Sequence[float], b: Sequence[float]) -> float:
    """Grid geodesic between the cells containing ``a`` and ``b``; ``inf`` when unreachable."""
    ca, cb = grid.cell_of(a), grid.cell_of(b)
    if grid.is_blocked(ca) or grid.is_blocked(cb):
        return UNREACHABLE
    fa, fb = grid.flat(ca), grid.flat(cb)
    # always search from the smaller index so the result is exactly symmetric
    src, dst = (ca, fb) if fa <= fb else (cb, fa)
    dist, _ = grid.field_from(src)
    return float(dist[dst])


def shortest_path(grid: TraversabilityGrid, a: Sequence[float], b: Sequence[float]) -> list[Point]:
    """Cell-center polyline from ``a``'s cell to ``b``'s cell."""
    ca, cb = grid.cell_of(a), grid.cell_of(b)
    if grid.is_blocked(ca) or grid.is_blocked(cb):
        raise Unreachable(f"endpoint blocked: {ca} -> {cb}")
    return _walk(grid, ca, cb)


def _walk(grid: TraversabilityGrid, start: tuple[int, int], goal: tuple[int, int]) -> list[Point]:
    dist, pred = grid.field_from(goal)
    node = grid.flat(start)
    if not np.isfinite(dist[node]):
        raise Unreachable(f"no path {start} -> {goal}")
    target = grid.flat(goal)
    cells = [node]
    while node != target:
        node = int(pred[node])
        cells.append(node)
    return [grid.center(grid.unflat(n)) for n in cells]


def path_length(points: Sequence[Sequence[float]]) -> float:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 2:
        return 0.0
    return float(np.sum(np.hypot(*np.diff(pts, axis=0).T)))


def line_of_sight(grid: TraversabilityGrid, a: Point, b: Point) -> bool:
    n = max(2, int(math.ceil(math.dist(a, b) / (grid.cell_size * 0.25))) + 1)
    xs = np.linspace(a[0], b[0], n)
    ys = np.linspace(a[1], b[1], n)
    i = np.floor(xs / grid.cell_size).astype(int)
    j = np.floor(ys / grid.cell_size).astype(int)
    h, w = grid.shape
    if (i < 0).any() or (j < 0).any() or (i >= w).any() or (j >= h).any():
        return False
    return not grid.blocked[j, i].any()


def smooth_path(grid: TraversabilityGrid, points: Sequence[Point]) -> list[Point]:
    """Greedy string pulling: keep only waypoints needed for line of sight."""
    pts = [tuple(p) for p in points]
    if len(pts) <= 2:
        return pts
    out = [pts[0]]
    anchor = 0
    while anchor < len(pts) - 1:
        nxt = anchor + 1
        for k in range(len(pts) - 1, anchor, -1):
            if line_of_sight(grid, pts[anchor], pts[k]):
                nxt = k
                break
        out.append(pts[nxt])
        anchor = nxt
    return out


# --- io ---------------------------------------------------------------------


def _schema() -> dict:
    text = resources.files("navharness").joinpath("schemas/scene.schema.json").read_text("utf-8")
    return json.loads(text)


def scene_from_dict(data: dict, robot_radius: float = DEFAULT_ROBOT_RADIUS) -> Scene:
    try:
        jsonschema.validate(data, _schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"{where}: {exc.message}") from None
    w, h = data["width"], data["height"]
    if len(data["occupied"]) != w * h:
        raise SchemaError(f"occupied: expected {w * h} cells, got {len(data['occupied'])}")
    ground = data.get("ground_height")
    if ground is not None and len(ground) != w * h:
        raise SchemaError(f"ground_height: expected {w * h} cells, got {len(ground)}")
    occ = np.asarray(data["occupied"], dtype=bool).reshape(h, w)
    gh = np.zeros((h, w)) if ground is None else np.asarray(ground, dtype=float).reshape(h, w)
    sp = data["start_pose"]
    scene = Scene(
        scene_id=data["scene_id"],
        cell_size=float(data["cell_size"]),
        occupied=occ,
        ground_height=gh,
        start_pose=Pose(sp["x"], sp["y"], sp["yaw"]),
        goal=(data["goal"]["x"], data["goal"]["y"]),
        reference_path=[(p["x"], p["y"]) for p in data["reference_path"]],
        instruction=data["instruction"],
    )
    validate_scene(scene, robot_radius)
    return scene


def scene_to_dict(scene: Scene) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "scene_id": scene.scene_id,
        "cell_size": scene.cell_size,
        "width": scene.width,
        "height": scene.height,
        "occupied": scene.occupied.astype(int).ravel().tolist(),
        "ground_height": scene.ground_height.ravel().tolist(),
        "start_pose": dict(scene.start_pose._asdict()),
        "goal": {"x": scene.goal[0], "y": scene.goal[1]},
        "reference_path": [{"x": x, "y": y} for x, y in scene.reference_path],
        "instruction": scene.instruction,
    }


def load_scene(path: str | Path, robot_radius: float = DEFAULT_ROBOT_RADIUS) -> Scene:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    return scene_from_dict(data, robot_radius)


def save_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene)) + "\n", encoding="utf-8")


def load_scene_dir(directory: str | Path) -> list[Scene]:
    paths = sorted(Path(directory).glob("*.json"))
    return [load_scene(p) for p in paths if not p.name.endswith(".manifest.json")]


def validate_scene(scene: Scene, robot_radius: float = DEFAULT_ROBOT_RADIUS) -> None:
    if not scene.cell_size > 0:
        raise SchemaError("cell_size must be positive")
    if scene.occupied.ndim != 2 or scene.occupied.size == 0:
        raise SchemaError("grids must be non-empty and rectangular")
    if scene.ground_height.shape != scene.occupied.shape:
        raise SchemaError("ground_height shape differs from occupied")
    for name, (x, y) in (("start", scene.start_pose[:2]), ("goal", scene.goal)):
        if not scene.contains(x, y):
            raise ValidationError(f"{name} outside scene")
    grid = inflate(scene, robot_radius)
    if grid.is_blocked(scene.cell_of(*scene.start_pose[:2])):
        raise ValidationError("start occupied")
    if grid.is_blocked(scene.cell_of(*scene.goal)):
        raise ValidationError("goal occupied")
    if not scene.reference_path:
        raise ValidationError("reference_path empty")
    for name, end, target in (
        ("start", scene.reference_path[0], scene.start_pose[:2]),
        ("goal", scene.reference_path[-1], scene.goal),
    ):
        if not scene.contains(*end):
            raise ValidationError(f"reference_path {name} outside scene")
        ce, ct = scene.cell_of(*end), scene.cell_of(*target)
        if max(abs(ce[0] - ct[0]), abs(ce[1] - ct[1])) > 1:
            raise ValidationError(f"reference_path does not end within one cell of {name}")


# --- procedural generation --------------------------------------------------


@dataclass(frozen=True)
class SceneParams:
    """Generator knobs. ``size`` is the room side in meters."""

    size: float = 8.0
    obstacle_density: float = 0.10
    min_clearance: float = 0.7
    cell_size: float = DEFAULT_CELL_SIZE
    robot_radius: float = DEFAULT_ROBOT_RADIUS
    min_goal_distance: float = 3.0
    terrain: str = "flat"  # flat | ramp | steps
    max_retries: int = 50

    def check(self) -> None:
        if not 2.0 <= self.size <= 50.0:
            raise ValueError("size must be within [2, 50] m")
        if not 0.0 <= self.obstacle_density <= 0.5:
            raise ValueError("obstacle_density must be within [0, 0.5]")
        if self.min_clearance < 0:
            raise ValueError("min_clearance must be non-negative")
        if self.terrain not in ("flat", "ramp", "steps"):
            raise ValueError(f"unknown terrain {self.terrain!r}")


def room(size_cells: tuple[int, int]) -> np.ndarray:
    """Occupancy of an empty room with one-cell border walls, shape (rows, cols)."""
    h, w = size_cells
    occ = np.zeros((h, w), dtype=bool)
    occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = True
    return occ


def _place_boxes(rng: np.random.Generator, occ: np.ndarray, density: float, cs: float) -> None:
    h, w = occ.shape
    interior = (h - 2) * (w - 2)
    target = density * interior
    tries = 0
    while occ[1:-1, 1:-1].sum() < target and tries < 10_000:
        tries += 1
        bw = max(1, int(round(rng.uniform(0.2, 1.0) / cs)))
        bh = max(1, int(round(rng.uniform(0.2, 1.0) / cs)))
        i0 = int(rng.integers(1, max(2, w - 1 - bw)))
        j0 = int(rng.integers(1, max(2, h - 1 - bh)))
        occ[j0 : j0 + bh, i0 : i0 + bw] = True


def _terrain(rng: np.random.Generator, shape: tuple[int, int], kind: str, cs: float) -> np.ndarray:
    h, w = shape
    if kind == "ramp":
        return np.tile(np.linspace(0.0, 0.3, w), (h, 1))
    ground = np.zeros(shape)
    if kind == "steps":
        for _ in range(4):
            sw = int(rng.integers(5, max(6, w // 4)))
            sh = int(rng.integers(5, max(6, h // 4)))
            i0 = int(rng.integers(1, max(2, w - sw - 1)))
            j0 = int(rng.integers(1, max(2, h - sh - 1)))
            ground[j0 : j0 + sh, i0 : i0 + sw] = rng.uniform(0.08, 0.2)
    return ground


def describe_goal(start: Pose, goal: Point) -> str:
    dx, dy = goal[0] - start.x, goal[1] - start.y
    dist = math.hypot(dx, dy)
    bearing = math.degrees(wrap_angle(math.atan2(dy, dx) - start.yaw))
    if abs(bearing) <= 30:
        side = "ahead of you"
    elif abs(bearing) >= 150:
        side = "behind you"
    else:
        side = "to your left" if bearing > 0 else "to your right"
    return f"Walk to the goal about {dist:.1f} meters {side} and stop there."


def wrap_angle(a: float) -> float:
    """Normalize to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


def generate_scene(seed: int, params: SceneParams = SceneParams()) -> Scene:
    """Random room with box obstacles; a pure function of ``(seed, params)``."""
    params.check()
    cs = params.cell_size
    n = int(round(params.size / cs))
    rng = np.random.default_rng(seed)
    keep_out = max(params.min_clearance / 2, params.robot_radius)
    for _attempt in range(params.max_retries):
        occ = room((n, n))
        _place_boxes(rng, occ, params.obstacle_density, cs)
        clear = inflate(occ, keep_out, cs)
        labels, count = ndimage.label(~clear.blocked, structure=np.ones((3, 3)))
        if count == 0:
            continue
        sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, count + 1))
        comp = np.argwhere(labels == int(np.argmax(sizes)) + 1)
        if len(comp) < 2:
            continue
        pair = _pick_pair(rng, comp, cs, params.min_goal_distance)
        if pair is None:
            continue
        (sj, si), (gj, gi) = pair
        start_xy = cell_center((si, sj), cs)
        goal = cell_center((gi, gj), cs)
        grid = inflate(occ, params.robot_radius, cs)
        try:
            path = smooth_path(grid, shortest_path(grid, start_xy, goal))
        except Unreachable:
            continue
        path[0], path[-1] = start_xy, goal
        start = Pose(start_xy[0], start_xy[1], float(rng.uniform(-math.pi, math.pi)))
        scene = Scene(
            scene_id=f"gen-{seed:05d}",
            cell_size=cs,
            occupied=occ,
            ground_height=_terrain(rng, occ.shape, params.terrain, cs),
            start_pose=start,
            goal=goal,
            reference_path=path,
            instruction=describe_goal(start, goal),
        )
        validate_scene(scene, params.robot_radius)
        return scene
    raise GenerationFailed(f"seed {seed}: no valid layout after {params.max_retries} attempts")


def _pick_pair(rng, comp: np.ndarray, cs: float, min_dist: float):
    for _ in range(200):
        a, b = comp[rng.integers(len(comp), size=2)]
        if math.dist(a, b) * cs >= min_dist:
            return a, b
    return None
