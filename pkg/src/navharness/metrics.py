"""Navigation metrics (NE, OS, SR, SPL, nDTW), low-level tracking metrics and aggregation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyInput, EmptyPath, EmptyTrace
from .records import EpisodeRecord, Trace
from .scene import DEFAULT_ROBOT_RADIUS, Scene, TraversabilityGrid, inflate, path_length

DEFAULT_SUCCESS_RADIUS = 3.0

# report keys as they appear in benchmark tables
COLUMN_NAMES = {
    "ne": "NE",
    "os": "OS",
    "sr": "SR",
    "spl": "SPL",
    "ndtw": "nDTW",
    "lin_vel_err": "Linear Vel. Error",
    "ang_vel_err": "Angular Vel. Error",
    "collision_rate": "Collision Rate",
}


@dataclass(frozen=True)
class MetricConfig:
    success_radius: float = DEFAULT_SUCCESS_RADIUS
    d_th: float = DEFAULT_SUCCESS_RADIUS
    euclidean: bool = False
    # spacing used to resample paths before nDTW; 0 disables resampling
    resample: float = 0.25
    robot_radius: float = DEFAULT_ROBOT_RADIUS


@dataclass(frozen=True)
class MetricReport:
    ne: float
    os: bool
    sr: bool
    spl: float
    ndtw: float
    lin_vel_err: float
    ang_vel_err: float
    collision_rate: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SuccessResult:
    sr: bool
    os: bool


# --- geodesic lookups --------------------------------------------------------------


def goal_field(grid: TraversabilityGrid, goal: Sequence[float]) -> np.ndarray:
    """Geodesic distance from every cell to the goal cell (flat array)."""
    cell = grid.nearest_free(grid.cell_of(goal))
    dist, _ = grid.field_from(cell)
    return dist


def _lookup(grid: TraversabilityGrid, field: np.ndarray, point: Sequence[float]) -> float:
    cell = grid.nearest_free(grid.cell_of(point))
    return float(field[grid.flat(cell)])


def navigation_error(
    grid: TraversabilityGrid, final_pos: Sequence[float], goal: Sequence[float], euclidean: bool = False
) -> float:
    """Geodesic final-to-goal distance; ``inf`` when walled off.

    Endpoints inside an inflated cell are snapped to the nearest free cell.
    Raises OutOfBounds for points outside the grid.
    """
    if euclidean:
        grid.cell_of(final_pos)
        return math.dist(final_pos[:2], goal[:2])
    return _lookup(grid, goal_field(grid, goal), final_pos)


def _distances_to_goal(record: EpisodeRecord, grid: TraversabilityGrid, goal, cfg: MetricConfig) -> np.ndarray:
    xy = record.trajectory.xy
    if cfg.euclidean:
        return np.hypot(xy[:, 0] - goal[0], xy[:, 1] - goal[1])
    field = goal_field(grid, goal)
    cells = {}
    out = np.empty(len(xy))
    for k, p in enumerate(xy):
        key = grid.cell_of(p)
        if key not in cells:
            cells[key] = float(field[grid.flat(grid.nearest_free(key))])
        out[k] = cells[key]
    return out


def success(
    record: EpisodeRecord, grid: TraversabilityGrid, cfg: MetricConfig = MetricConfig(), goal=None
) -> SuccessResult:
    """SR needs an issued stop within the radius; OS needs any trajectory sample within it."""
    goal = record.goal if goal is None else goal
    d = _distances_to_goal(record, grid, goal, cfg)
    sr = bool(record.stop_issued and d[-1] <= cfg.success_radius)
    os_ = bool(d.min() <= cfg.success_radius)
    return SuccessResult(sr=sr, os=os_)


def spl(record: EpisodeRecord, grid: TraversabilityGrid, cfg: MetricConfig = MetricConfig(), goal=None) -> float:
    """S * l / max(p, l). A start already on the goal (l = 0) scores S."""
    goal = record.goal if goal is None else goal
    s = 1.0 if success(record, grid, cfg, goal).sr else 0.0
    if s == 0.0:
        return 0.0
    ell = navigation_error(grid, record.start_xy, goal, cfg.euclidean)
    if ell == 0.0:
        return s
    if not math.isfinite(ell):
        return 0.0
    p = path_length(record.trajectory.xy)
    return s * ell / max(p, ell)


# --- nDTW ----------------------------------------------------------------------------


def dtw(a: Sequence[Sequence[float]], b: Sequence[Sequence[float]]) -> float:
    """Minimum-cost monotone alignment under Euclidean point distance."""
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise EmptyPath("both paths must be non-empty")
    # math.hypot is correctly rounded, so costs do not depend on the vector backend
    bl = b.tolist()
    cost = [[math.hypot(ax - bx, ay - by) for bx, by in bl] for ax, ay in a.tolist()]
    n, m = len(a), len(b)
    inf = math.inf
    prev = [inf] * (m + 1)
    prev[0] = 0.0
    for i in range(n):
        row = [inf] * (m + 1)
        ci = cost[i]
        for j in range(m):
            best = prev[j]
            if prev[j + 1] < best:
                best = prev[j + 1]
            if row[j] < best:
                best = row[j]
            row[j + 1] = best + ci[j]
        prev = row
    return prev[m]


def ndtw(executed, reference, d_th: float = DEFAULT_SUCCESS_RADIUS) -> float:
    """exp(-DTW / (|reference| * d_th)), in [0, 1]."""
    ref = np.asarray(reference, dtype=float).reshape(-1, 2)
    if len(ref) == 0:
        raise EmptyPath("reference path is empty")
    return math.exp(-dtw(executed, ref) / (len(ref) * d_th))


def resample_path(points, spacing: float) -> np.ndarray:
    """Points at equal arc-length spacing along a polyline, endpoints kept."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise EmptyPath("path is empty")
    seg = np.hypot(*np.diff(pts, axis=0).T) if len(pts) > 1 else np.zeros(0)
    total = float(seg.sum())
    if spacing <= 0 or total == 0.0:
        return pts[[0]] if total == 0.0 else pts
    s = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(1, int(math.ceil(total / spacing - 1e-9)))
    q = np.linspace(0.0, total, n + 1)
    return np.column_stack([np.interp(q, s, pts[:, 0]), np.interp(q, s, pts[:, 1])])


def episode_ndtw(record: EpisodeRecord, reference, cfg: MetricConfig = MetricConfig()) -> float:
    executed = record.trajectory.xy
    if cfg.resample > 0:
        executed = resample_path(executed, cfg.resample)
        reference = resample_path(reference, cfg.resample)
    return ndtw(executed, reference, cfg.d_th)


# --- low-level tracking -------------------------------------------------------------


def lowlevel_metrics(trace: Trace | EpisodeRecord) -> dict[str, float]:
    """Mean absolute tracking errors over moving steps and percent of steps in contact."""
    if isinstance(trace, EpisodeRecord):
        trace = trace.trajectory
    if trace.n_steps == 0:
        raise EmptyTrace("trace has no control steps")
    v_cmd, w_cmd = trace.v_cmd[1:], trace.w_cmd[1:]
    moving = (v_cmd != 0.0) | (w_cmd != 0.0)
    if moving.any():
        lin = float(np.mean(np.abs(v_cmd[moving] - trace.v[1:][moving])))
        ang = float(np.mean(np.abs(w_cmd[moving] - trace.omega[1:][moving])))
    else:
        lin = ang = 0.0
    rate = 100.0 * float(np.count_nonzero(trace.contact[1:])) / trace.n_steps
    return {"lin_vel_err": lin, "ang_vel_err": ang, "collision_rate": rate}


# --- episode level -------------------------------------------------------------------


def evaluate_episode(
    record: EpisodeRecord, scene: Scene, cfg: MetricConfig = MetricConfig(), grid: TraversabilityGrid | None = None
) -> MetricReport:
    grid = inflate(scene, cfg.robot_radius) if grid is None else grid
    goal = scene.goal
    s = success(record, grid, cfg, goal)
    low = lowlevel_metrics(record.trajectory)
    return MetricReport(
        ne=navigation_error(grid, record.final_xy, goal, cfg.euclidean),
        os=s.os,
        sr=s.sr,
        spl=spl(record, grid, cfg, goal),
        ndtw=episode_ndtw(record, scene.reference_path, cfg),
        **low,
    )


def aggregate(reports: Sequence[MetricReport]) -> dict:
    """Means keyed by table column names; booleans become rates."""
    if not reports:
        raise EmptyInput("no reports to aggregate")
    out: dict = {"count": len(reports)}
    for key, column in COLUMN_NAMES.items():
        vals = [float(getattr(r, key)) for r in reports]
        out[column] = float(np.mean(vals)) if len(vals) > 1 else vals[0]
    return out


def json_safe(summary: dict) -> dict:
    """Replace non-finite floats with ``None`` so the report is strict JSON."""
    return {
        k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in summary.items()
    }
