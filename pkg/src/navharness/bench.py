"""Paired avoidance-on / avoidance-off runs on scenes with unplanned obstacles.

Each benchmark scene is a walled room with clutter away from the start-goal
line. An oracle plans on the scene without one extra pillar; its actions are
then replayed open loop on the scene with the pillar dropped onto the executed
route, once with height-map avoidance and once without.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .action_lang import format_action
from .episode import EpisodeConfig, OracleAgent, ScanWindow, ScriptedAgent, drive_command, run_episode
from .locomotion import CommandProfile, RobotState, VelocityCommand
from .metrics import COLUMN_NAMES, MetricConfig, aggregate, evaluate_episode, lowlevel_metrics
from .records import EpisodeRecord, Trace
from .scene import (
    Pose,
    Scene,
    SceneParams,
    describe_goal,
    generate_scene,
    inflate,
    room,
    shortest_path,
    smooth_path,
)


@dataclass(frozen=True)
class BenchParams:
    room: tuple[float, float] = (9.0, 6.0)  # x, y extent in meters
    route_length: float = 5.5
    pillar_at: tuple[float, float] = (2.3, 2.45)  # arc length along the executed route
    pillar_size: tuple[float, float] = (0.2, 0.3)
    clutter_boxes: int = 6
    clutter_keep_out: float = 1.3
    cell_size: float = 0.1
    max_decisions: int = 80


def _segment_distance(px, py, a, b):
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def clutter_scene(seed: int, params: BenchParams = BenchParams()) -> Scene:
    """Room with off-route clutter; start and goal ``route_length`` apart along x."""
    rng = np.random.default_rng(seed)
    cs = params.cell_size
    w, h = (int(round(v / cs)) for v in params.room)
    occ = room((h, w))
    ext_x, ext_y = params.room
    sx = float(rng.uniform(1.0, 1.5))
    sy = float(rng.uniform(2.2, ext_y - 2.2))
    ang = float(rng.uniform(-0.12, 0.12))
    gx = sx + params.route_length * math.cos(ang)
    gy = sy + params.route_length * math.sin(ang)
    start = ((math.floor(sx / cs) + 0.5) * cs, (math.floor(sy / cs) + 0.5) * cs)
    goal = ((math.floor(gx / cs) + 0.5) * cs, (math.floor(gy / cs) + 0.5) * cs)
    jj, ii = np.mgrid[0:h, 0:w]
    cx, cy = (ii + 0.5) * cs, (jj + 0.5) * cs
    near_route = _segment_distance(cx, cy, start, goal) < params.clutter_keep_out
    placed = 0
    for _ in range(200):
        if placed == params.clutter_boxes:
            break
        bw = int(round(rng.uniform(0.2, 0.6) / cs))
        bh = int(round(rng.uniform(0.2, 0.6) / cs))
        i0 = int(rng.integers(1, w - 1 - bw))
        j0 = int(rng.integers(1, h - 1 - bh))
        if near_route[j0 : j0 + bh, i0 : i0 + bw].any():
            continue
        occ[j0 : j0 + bh, i0 : i0 + bw] = True
        placed += 1
    yaw = float(rng.uniform(-math.pi, math.pi))
    pose = Pose(start[0], start[1], yaw)
    grid = inflate(occ, 0.3, cs)
    path = smooth_path(grid, shortest_path(grid, start, goal))
    return Scene(
        scene_id=f"clutter-{seed:05d}",
        cell_size=cs,
        occupied=occ,
        ground_height=np.zeros(occ.shape),
        start_pose=pose,
        goal=goal,
        reference_path=path,
        instruction=describe_goal(pose, goal),
    )


def place_pillar(scene: Scene, route: np.ndarray, rng: np.random.Generator, params: BenchParams = BenchParams()) -> Scene:
    """Drop a square pillar centred on ``route`` at a random arc length."""
    seg = np.hypot(*np.diff(route, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    at = float(rng.uniform(*params.pillar_at))
    px = float(np.interp(at, s, route[:, 0]))
    py = float(np.interp(at, s, route[:, 1]))
    half = float(rng.uniform(*params.pillar_size)) / 2
    cs = scene.cell_size
    occ = scene.occupied.copy()
    i0, i1 = int(math.floor((px - half) / cs)), int(math.ceil((px + half) / cs))
    j0, j1 = int(math.floor((py - half) / cs)), int(math.ceil((py + half) / cs))
    occ[j0:j1, i0:i1] = True
    return scene.with_occupancy(occ, scene_id=scene.scene_id + "-pillar")


@dataclass
class PairedResult:
    blind: list[EpisodeRecord]
    vision: list[EpisodeRecord]
    blind_summary: dict
    vision_summary: dict


def _route(record: EpisodeRecord) -> np.ndarray:
    """Executed positions with the initial in-place rotation removed."""
    xy = record.trajectory.xy
    moved = np.flatnonzero(np.hypot(xy[:, 0] - xy[0, 0], xy[:, 1] - xy[0, 1]) > 1e-6)
    return xy[moved[0] - 1 :] if moved.size else xy


def paired_avoidance_run(
    seeds, params: BenchParams = BenchParams(), cfg: EpisodeConfig | None = None
) -> PairedResult:
    cfg = cfg or EpisodeConfig(max_decisions=params.max_decisions)
    mcfg = MetricConfig(success_radius=cfg.success_radius, d_th=cfg.success_radius)
    blind, vision, rb, rv = [], [], [], []
    for seed in seeds:
        clean = clutter_scene(seed, params)
        plan = run_episode(clean, OracleAgent(clean), cfg, seed=seed)
        script = [format_action(a) for a in plan.actions]
        hard = place_pillar(clean, _route(plan), np.random.default_rng(seed + 7919), params)
        # the reference route stays the clean one: the pillar is unplanned
        hard = replace(hard, reference_path=clean.reference_path)
        for enabled, bucket, reports in ((False, blind, rb), (True, vision, rv)):
            run_cfg = replace(cfg, avoidance_enabled=enabled, max_decisions=max(len(script), 1))
            rec = run_episode(hard, ScriptedAgent(script), run_cfg, seed=seed)
            bucket.append(rec)
            reports.append(evaluate_episode(rec, hard, mcfg))
    return PairedResult(blind, vision, aggregate(rb), aggregate(rv))


# --- low-level tracking evaluation ------------------------------------------------


@dataclass(frozen=True)
class CommandSchedule:
    """Seeded piecewise-constant command distribution."""

    p_forward: float = 0.6
    p_turn: float = 0.3
    segment: tuple[float, float] = (0.5, 2.0)


def sample_schedule(seed: int, duration: float, profile: CommandProfile = CommandProfile(),
                    schedule: CommandSchedule = CommandSchedule()) -> list[VelocityCommand]:
    rng = np.random.default_rng(seed)
    out, total = [], 0.0
    while total < duration - 1e-9:
        seg = min(float(rng.uniform(*schedule.segment)), duration - total)
        u = rng.random()
        if u < schedule.p_forward:
            cmd = VelocityCommand(profile.v_fwd, 0.0, seg)
        elif u < schedule.p_forward + schedule.p_turn:
            sign = 1.0 if rng.random() < 0.5 else -1.0
            cmd = VelocityCommand(0.0, sign * profile.omega_turn, seg)
        else:
            cmd = VelocityCommand(0.0, 0.0, seg)
        out.append(cmd)
        total += seg
    return out


def obstacle_course(seed: int) -> Scene:
    return generate_scene(seed, SceneParams(size=8.0, obstacle_density=0.15, min_goal_distance=2.0))


def lowlevel_eval(
    scene: Scene,
    duration: float = 60.0,
    seed: int = 0,
    cfg: EpisodeConfig = EpisodeConfig(),
    schedule: CommandSchedule = CommandSchedule(),
) -> dict:
    """Tracking errors and collision rate for one command schedule, with and without avoidance."""
    cmds = sample_schedule(seed, duration, cfg.profile, schedule)
    out = {}
    for label, enabled in (("avoidance_off", False), ("avoidance_on", True)):
        rng = np.random.default_rng(seed)
        sp = scene.start_pose
        state = RobotState(sp.x, sp.y, sp.yaw)
        rows = [(0.0, state.x, state.y, state.yaw, 0.0, 0.0, 0.0, 0.0, False)]
        sensor = ScanWindow(scene, cfg, rng) if enabled else None
        run_cfg = replace(cfg, collision_policy="block")
        for cmd in cmds:
            state, _, _ = drive_command(scene, cmd, state, rows, run_cfg, rng, sensor, 0.0)
        m = lowlevel_metrics(Trace.from_rows(rows))
        out[label] = {COLUMN_NAMES[k]: v for k, v in m.items()}
    out["units"] = {"Linear Vel. Error": "m/s", "Angular Vel. Error": "rad/s", "Collision Rate": "percent of control steps"}
    return out
