"""Closed-loop episodes: agent text -> parsed action -> simulated motion with sensing."""

from __future__ import annotations

import base64
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import httpx
import numpy as np

from .action_lang import DEFAULT_LIMITS, Action, ActionKind, Limits, format_action, parse_action
from .datagen import build_nav_prompt, sample_frames
from .errors import (
    ActionParseError,
    AgentError,
    AgentTimeout,
    BadResponse,
    DegenerateTrajectory,
    TransportError,
    Unreachable,
)
from .lidar import HeightMapConfig, HeightMapFilter, LidarConfig, perception_range, simulate_scan
from .locomotion import (
    AvoidParams,
    CommandProfile,
    DynamicsParams,
    RobotState,
    VelocityCommand,
    avoid_adjust,
    check_collision,
    control_steps,
    interpret_action,
    step_dynamics,
)
from .records import Decision, EpisodeRecord, Termination, Trace
from .scene import (
    DEFAULT_ROBOT_RADIUS,
    Scene,
    TraversabilityGrid,
    geodesic_distance,
    inflate,
    line_of_sight,
    wrap_angle,
)


@dataclass(frozen=True)
class EpisodeConfig:
    max_decisions: int = 50
    success_radius: float = 3.0
    dt: float = 0.02
    frames_budget: int = 8
    avoidance_enabled: bool = False
    collision_policy: str = "block"  # block | terminate
    robot_radius: float = DEFAULT_ROBOT_RADIUS
    # zero-command time appended after every command so the lag settles
    settle: float = 0.0
    scan_rate: float = 15.0
    render_dir: str | None = None
    profile: CommandProfile = field(default_factory=CommandProfile)
    dynamics: DynamicsParams = field(default_factory=DynamicsParams)
    limits: Limits = DEFAULT_LIMITS
    lidar: LidarConfig = field(default_factory=LidarConfig)
    heightmap: HeightMapConfig = field(default_factory=HeightMapConfig)
    avoid: AvoidParams = field(default_factory=AvoidParams)

    def __post_init__(self) -> None:
        if not 8 <= self.frames_budget <= 64:
            raise ValueError(f"frames_budget must be within [8, 64], got {self.frames_budget}")
        if self.max_decisions < 1:
            raise ValueError("max_decisions must be at least 1")
        if self.collision_policy not in ("block", "terminate"):
            raise ValueError(f"unknown collision_policy {self.collision_policy!r}")
        if not 0.0 < self.dt <= 0.1:
            raise ValueError("dt must be within (0, 0.1]")


class Agent(Protocol):
    def decide(self, obs: dict) -> str: ...


# --- oracle --------------------------------------------------------------------


@dataclass(frozen=True)
class OracleConfig:
    fwd_step: float = 0.25
    turn_step: float = 15.0
    stop_radius: float = 0.25
    # paths are planned with the widest of these clearances whose route is at
    # most ``max_detour`` times the geodesic at the robot radius
    plan_radii: tuple[float, ...] = (0.45, 0.40, 0.35, 0.30)
    max_detour: float = 1.15
    lookahead: float = 1.5


def _first_waypoint(grid: TraversabilityGrid, pose, path: Sequence, cfg: OracleConfig):
    """Farthest path point within ``lookahead`` that is in sight and at least ``fwd_step`` away."""
    here = (float(pose[0]), float(pose[1]))
    chosen = None
    for p in path:
        d = math.dist(here, p)
        if d > cfg.lookahead:
            break
        if d >= cfg.fwd_step and line_of_sight(grid, here, p):
            chosen = p
    if chosen is None:
        chosen = next((p for p in path if math.dist(here, p) >= cfg.fwd_step), path[-1])
    return chosen


def _cell_path(grid: TraversabilityGrid, start_cell, goal_cell) -> list:
    dist, pred = grid.field_from(goal_cell)
    node = grid.flat(start_cell)
    if not np.isfinite(dist[node]):
        raise Unreachable(f"no path {start_cell} -> {goal_cell}")
    target = grid.flat(goal_cell)
    out = [grid.center(grid.unflat(node))]
    while node != target:
        node = int(pred[node])
        out.append(grid.center(grid.unflat(node)))
    return out


def oracle_next_action(
    grid: TraversabilityGrid,
    pose,
    goal,
    cfg: OracleConfig = OracleConfig(),
    plan_grid: TraversabilityGrid | None = None,
) -> Action:
    """Shortest-path follower: stop near the goal, else turn toward the path or step forward.

    ``grid`` measures the distance to the goal; ``plan_grid`` (default ``grid``)
    supplies the path. Endpoints in blocked cells are snapped to the nearest
    free cell. Heading errors of exactly pi turn left.
    """
    start = grid.nearest_free(grid.cell_of(pose))
    goal_cell = grid.nearest_free(grid.cell_of(goal))
    d = geodesic_distance(grid, grid.center(start), grid.center(goal_cell))
    if not math.isfinite(d):
        raise Unreachable("goal unreachable from pose")
    if d <= cfg.stop_radius:
        return Action.stop()
    plan = grid if plan_grid is None else plan_grid
    try:
        path = _cell_path(plan, plan.nearest_free(plan.cell_of(pose)), plan.nearest_free(plan.cell_of(goal)))
    except Unreachable:
        plan = grid
        path = _cell_path(grid, start, goal_cell)
    path[-1] = (float(goal[0]), float(goal[1]))
    target = _first_waypoint(plan, pose, path, cfg)
    err = wrap_angle(math.atan2(target[1] - pose[1], target[0] - pose[0]) - pose[2])
    if abs(err) > math.radians(cfg.turn_step) / 2:
        return Action.turn_left(cfg.turn_step) if err > 0 else Action.turn_right(cfg.turn_step)
    return Action.forward(cfg.fwd_step)


class OracleAgent:
    """Geodesic follower reading the pose from the observation metadata."""

    def __init__(self, scene: Scene | None = None, cfg: OracleConfig = OracleConfig(), robot_radius: float = DEFAULT_ROBOT_RADIUS):
        self.cfg = cfg
        self.robot_radius = robot_radius
        self.scene = None
        if scene is not None:
            self.reset(scene)

    def reset(self, scene: Scene) -> None:
        if self.scene is scene:
            return
        self.scene = scene
        self.grid = inflate(scene, self.robot_radius)
        self.plan_grid = self.grid
        base = self._route_length(self.grid, scene)
        for r in self.cfg.plan_radii:
            if r <= self.robot_radius:
                break
            g = inflate(scene, r)
            try:
                length = self._route_length(g, scene)
            except Unreachable:
                continue
            if length <= self.cfg.max_detour * base:
                self.plan_grid = g
                break

    def _route_length(self, g: TraversabilityGrid, scene: Scene) -> float:
        s = g.nearest_free(g.cell_of(scene.start_pose))
        c = g.nearest_free(g.cell_of(scene.goal))
        if math.dist(g.center(c), scene.goal) > self.cfg.stop_radius:
            raise Unreachable("goal cell blocked at this clearance")
        return float(g.field_from(c)[0][g.flat(s)])

    def decide(self, obs: dict) -> str:
        if self.scene is None:
            raise AgentError("oracle agent has no scene")
        p = obs["pose"]
        try:
            action = oracle_next_action(
                self.grid, (p["x"], p["y"], p["yaw"]), self.scene.goal, self.cfg, self.plan_grid
            )
        except Unreachable as exc:
            raise AgentError(f"oracle cannot reach the goal: {exc}") from None
        return format_action(action)


class ScriptedAgent:
    """Replays a fixed list of responses, then answers ``stop``."""

    def __init__(self, responses: Sequence[str]):
        self.responses = list(responses)
        self.calls = 0

    @classmethod
    def from_actions(cls, actions: Sequence[Action]) -> ScriptedAgent:
        return cls([format_action(a) for a in actions])

    @classmethod
    def from_record(cls, record: EpisodeRecord) -> ScriptedAgent:
        return cls([d.raw_text for d in record.decisions])

    def decide(self, obs: dict) -> str:
        k = self.calls
        self.calls += 1
        return self.responses[k] if k < len(self.responses) else "stop"


class ExternalAgent:
    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 2):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self._client = httpx.Client(timeout=timeout)

    def decide(self, obs: dict) -> str:
        refs = list(obs["history_refs"]) + [obs["current_ref"]]
        meta = {"pose": obs["pose"], "scene_id": obs["scene_id"], "step": obs["step"]}
        return external_agent_query(
            self.endpoint, obs["prompt"], refs, self.timeout, self.retries, meta, client=self._client
        )

    def close(self) -> None:
        self._client.close()


# --- external endpoint client -------------------------------------------------------------


def _image_entry(ref: str) -> dict:
    path = Path(ref)
    if path.suffix.lower() == ".png" and path.is_file():
        data = base64.b64encode(path.read_bytes()).decode("ascii")
        url = f"data:image/png;base64,{data}"
    else:
        url = ref if "://" in ref else f"file://{ref}"
    return {"type": "image_url", "image_url": {"url": url}}


def chat_request_body(prompt: str, frames: Sequence[str], metadata: dict | None = None) -> dict:
    content = [{"type": "text", "text": prompt}] + [_image_entry(f) for f in frames]
    body = {"messages": [{"role": "user", "content": content}]}
    if metadata is not None:
        body["metadata"] = metadata
    return body


def external_agent_query(
    endpoint: str,
    prompt: str,
    frames: Sequence[str],
    timeout: float = 30.0,
    retries: int = 2,
    metadata: dict | None = None,
    client: httpx.Client | None = None,
) -> str:
    """POST a chat-completion body and return ``choices[0].message.content`` verbatim.

    Timeouts, transport failures and bad responses are retried ``retries``
    times, then the last error is raised.
    """
    body = chat_request_body(prompt, frames, metadata)
    own = client is None
    client = httpx.Client(timeout=timeout) if own else client
    last: AgentError = TransportError("no attempt made")
    try:
        for _ in range(retries + 1):
            try:
                resp = client.post(endpoint, json=body, timeout=timeout)
            except httpx.TimeoutException as exc:
                last = AgentTimeout(f"{endpoint}: timed out ({exc})")
                continue
            except httpx.HTTPError as exc:
                last = TransportError(f"{endpoint}: {exc}")
                continue
            if not 200 <= resp.status_code < 300:
                last = BadResponse(f"{endpoint}: HTTP {resp.status_code}")
                continue
            try:
                text = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError):
                last = BadResponse(f"{endpoint}: response has no completion text")
                continue
            if not isinstance(text, str):
                last = BadResponse(f"{endpoint}: completion is not a string")
                continue
            return text
    finally:
        if own:
            client.close()
    raise last


# --- rendering ---------------------------------------------------------------------


def render_topdown(scene: Scene, pose, path: str | Path, size: int = 96, span: float = 4.0) -> str:
    """Heading-up occupancy crop around the robot, saved as PNG."""
    from PIL import Image

    half = span / 2
    u = (np.arange(size) + 0.5) / size * span - half
    fwd, left = np.meshgrid(u[::-1], -u, indexing="ij")  # rows: ahead at top; cols: left to right
    c, s = math.cos(pose[2]), math.sin(pose[2])
    wx = pose[0] + c * fwd - s * left
    wy = pose[1] + s * fwd + c * left
    h, w = scene.occupied.shape
    i = np.floor(wx / scene.cell_size).astype(int)
    j = np.floor(wy / scene.cell_size).astype(int)
    inside = (i >= 0) & (i < w) & (j >= 0) & (j < h)
    occ = np.ones((size, size), dtype=bool)
    occ[inside] = scene.occupied[j[inside], i[inside]]
    img = np.where(occ, 40, 230).astype(np.uint8)
    gd = np.hypot(wx - scene.goal[0], wy - scene.goal[1])
    rgb = np.stack([img, img, img], axis=-1)
    rgb[gd <= 0.2] = (220, 40, 40)
    m = size // 2
    rgb[m - 1 : m + 2, m - 1 : m + 2] = (40, 90, 220)
    Image.fromarray(rgb, "RGB").save(path)
    return str(path)


# --- episode loop ----------------------------------------------------------------------


def _pose_tuple(s: RobotState) -> tuple[float, float, float]:
    return (s.x, s.y, s.yaw)


class ScanWindow:
    """Height-map window refreshed at the scan rate while forward motion is commanded."""

    def __init__(self, scene: Scene, cfg: EpisodeConfig, rng: np.random.Generator):
        self.scene = scene
        self.cfg = cfg
        self.rng = rng
        self.range_limit = perception_range(cfg.heightmap, cfg.lidar)
        self.period = 1.0 / cfg.scan_rate
        self.reset(0.0)

    def reset(self, t: float) -> None:
        self.filter = HeightMapFilter(self.cfg.heightmap)
        self.next_scan = t

    def current(self, s: RobotState):
        if s.t + 1e-9 >= self.next_scan:
            seed = int(self.rng.integers(2**32)) if self.cfg.lidar.range_noise > 0 else None
            self.filter.push(simulate_scan(self.scene, s, self.cfg.lidar, seed, self.range_limit))
            self.next_scan += self.period
            if self.next_scan <= s.t:
                self.next_scan = s.t + self.period
        return self.filter.current()


def drive_command(scene, cmd, state, rows, cfg, rng, sensor, settle) -> tuple[RobotState, bool, bool]:
    """Integrate one command; returns (state, collided, terminated)."""
    collided = False
    phases = [(cmd, control_steps(cmd.duration, cfg.dt))]
    if settle > 0:
        phases.append((VelocityCommand(0.0, 0.0, settle), control_steps(settle, cfg.dt)))
    if sensor is not None and cmd.v_cmd > 0:
        sensor.reset(state.t)
    for phase_cmd, steps in phases:
        for h in steps:
            eff = phase_cmd
            if sensor is not None and phase_cmd.v_cmd > 0:
                eff = avoid_adjust(phase_cmd, sensor.current(state), cfg.avoid)
            nxt = step_dynamics(state, eff, h, cfg.dynamics, rng)
            contact = check_collision(scene, nxt, cfg.robot_radius)
            if contact:
                collided = True
                if cfg.collision_policy == "terminate":
                    rows.append((nxt.t, nxt.x, nxt.y, nxt.yaw, nxt.v, nxt.omega, eff.v_cmd, eff.omega_cmd, True))
                    return nxt, True, True
                nxt = RobotState(state.x, state.y, nxt.yaw, 0.0, nxt.omega, nxt.t)
            rows.append((nxt.t, nxt.x, nxt.y, nxt.yaw, nxt.v, nxt.omega, eff.v_cmd, eff.omega_cmd, contact))
            state = nxt
    return state, collided, False


def run_episode(
    scene: Scene,
    agent: Agent,
    cfg: EpisodeConfig = EpisodeConfig(),
    seed: int = 0,
    episode_index: int = 0,
) -> EpisodeRecord:
    """Run one episode to stop, decision budget, collision termination or agent failure."""
    t0 = time.perf_counter()
    if hasattr(agent, "reset"):
        agent.reset(scene)
    rng = np.random.default_rng(seed)
    sp = scene.start_pose
    state = RobotState(sp.x, sp.y, wrap_angle(sp.yaw))
    rows = [(0.0, state.x, state.y, state.yaw, 0.0, 0.0, 0.0, 0.0, False)]
    sensor = ScanWindow(scene, cfg, rng) if cfg.avoidance_enabled else None
    render_dir = Path(cfg.render_dir) if cfg.render_dir else None
    if render_dir is not None:
        render_dir.mkdir(parents=True, exist_ok=True)
    frames: list[str] = []
    decisions: list[Decision] = []
    termination = Termination.MAX_DECISIONS
    stop_issued = False
    for k in range(cfg.max_decisions):
        name = f"{scene.scene_id}_ep{episode_index:05d}_f{k:04d}"
        if render_dir is not None:
            frames.append(render_topdown(scene, _pose_tuple(state), render_dir / f"{name}.png"))
        else:
            frames.append(f"{scene.scene_id}/ep{episode_index:05d}/frame{k:04d}")
        ids = sample_frames(k, cfg.frames_budget)
        obs = {
            "instruction": scene.instruction,
            "scene_id": scene.scene_id,
            "step": k,
            "frame_indices": ids,
            "history_refs": [frames[i] for i in ids[:-1]],
            "current_ref": frames[k],
            "prompt": build_nav_prompt(scene.instruction, len(ids) - 1, ids),
            "pose": {"x": state.x, "y": state.y, "yaw": state.yaw},
        }
        start_pose = _pose_tuple(state)
        text = ""
        try:
            text = agent.decide(obs)
            action = parse_action(text, cfg.limits).action
        except (AgentError, ActionParseError) as exc:
            error = f"{type(exc).__name__}: {exc}"
            decisions.append(Decision(text, None, None, start_pose, start_pose, False, frames[k], error))
            termination = Termination.AGENT_ERROR
            break
        cmd = interpret_action(action, cfg.profile)
        state, collided, ended = drive_command(scene, cmd, state, rows, cfg, rng, sensor, cfg.settle)
        decisions.append(
            Decision(text, action, cmd.to_dict(), start_pose, _pose_tuple(state), collided, frames[k])
        )
        if ended:
            termination = Termination.COLLISION_TERMINATE
            break
        if action.kind is ActionKind.STOP:
            stop_issued = True
            termination = Termination.STOP
            break
    return EpisodeRecord(
        scene_id=scene.scene_id,
        instruction=scene.instruction,
        decisions=decisions,
        trajectory=Trace.from_rows(rows),
        stop_issued=stop_issued,
        termination=termination,
        goal=scene.goal,
        episode_index=episode_index,
        seed=seed,
        wall_time=time.perf_counter() - t0,
    )


# --- trajectory discretization ------------------------------------------------------


@dataclass(frozen=True)
class DiscretizeConfig:
    fwd_quantum: float = 0.25
    turn_quantum: float = 15.0


def traj_to_actions(poses: Sequence[Sequence[float]], cfg: DiscretizeConfig = DiscretizeConfig()) -> list[Action]:
    """Greedy quantization of a pose sequence into turns and forward steps, ending with stop.

    A virtual pose tracks where the emitted actions lead, so rounding errors
    do not accumulate across segments.
    """
    if len(poses) < 2:
        raise DegenerateTrajectory(f"need at least 2 poses, got {len(poses)}")
    q_turn = math.radians(cfg.turn_quantum)
    vx, vy, vyaw = (float(v) for v in poses[0][:3])
    out: list[Action] = []
    for p in poses[1:]:
        n = round(wrap_angle(float(p[2]) - vyaw) / q_turn)
        if n != 0:
            deg = abs(n) * cfg.turn_quantum
            out.append(Action.turn_left(deg) if n > 0 else Action.turn_right(deg))
            vyaw = wrap_angle(vyaw + n * q_turn)
        along = (float(p[0]) - vx) * math.cos(vyaw) + (float(p[1]) - vy) * math.sin(vyaw)
        m = round(along / cfg.fwd_quantum)
        if m > 0:
            dist = m * cfg.fwd_quantum
            while dist > 1e-12:
                chunk = min(dist, DEFAULT_LIMITS.max_forward_m)
                out.append(Action.forward(chunk))
                dist -= chunk
            vx += m * cfg.fwd_quantum * math.cos(vyaw)
            vy += m * cfg.fwd_quantum * math.sin(vyaw)
    out.append(Action.stop())
    return out


def replay_ideal(start: Sequence[float], actions: Sequence[Action]) -> tuple[float, float, float]:
    """Final pose after executing ``actions`` exactly (no lag, no noise)."""
    x, y, yaw = (float(v) for v in start[:3])
    for a in actions:
        if a.kind is ActionKind.FORWARD:
            x += a.magnitude * math.cos(yaw)
            y += a.magnitude * math.sin(yaw)
        elif a.kind is ActionKind.TURN_LEFT:
            yaw = wrap_angle(yaw + math.radians(a.magnitude))
        elif a.kind is ActionKind.TURN_RIGHT:
            yaw = wrap_angle(yaw - math.radians(a.magnitude))
    return x, y, yaw


# --- runner -------------------------------------------------------------------------------


def make_agent(spec: dict, scene: Scene | None = None) -> Agent:
    """Agent from a picklable description: ``{"kind": "oracle" | "scripted" | "external", ...}``."""
    kind = spec.get("kind")
    if kind == "oracle":
        return OracleAgent(scene, OracleConfig(**spec.get("oracle", {})))
    if kind == "scripted":
        return ScriptedAgent(spec.get("responses", []))
    if kind == "external":
        if not spec.get("endpoint"):
            raise AgentError("external agent needs an endpoint")
        return ExternalAgent(spec["endpoint"], spec.get("timeout", 30.0), spec.get("retries", 2))
    raise ValueError(f"unknown agent kind {kind!r}")


def _run_one(job) -> EpisodeRecord:
    scene, spec, cfg, seed, index = job
    agent = make_agent(spec, scene)
    try:
        return run_episode(scene, agent, cfg, seed, index)
    finally:
        if hasattr(agent, "close"):
            agent.close()


def run_episodes(
    scenes: Sequence[Scene],
    agent_spec: dict,
    cfg: EpisodeConfig = EpisodeConfig(),
    base_seed: int = 0,
    workers: int = 1,
) -> list[EpisodeRecord]:
    """One episode per scene with seed ``base_seed + index``; results in index order."""
    jobs = [(scene, agent_spec, cfg, base_seed + i, i) for i, scene in enumerate(scenes)]
    if workers <= 1 or len(jobs) <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        records = list(pool.map(_run_one, jobs))
    return sorted(records, key=lambda r: r.episode_index)
