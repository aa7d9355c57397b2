"""Command interpretation, first-order motion model, reward terms and observations.

The learned joint-space controller is replaced by a velocity-tracking lag;
reward terms and observation layouts are provided for completeness so that a
policy trained elsewhere can be scored or fed with the same conventions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import NamedTuple, Sequence

import numpy as np

from .action_lang import Action, ActionKind
from .errors import DimensionMismatch, LayoutMismatch
from .lidar import HeightMap
from .scene import Scene, wrap_angle

V_FORWARD = 0.5
OMEGA_TURN = math.pi / 6
# forward, turn left, turn right, stop
COMMAND_VELOCITIES = (V_FORWARD, OMEGA_TURN, -OMEGA_TURN, 0.0)
CONTROL_DT = 0.02


@dataclass(frozen=True)
class CommandProfile:
    v_fwd: float = V_FORWARD
    omega_turn: float = OMEGA_TURN
    stop_hold: float = 0.5


@dataclass(frozen=True)
class VelocityCommand:
    v_cmd: float
    omega_cmd: float
    duration: float

    def __post_init__(self) -> None:
        if abs(self.v_cmd) > 1.0 + 1e-12:
            raise ValueError(f"|v_cmd| must be <= 1.0 m/s, got {self.v_cmd}")
        if abs(self.omega_cmd) > math.pi + 1e-12:
            raise ValueError(f"|omega_cmd| must be <= pi rad/s, got {self.omega_cmd}")
        if not 0.0 < self.duration <= 30.0:
            raise ValueError(f"duration must be in (0, 30] s, got {self.duration}")

    @property
    def is_zero(self) -> bool:
        return self.v_cmd == 0.0 and self.omega_cmd == 0.0

    def to_dict(self) -> dict:
        return {"v_cmd": self.v_cmd, "omega_cmd": self.omega_cmd, "duration": self.duration}

    @classmethod
    def from_dict(cls, d: dict) -> VelocityCommand:
        return cls(d["v_cmd"], d["omega_cmd"], d["duration"])


class RobotState(NamedTuple):
    x: float
    y: float
    yaw: float
    v: float = 0.0
    omega: float = 0.0
    t: float = 0.0


@dataclass(frozen=True)
class DynamicsParams:
    tau_v: float = 0.2
    tau_omega: float = 0.2
    noise_sigma: float = 0.0
    motor_strength: float = 1.0


def interpret_action(action: Action, profile: CommandProfile = CommandProfile()) -> VelocityCommand:
    """Fixed velocities, duration chosen so the nominal motion equals the magnitude."""
    if action.kind is ActionKind.FORWARD:
        return VelocityCommand(profile.v_fwd, 0.0, action.magnitude / profile.v_fwd)
    if action.kind.is_turn:
        sign = 1.0 if action.kind is ActionKind.TURN_LEFT else -1.0
        return VelocityCommand(
            0.0, sign * profile.omega_turn, math.radians(action.magnitude) / profile.omega_turn
        )
    return VelocityCommand(0.0, 0.0, profile.stop_hold)


def step_dynamics(
    s: RobotState,
    cmd: VelocityCommand,
    dt: float,
    params: DynamicsParams = DynamicsParams(),
    rng: np.random.Generator | None = None,
) -> RobotState:
    if not 0.0 < dt <= 0.1 + 1e-12:
        raise ValueError(f"dt must be in (0, 0.1], got {dt}")
    # the lag gain saturates at 1 so a vanishing time constant means instant tracking
    a_v = 1.0 if params.tau_v <= dt else dt / params.tau_v
    a_w = 1.0 if params.tau_omega <= dt else dt / params.tau_omega
    v = s.v + (params.motor_strength * cmd.v_cmd - s.v) * a_v
    w = s.omega + (params.motor_strength * cmd.omega_cmd - s.omega) * a_w
    if params.noise_sigma > 0 and rng is not None:
        v += rng.normal(0.0, params.noise_sigma)
        w += rng.normal(0.0, params.noise_sigma)
    x = s.x + v * math.cos(s.yaw) * dt
    y = s.y + v * math.sin(s.yaw) * dt
    yaw = wrap_angle(s.yaw + w * dt)
    return RobotState(x, y, yaw, v, w, s.t + dt)


def control_steps(duration: float, dt: float) -> list[float]:
    """Step sizes covering ``duration`` exactly: whole ``dt`` steps plus a remainder."""
    n = max(1, math.ceil(duration / dt - 1e-9))
    last = duration - (n - 1) * dt
    return [dt] * (n - 1) + [last]


def execute_command(
    s: RobotState,
    cmd: VelocityCommand,
    dt: float = CONTROL_DT,
    params: DynamicsParams = DynamicsParams(),
    rng: np.random.Generator | None = None,
    settle: float = 0.0,
) -> list[RobotState]:
    """Open-loop rollout of one command, optionally followed by a zero-command settle phase."""
    states = [s]
    for h in control_steps(cmd.duration, dt):
        states.append(step_dynamics(states[-1], cmd, h, params, rng))
    if settle > 0:
        hold = VelocityCommand(0.0, 0.0, settle)
        for h in control_steps(settle, dt):
            states.append(step_dynamics(states[-1], hold, h, params, rng))
    return states


def check_collision(scene: Scene, s, radius: float) -> bool:
    """True iff an occupied cell center lies within ``radius`` (closed) of the robot center."""
    x, y = float(s[0]), float(s[1])
    if not scene.contains(x, y):
        return True
    cs = scene.cell_size
    h, w = scene.occupied.shape
    i0 = max(0, math.floor((x - radius) / cs - 0.5))
    i1 = min(w - 1, math.ceil((x + radius) / cs - 0.5))
    j0 = max(0, math.floor((y - radius) / cs - 0.5))
    j1 = min(h - 1, math.ceil((y + radius) / cs - 0.5))
    if i1 < i0 or j1 < j0:
        return False
    window = scene.occupied[j0 : j1 + 1, i0 : i1 + 1]
    if not window.any():
        return False
    jj, ii = np.nonzero(window)
    cx = (ii + i0 + 0.5) * cs
    cy = (jj + j0 + 0.5) * cs
    return bool((np.hypot(cx - x, cy - y) <= radius + 1e-9).any())


# --- rewards ------------------------------------------------------------------


@dataclass
class JointSnapshot:
    q: np.ndarray
    qdot: np.ndarray
    qddot: np.ndarray
    tau: np.ndarray
    gravity_proj: np.ndarray
    body_height: float
    feet_contact_force: np.ndarray
    feet_velocity: np.ndarray
    v_z: float = 0.0
    omega_xy: np.ndarray = field(default_factory=lambda: np.zeros(2))

    @classmethod
    def zeros(cls, n_joints: int = 12, n_feet: int = 4, body_height: float = 0.0) -> JointSnapshot:
        z = np.zeros(n_joints)
        return cls(
            q=z.copy(), qdot=z.copy(), qddot=z.copy(), tau=z.copy(),
            gravity_proj=np.array([0.0, 0.0, -1.0]), body_height=body_height,
            feet_contact_force=np.zeros(n_feet), feet_velocity=np.zeros(n_feet),
        )

    def check(self) -> None:
        n = len(self.q)
        if n < 1:
            raise DimensionMismatch("need at least one joint")
        for name in ("qdot", "qddot", "tau"):
            if len(getattr(self, name)) != n:
                raise DimensionMismatch(f"{name} has {len(getattr(self, name))} entries, q has {n}")
        if len(self.feet_contact_force) != len(self.feet_velocity):
            raise DimensionMismatch("feet force / velocity lengths differ")
        if len(self.gravity_proj) != 3:
            raise DimensionMismatch("gravity_proj must be a 3-vector")
        if len(self.omega_xy) != 2:
            raise DimensionMismatch("omega_xy must be a 2-vector")


@dataclass(frozen=True)
class RewardWeights:
    lin_track: float = 1.5
    ang_track: float = 1.5
    lin_z_penalty: float = -2.0
    ang_xy_penalty: float = -0.05
    flat: float = -2.0
    joint_acc: float = -2.5e-7
    energy: float = -2e-5
    body_height: float = -5.0
    feet_slip: float = 0.05
    h_target: float = 0.30
    # weight_times_magnitude: a leading minus in the printed expression marks a
    # penalty, so the term is -|w| * magnitude.  literal: w * (printed expression).
    reward_sign_mode: str = "weight_times_magnitude"


REWARD_TERMS = (
    "lin_track", "ang_track", "lin_z_penalty", "ang_xy_penalty", "flat",
    "joint_acc", "energy", "body_height", "feet_slip",
)


def compute_reward_terms(
    j: JointSnapshot, s: RobotState, cmd: VelocityCommand, w: RewardWeights = RewardWeights()
) -> dict[str, float]:
    j.check()
    v_err = np.array([cmd.v_cmd - s.v, 0.0])
    g = np.asarray(j.gravity_proj, dtype=float)
    power = np.asarray(j.tau, dtype=float) * np.asarray(j.qdot, dtype=float)
    slipping = np.asarray(j.feet_velocity, dtype=float) * (np.asarray(j.feet_contact_force) > 1.0)
    energy_mag = float(power @ power)
    slip_mag = float(np.linalg.norm(slipping))
    if w.reward_sign_mode == "weight_times_magnitude":
        energy = -abs(w.energy) * energy_mag
        slip = -abs(w.feet_slip) * slip_mag
    elif w.reward_sign_mode == "literal":
        energy = w.energy * -energy_mag
        slip = w.feet_slip * -slip_mag
    else:
        raise ValueError(f"unknown reward_sign_mode {w.reward_sign_mode!r}")
    qdd = np.asarray(j.qddot, dtype=float)
    wxy = np.asarray(j.omega_xy, dtype=float)
    terms = {
        "lin_track": w.lin_track * math.exp(-float(v_err @ v_err)),
        "ang_track": w.ang_track * math.exp(-((cmd.omega_cmd - s.omega) ** 2)),
        "lin_z_penalty": w.lin_z_penalty * j.v_z**2,
        "ang_xy_penalty": w.ang_xy_penalty * float(wxy @ wxy),
        "flat": w.flat * float(g[:2] @ g[:2]),
        "joint_acc": w.joint_acc * float(qdd @ qdd),
        "energy": energy,
        "body_height": w.body_height * (w.h_target - j.body_height) ** 2,
        "feet_slip": slip,
    }
    terms["total"] = sum(terms.values())
    return terms


# --- domain randomization --------------------------------------------------------


@dataclass(frozen=True)
class RandomizationRanges:
    body_mass: tuple[float, float] = (-3.0, 3.0)
    static_friction: tuple[float, float] = (0.4, 4.0)
    dynamic_friction: tuple[float, float] = (0.4, 4.0)
    motor_strength: tuple[float, float] = (0.9, 1.1)
    # [dt, dt]: a fixed one-control-step delay
    system_delay_steps: tuple[int, int] = (1, 1)


DOMAIN_RAND = RandomizationRanges()


@dataclass(frozen=True)
class RandomizationSample:
    body_mass_offset: float
    static_friction: float
    dynamic_friction: float
    motor_strength: float
    system_delay: int


def sample_randomization(seed: int, ranges: RandomizationRanges = DOMAIN_RAND) -> RandomizationSample:
    rng = np.random.default_rng(seed)
    u = rng.uniform
    return RandomizationSample(
        body_mass_offset=float(u(*ranges.body_mass)),
        static_friction=float(u(*ranges.static_friction)),
        dynamic_friction=float(u(*ranges.dynamic_friction)),
        motor_strength=float(u(*ranges.motor_strength)),
        system_delay=int(ranges.system_delay_steps[0]),
    )


def sample_randomization_batch(n: int, seed: int = 0, ranges: RandomizationRanges = DOMAIN_RAND) -> dict[str, np.ndarray]:
    """``n`` draws as columns, one array per parameter."""
    rng = np.random.default_rng(seed)
    return {
        "body_mass_offset": rng.uniform(*ranges.body_mass, size=n),
        "static_friction": rng.uniform(*ranges.static_friction, size=n),
        "dynamic_friction": rng.uniform(*ranges.dynamic_friction, size=n),
        "motor_strength": rng.uniform(*ranges.motor_strength, size=n),
        "system_delay": rng.integers(ranges.system_delay_steps[0], ranges.system_delay_steps[1] + 1, size=n),
    }


# --- observations -------------------------------------------------------------


@dataclass(frozen=True)
class ProprioLayout:
    """Ordered (name, width) fields of one full proprioceptive vector."""

    fields: tuple[tuple[str, int], ...]

    @classmethod
    def for_joints(cls, n: int = 12) -> ProprioLayout:
        return cls((("lin_vel", 3), ("ang_vel", 3), ("gravity", 3), ("q", n), ("qdot", n), ("prev_action", n)))

    @property
    def size(self) -> int:
        return sum(width for _, width in self.fields)

    def slice(self, name: str) -> slice:
        start = 0
        for fname, width in self.fields:
            if fname == name:
                return slice(start, start + width)
            start += width
        raise KeyError(name)

    def actor_size(self) -> int:
        return self.size - dict(self.fields).get("lin_vel", 0)


DEFAULT_LAYOUT = ProprioLayout.for_joints(12)
CRITIC_SCAN_SHAPE = (17, 11)


def assemble_actor_obs(
    history: Sequence[np.ndarray],
    cmd: VelocityCommand,
    hmap: HeightMap | np.ndarray,
    layout: ProprioLayout = DEFAULT_LAYOUT,
) -> np.ndarray:
    """``[history blocks without lin_vel, oldest first | v_cmd, omega_cmd | height map]``."""
    if len(history) == 0:
        raise LayoutMismatch("empty proprioceptive history")
    keep = np.ones(layout.size, dtype=bool)
    keep[layout.slice("lin_vel")] = False
    blocks = []
    for k, vec in enumerate(history):
        vec = np.asarray(vec, dtype=float).ravel()
        if vec.size != layout.size:
            raise LayoutMismatch(f"history[{k}] has {vec.size} values, layout expects {layout.size}")
        blocks.append(vec[keep])
    values = hmap.values if isinstance(hmap, HeightMap) else np.asarray(hmap, dtype=float)
    return np.concatenate(blocks + [np.array([cmd.v_cmd, cmd.omega_cmd]), values.ravel()])


def full_proprio(
    j: JointSnapshot, s: RobotState, prev_action: np.ndarray | None = None,
    layout: ProprioLayout = DEFAULT_LAYOUT,
) -> np.ndarray:
    j.check()
    n = len(j.q)
    if layout.slice("q").stop - layout.slice("q").start != n:
        raise LayoutMismatch(f"snapshot has {n} joints, layout expects {layout.slice('q')}")
    prev = np.zeros(n) if prev_action is None else np.asarray(prev_action, dtype=float)
    if prev.size != n:
        raise LayoutMismatch("prev_action length differs from joint count")
    parts = {
        "lin_vel": [s.v, 0.0, j.v_z],
        "ang_vel": [j.omega_xy[0], j.omega_xy[1], s.omega],
        "gravity": j.gravity_proj,
        "q": j.q,
        "qdot": j.qdot,
        "prev_action": prev,
    }
    return np.concatenate([np.asarray(parts[name], dtype=float) for name, _ in layout.fields])


def assemble_critic_obs(
    j: JointSnapshot,
    s: RobotState,
    cmd: VelocityCommand,
    height_scan: np.ndarray,
    prev_action: np.ndarray | None = None,
    layout: ProprioLayout = DEFAULT_LAYOUT,
    scan_shape: tuple[int, int] = CRITIC_SCAN_SHAPE,
) -> np.ndarray:
    """``[full proprio incl. lin_vel | v_cmd, omega_cmd | privileged height scan]``."""
    scan = np.asarray(height_scan, dtype=float)
    if scan.shape != tuple(scan_shape):
        raise LayoutMismatch(f"height scan shape {scan.shape}, expected {tuple(scan_shape)}")
    return np.concatenate([full_proprio(j, s, prev_action, layout), [cmd.v_cmd, cmd.omega_cmd], scan.ravel()])


def privileged_height_scan(
    scene: Scene, s, shape: tuple[int, int] = CRITIC_SCAN_SHAPE, spacing: float = 0.1,
    obstacle_height: float = 1.0,
) -> np.ndarray:
    """Terrain heights (relative to the ground under the robot) on a robot-centred lattice."""
    nx, ny = shape
    xs = (np.arange(nx) - (nx - 1) / 2) * spacing
    ys = (np.arange(ny) - (ny - 1) / 2) * spacing
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    c, si = math.cos(s[2]), math.sin(s[2])
    wx = s[0] + c * X - si * Y
    wy = s[1] + si * X + c * Y
    h, w = scene.occupied.shape
    i = np.clip(np.floor(wx / scene.cell_size).astype(int), 0, w - 1)
    jj = np.clip(np.floor(wy / scene.cell_size).astype(int), 0, h - 1)
    ci, cj = scene.cell_of(s[0], s[1])
    base = scene.ground_height[cj, ci]
    heights = scene.ground_height[jj, i] + np.where(scene.occupied[jj, i], obstacle_height, 0.0)
    return heights - base


# --- reactive avoidance -----------------------------------------------------------


@dataclass(frozen=True)
class AvoidParams:
    lookahead: float = 0.8
    block_height: float = 0.05
    half_width: float = 0.35
    side_extent: float = 0.8
    omega_turn: float = OMEGA_TURN
    quantum: float = CONTROL_DT


def avoid_adjust(cmd: VelocityCommand, hmap: HeightMap, params: AvoidParams = AvoidParams()) -> VelocityCommand:
    """Override a forward command when the height map shows an obstacle in the swept band.

    Turns in place toward the side band with the lower maximum height (left on
    ties); stops for one quantum when both side bands are blocked. Commands
    without forward motion pass through unchanged.
    """
    if cmd.v_cmd <= 0.0:
        return cmd
    x, y = hmap.robot_frame_centers()
    tall = hmap.valid & (hmap.values > params.block_height)
    ahead = (x > 0.0) & (x <= params.lookahead)
    if not (tall & ahead & (np.abs(y) <= params.half_width)).any():
        return cmd
    heights = np.where(hmap.valid, hmap.values, hmap.config.z_clip[0])
    left = ahead & (y > params.half_width) & (y <= params.side_extent)
    right = ahead & (y < -params.half_width) & (y >= -params.side_extent)
    left_max = heights[left].max(initial=-np.inf)
    right_max = heights[right].max(initial=-np.inf)
    left_blocked = (tall & left).any()
    right_blocked = (tall & right).any()
    if left_blocked and right_blocked:
        return VelocityCommand(0.0, 0.0, params.quantum)
    omega = params.omega_turn if left_max <= right_max else -params.omega_turn
    return VelocityCommand(0.0, omega, cmd.duration)


def replace_params(obj, **changes):
    """``dataclasses.replace`` that ignores unknown keys (config merging helper)."""
    names = {f.name for f in fields(obj)}
    return replace(obj, **{k: v for k, v in changes.items() if k in names})
