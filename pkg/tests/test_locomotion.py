from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from navharness.action_lang import Action
from navharness.errors import DimensionMismatch, LayoutMismatch
from navharness.lidar import HeightMap, HeightMapConfig
from navharness.locomotion import (
    CRITIC_SCAN_SHAPE,
    DEFAULT_LAYOUT,
    AvoidParams,
    DynamicsParams,
    JointSnapshot,
    ProprioLayout,
    RewardWeights,
    RobotState,
    VelocityCommand,
    assemble_actor_obs,
    assemble_critic_obs,
    avoid_adjust,
    check_collision,
    compute_reward_terms,
    control_steps,
    execute_command,
    full_proprio,
    interpret_action,
    privileged_height_scan,
    sample_randomization,
    sample_randomization_batch,
    step_dynamics,
)
from conftest import open_room


def test_interpret_examples():
    assert interpret_action(Action.forward(0.75)) == VelocityCommand(0.5, 0.0, 1.5)
    c = interpret_action(Action.turn_right(30))
    assert (c.v_cmd, c.omega_cmd) == (0.0, -math.pi / 6)
    assert c.duration == pytest.approx(1.0)
    assert interpret_action(Action.turn_left(45)).omega_cmd == math.pi / 6
    assert interpret_action(Action.stop()) == VelocityCommand(0.0, 0.0, 0.5)


@pytest.mark.parametrize("args", [(1.5, 0, 1), (0, 4.0, 1), (0, 0, 0), (0, 0, 31)])
def test_command_bounds(args):
    with pytest.raises(ValueError):
        VelocityCommand(*args)


def test_step_fixed_point():
    s = RobotState(0, 0, 0, v=0.5)
    assert step_dynamics(s, VelocityCommand(0.5, 0, 1), 0.02).v == 0.5


def test_step_lag():
    s = step_dynamics(RobotState(0, 0, 0), VelocityCommand(0.5, 0, 1), 0.02)
    assert s.v == pytest.approx(0.05)
    assert s.x == pytest.approx(0.05 * 0.02)
    assert s.t == pytest.approx(0.02)


def test_step_yaw():
    s = step_dynamics(RobotState(0, 0, 0, omega=math.pi / 6), VelocityCommand(0, math.pi / 6, 1), 0.02)
    assert s.yaw == pytest.approx(math.pi / 6 * 0.02)


def test_step_dt_bounds():
    with pytest.raises(ValueError):
        step_dynamics(RobotState(0, 0, 0), VelocityCommand(0, 0, 1), 0.2)


def test_noise_is_seeded():
    p = DynamicsParams(noise_sigma=0.05)
    cmd = VelocityCommand(0.5, 0, 1)
    a = execute_command(RobotState(0, 0, 0), cmd, params=p, rng=np.random.default_rng(3))
    b = execute_command(RobotState(0, 0, 0), cmd, params=p, rng=np.random.default_rng(3))
    assert a == b
    assert a != execute_command(RobotState(0, 0, 0), cmd, params=p, rng=np.random.default_rng(4))


def test_control_steps_cover_duration():
    steps = control_steps(1.51, 0.02)
    assert math.fsum(steps) == pytest.approx(1.51)
    assert len(steps) == 76


@pytest.mark.parametrize("d", [0.25, 0.5, 0.75, 1.3])
def test_displacement_bounds(d):
    dt, tau = 0.02, 0.2
    states = execute_command(RobotState(0, 0, 0), interpret_action(Action.forward(d)), dt, DynamicsParams(tau_v=tau))
    x = states[-1].x
    assert d - 0.5 * (tau + dt) <= x <= d


def test_displacement_converges_without_lag():
    d = 0.75
    states = execute_command(RobotState(0, 0, 0), interpret_action(Action.forward(d)), 0.02, DynamicsParams(tau_v=0.0))
    assert abs(states[-1].x - d) <= 0.02 * 0.5


@given(st.floats(1, 180))
def test_turn_symmetry(theta):
    left = execute_command(RobotState(0, 0, 0), interpret_action(Action.turn_left(theta)))[-1]
    right = execute_command(RobotState(0, 0, 0), interpret_action(Action.turn_right(theta)))[-1]
    assert left.yaw == pytest.approx(-right.yaw, abs=1e-12)


def test_collision_rules():
    scene = open_room((20, 20))
    assert not check_collision(scene, (1.0, 1.0, 0), 0.3)
    occ = np.array(scene.occupied)
    occ[10, 10] = True  # center (1.05, 1.05)
    s2 = scene.with_occupancy(occ)
    assert check_collision(s2, (1.0, 1.05, 0), 0.3)
    assert check_collision(s2, (1.35, 1.05, 0), 0.3)  # exactly on the radius
    assert not check_collision(s2, (1.36, 1.05, 0), 0.3)
    assert check_collision(s2, (-1.0, 1.0, 0), 0.3)


def _snapshot(**kw):
    j = JointSnapshot.zeros(body_height=0.30)
    for k, v in kw.items():
        setattr(j, k, v)
    return j


def test_reward_perfect_tracking():
    cmd = VelocityCommand(0.5, 0.2, 1)
    t = compute_reward_terms(_snapshot(), RobotState(0, 0, 0, v=0.5, omega=0.2), cmd)
    assert t["lin_track"] == 1.5
    assert t["ang_track"] == 1.5
    assert t["total"] == pytest.approx(3.0)


def test_reward_examples():
    cmd = VelocityCommand(0, 0, 1)
    s = RobotState(0, 0, 0)
    assert compute_reward_terms(_snapshot(v_z=1.0), s, cmd)["lin_z_penalty"] == -2.0
    qdd = np.zeros(12)
    qdd[0] = 1000.0
    assert compute_reward_terms(_snapshot(qddot=qdd), s, cmd)["joint_acc"] == pytest.approx(-0.25)


def test_reward_sign_modes():
    cmd = VelocityCommand(0, 0, 1)
    s = RobotState(0, 0, 0)
    j = _snapshot(tau=np.full(12, 2.0), qdot=np.full(12, 1.0), feet_contact_force=np.array([5.0, 0, 0, 0]),
                  feet_velocity=np.array([0.3, 1.0, 0, 0]))
    default = compute_reward_terms(j, s, cmd)
    assert default["energy"] == pytest.approx(-2e-5 * 48)
    assert default["feet_slip"] == pytest.approx(-0.05 * 0.3)
    literal = compute_reward_terms(j, s, cmd, RewardWeights(reward_sign_mode="literal"))
    assert literal["energy"] == pytest.approx(2e-5 * 48)
    assert literal["feet_slip"] == pytest.approx(-0.05 * 0.3)
    with pytest.raises(ValueError):
        compute_reward_terms(j, s, cmd, RewardWeights(reward_sign_mode="other"))


def test_reward_flat_and_height():
    cmd = VelocityCommand(0, 0, 1)
    j = _snapshot(gravity_proj=np.array([0.6, 0.0, -0.8]), body_height=0.2)
    t = compute_reward_terms(j, RobotState(0, 0, 0), cmd)
    assert t["flat"] == pytest.approx(-2.0 * 0.36)
    assert t["body_height"] == pytest.approx(-5.0 * 0.01)


def test_reward_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        compute_reward_terms(_snapshot(tau=np.zeros(3)), RobotState(0, 0, 0), VelocityCommand(0, 0, 1))


finite = st.floats(-3, 3)


@given(finite, finite, finite, st.lists(st.floats(-50, 50), min_size=12, max_size=12))
def test_penalties_non_positive(vz, wx, gx, qdd):
    j = _snapshot(v_z=vz, omega_xy=np.array([wx, 0.0]), gravity_proj=np.array([gx, 0, -1]), qddot=np.array(qdd))
    t = compute_reward_terms(j, RobotState(0, 0, 0), VelocityCommand(0, 0, 1))
    for name in ("lin_z_penalty", "ang_xy_penalty", "flat", "joint_acc", "energy", "body_height", "feet_slip"):
        assert t[name] <= 0.0


@given(st.floats(0, 0.5), st.floats(1e-3, 0.5))
def test_lin_track_monotone(e1, gap):
    cmd = VelocityCommand(0.5, 0, 1)
    r = [compute_reward_terms(_snapshot(), RobotState(0, 0, 0, v=0.5 - e), cmd)["lin_track"] for e in (e1, e1 + gap)]
    assert r[0] > r[1]


def test_randomization_single():
    s = sample_randomization(11)
    assert s == sample_randomization(11)
    assert -3 <= s.body_mass_offset <= 3
    assert 0.4 <= s.static_friction <= 4.0 and 0.4 <= s.dynamic_friction <= 4.0
    assert 0.9 <= s.motor_strength <= 1.1
    assert s.system_delay == 1


def test_randomization_mean():
    m = np.mean([sample_randomization(k).motor_strength for k in range(10_000)])
    assert 0.99 <= m <= 1.01


def test_randomization_bounds_batch():
    b = sample_randomization_batch(1_000_000, seed=0)
    assert b["body_mass_offset"].min() >= -3 and b["body_mass_offset"].max() <= 3
    for k in ("static_friction", "dynamic_friction"):
        assert b[k].min() >= 0.4 and b[k].max() <= 4.0
    assert b["motor_strength"].min() >= 0.9 and b["motor_strength"].max() <= 1.1
    assert (b["system_delay"] == 1).all()


def test_actor_obs_layout():
    layout = ProprioLayout((("lin_vel", 3), ("rest", 10)))
    hist = [np.arange(13.0)]
    obs = assemble_actor_obs(hist, VelocityCommand(0.5, 0.1, 1), HeightMap.empty(), layout)
    assert obs.size == 10 + 2 + 459
    assert (obs[:10] == np.arange(3.0, 13.0)).all()
    assert (obs[10:12] == [0.5, 0.1]).all()


def test_actor_obs_drops_lin_vel_every_block():
    sentinel = 12345.0
    hist = []
    for k in range(3):
        v = np.full(DEFAULT_LAYOUT.size, float(k))
        v[DEFAULT_LAYOUT.slice("lin_vel")] = sentinel
        hist.append(v)
    obs = assemble_actor_obs(hist, VelocityCommand(0, 0, 1), HeightMap.empty())
    assert sentinel not in obs
    assert obs.size == 3 * DEFAULT_LAYOUT.actor_size() + 2 + 17 * 27


def test_actor_obs_errors():
    with pytest.raises(LayoutMismatch):
        assemble_actor_obs([], VelocityCommand(0, 0, 1), HeightMap.empty())
    with pytest.raises(LayoutMismatch):
        assemble_actor_obs([np.zeros(5)], VelocityCommand(0, 0, 1), HeightMap.empty())


def test_critic_obs():
    j = JointSnapshot.zeros()
    j.gravity_proj = np.zeros(3)
    s = RobotState(0, 0, 0, v=0.0)
    cmd = VelocityCommand(0.5, -0.2, 1)
    obs = assemble_critic_obs(j, s, cmd, np.zeros(CRITIC_SCAN_SHAPE))
    n = DEFAULT_LAYOUT.size
    assert obs.size == n + 2 + 17 * 11
    assert (obs[n : n + 2] == [0.5, -0.2]).all()
    obs[n : n + 2] = 0
    assert not obs.any()
    moving = assemble_critic_obs(j, RobotState(0, 0, 0, v=0.4), cmd, np.zeros(CRITIC_SCAN_SHAPE))
    assert moving[DEFAULT_LAYOUT.slice("lin_vel")][0] == 0.4
    with pytest.raises(LayoutMismatch):
        assemble_critic_obs(j, s, cmd, np.zeros((3, 3)))


def test_full_proprio_layout_check():
    with pytest.raises(LayoutMismatch):
        full_proprio(JointSnapshot.zeros(n_joints=6), RobotState(0, 0, 0))


def test_privileged_scan_sees_wall():
    scene = open_room((20, 20))
    scan = privileged_height_scan(scene, (0.5, 1.0, 0.0))
    assert scan.shape == CRITIC_SCAN_SHAPE
    assert scan.max() == 1.0
    assert scan[CRITIC_SCAN_SHAPE[0] // 2, CRITIC_SCAN_SHAPE[1] // 2] == 0.0


def _robot_frame_map(mask_fn, height=0.4):
    hm = HeightMap.empty()
    x, y = hm.robot_frame_centers()
    m = mask_fn(x, y)
    return HeightMap(np.where(m, height, 0.05), m.copy(), HeightMapConfig())


def test_avoid_empty_map_passthrough():
    cmd = VelocityCommand(0.5, 0, 1)
    assert avoid_adjust(cmd, HeightMap.empty()) == cmd


def test_avoid_right_wall_steers_left():
    hm = _robot_frame_map(lambda x, y: (x > 0) & (y < 0))
    out = avoid_adjust(VelocityCommand(0.5, 0, 1), hm)
    assert out.omega_cmd > 0 and out.v_cmd == 0


def test_avoid_left_wall_steers_right():
    hm = _robot_frame_map(lambda x, y: (x > 0) & (y > 0))
    assert avoid_adjust(VelocityCommand(0.5, 0, 1), hm).omega_cmd < 0


def test_avoid_tie_goes_left():
    hm = _robot_frame_map(lambda x, y: (x > 0) & (np.abs(y) < 0.2))
    assert avoid_adjust(VelocityCommand(0.5, 0, 1), hm).omega_cmd > 0


def test_avoid_all_blocked_stops():
    hm = _robot_frame_map(lambda x, y: np.ones_like(x, dtype=bool), height=0.5)
    out = avoid_adjust(VelocityCommand(0.5, 0, 1), hm)
    assert (out.v_cmd, out.omega_cmd) == (0.0, 0.0)
    assert out.duration == AvoidParams().quantum


def test_avoid_ignores_turns():
    hm = _robot_frame_map(lambda x, y: np.ones_like(x, dtype=bool))
    cmd = VelocityCommand(0, math.pi / 6, 1)
    assert avoid_adjust(cmd, hm) is cmd


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_avoid_idempotent(seed):
    rng = np.random.default_rng(seed)
    valid = rng.random((17, 27)) < 0.2
    hm = HeightMap(np.where(valid, rng.uniform(0.05, 0.5, (17, 27)), 0.05), valid, HeightMapConfig())
    cmd = VelocityCommand(0.5, 0, 1)
    assert avoid_adjust(cmd, hm) == avoid_adjust(cmd, hm)
