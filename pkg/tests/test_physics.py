"""Rigid-body world: kinematics, contacts, integration, determinism."""
import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sope import physics
from sope.physics import (Container, HandState, NumericalBlowup,
                          PhysicsParams, Vec3, WorldState)

PARAMS = PhysicsParams()
HALF = (0.015, 0.075)
MASS = 0.05


def make_world(block_xz, angles=None, container_len=0.4, hand=(1.0, 1.0),
               joints=None, inserts=None, half=HALF):
    n = len(block_xz)
    pos = np.array(block_xz, dtype=np.float64).reshape(n, 2)
    ang = np.zeros(n) if angles is None else np.asarray(angles, np.float64)
    container = Container.build(container_len, inserts=inserts)
    joints = np.zeros(16) if joints is None else np.asarray(joints, np.float64)
    return WorldState(pos, ang, np.zeros((n, 2)), np.zeros(n),
                      np.tile(half, (n, 1)), np.full(n, MASS), container,
                      joints, np.zeros(16),
                      np.array([hand[0], hand[1], 0.0]))


def state_bytes(world):
    return b"".join(a.tobytes() for a in
                    (world.block_pos, world.block_ang, world.block_vel,
                     world.block_angvel, world.joints, world.joint_vel,
                     world.base))


def hold(world, n_steps, params=PARAMS):
    return physics.settle(world, params, n_steps)


# --- forward kinematics -------------------------------------------------------

def test_fk_zero_joints_chains_hang_straight_down():
    hand = HandState(Vec3.from_xz(0.0, 0.0), 0.0, np.zeros(16), np.zeros(16))
    tips = physics.fk_fingertips(hand, PARAMS)
    total = sum(PARAMS.link_lengths)
    for f, tip in enumerate(tips):
        assert tip.y == 0.0
        assert tip.x == pytest.approx(PARAMS.mount_xs[f], abs=1e-12)
        assert tip.z == pytest.approx(-total, abs=1e-12)


def test_fk_first_joint_quarter_turn_lays_chain_along_x():
    q = np.zeros(16)
    q[0] = math.pi / 2
    hand = HandState(Vec3.from_xz(0.0, 0.0), 0.0, q, np.zeros(16))
    tip = physics.fk_fingertips(hand, PARAMS)[0]
    assert tip.x - PARAMS.mount_xs[0] == pytest.approx(0.14, abs=1e-12)
    assert tip.z == pytest.approx(0.0, abs=1e-12)


def test_fk_mirrored_joint_signs_mirror_tips_about_base_axis():
    rng = np.random.default_rng(0)
    q = np.zeros(16)
    q[0:4] = rng.uniform(-1.2, 1.2, 4)
    q[12:16] = -q[0:4]
    hand = HandState(Vec3.from_xz(0.0, 0.0), 0.0, q, np.zeros(16))
    tips = physics.fk_fingertips(hand, PARAMS)
    assert tips[3].x == pytest.approx(-tips[0].x, abs=1e-12)
    assert tips[3].z == pytest.approx(tips[0].z, abs=1e-12)


def test_fk_jacobian_matches_central_differences():
    rng = np.random.default_rng(3)
    base = np.array([0.1, 0.3, 0.2])
    h = 1e-6
    for _ in range(5):
        q = rng.uniform(-1.4, 1.4, 16)
        _, jac, _ = physics.fk_arrays(q, base, PARAMS)
        for j in range(16):
            qp, qm = q.copy(), q.copy()
            qp[j] += h
            qm[j] -= h
            tp, _, _ = physics.fk_arrays(qp, base, PARAMS)
            tm, _, _ = physics.fk_arrays(qm, base, PARAMS)
            num = (tp - tm) / (2 * h)
            f = j // 4
            assert np.allclose(jac[f, :, j % 4], num[f], atol=1e-5)
            others = [g for g in range(4) if g != f]
            assert np.allclose(num[others], 0.0, atol=1e-5)


# --- keypoints ----------------------------------------------------------------

def test_block_keypoints_axis_aligned():
    b = physics.RigidBlock(Vec3.from_xz(0.10, 0.075), HALF, 0.0,
                           (0.0, 0.0), 0.0, MASS, 0)
    p1, p2 = physics.block_keypoints(b)
    assert (p1.x, p1.y, p1.z) == pytest.approx((0.085, 0.0, 0.15), abs=1e-12)
    assert (p2.x, p2.y, p2.z) == pytest.approx((0.115, 0.0, 0.15), abs=1e-12)


def test_block_keypoints_quarter_turn_tie_broken_by_lower_z():
    b = physics.RigidBlock(Vec3.from_xz(0.10, 0.075), HALF, math.pi / 2,
                           (0.0, 0.0), 0.0, MASS, 0)
    p1, p2 = physics.block_keypoints(b)
    # top corners land on a vertical line x = 0.025; lower z reported first
    assert (p1.x, p1.z) == pytest.approx((0.025, 0.060), abs=1e-12)
    assert (p2.x, p2.z) == pytest.approx((0.025, 0.090), abs=1e-12)


def test_wall_keypoints_duplicated_virtual_point():
    c = Container.build(0.26, wall_height=0.175)
    p1, p2 = physics.wall_keypoints(c, "left")
    assert p1 == p2
    assert (p1.x, p1.y, p1.z) == (0.0, 0.0, 0.175)
    q1, q2 = physics.wall_keypoints(c, "right")
    assert q1 == q2 == Vec3.from_xz(0.26, 0.175)


# --- contact resolution -------------------------------------------------------

def test_separated_blocks_floating_have_no_contacts():
    w = make_world([(0.10, 0.5), (0.10 + 2 * HALF[0] + 0.005, 0.5)])
    assert physics.resolve_contacts(w, PARAMS) == []


def test_tip_penetrating_block_top_by_1mm_gives_penalty_force():
    # finger 0 hangs straight down; place its tip 1 mm into the top face
    tip_target = (0.10, 0.15 + PARAMS.tip_radius - 0.001)
    base_x = tip_target[0] - PARAMS.mount_xs[0]
    base_z = tip_target[1] + sum(PARAMS.link_lengths)
    w = make_world([(0.10, 0.075)], hand=(base_x, base_z))
    contacts = [c for c in physics.resolve_contacts(w, PARAMS)
                if c.body_b <= physics.TIP_BASE]
    assert len(contacts) == 1
    c = contacts[0]
    assert c.body_a == 0 and c.body_b == -10  # block 0 vs tip of finger 0
    assert c.penetration == pytest.approx(0.001, abs=1e-9)
    assert c.normal_force == pytest.approx(
        PARAMS.contact_stiffness * 0.001, rel=1e-9)
    # normal runs from body_b (the tip) into body_a (the block): downward
    assert abs(c.normal.x) < 1e-12 and c.normal.z == pytest.approx(-1.0)


def test_settled_block_floor_force_matches_weight():
    w = hold(make_world([(0.2, HALF[1])]), 20)
    floor = [c for c in physics.resolve_contacts(w, PARAMS)
             if c.body_b == physics.FLOOR]
    assert floor, "settled block must rest on the floor"
    total = sum(c.normal_force for c in floor)
    assert total == pytest.approx(MASS * PARAMS.gravity, rel=0.05)


def test_contact_normals_are_unit_and_penetration_nonnegative():
    w = hold(make_world([(0.2, HALF[1]), (0.2305, HALF[1])]), 10)
    pts = physics.resolve_contacts(w, PARAMS)
    assert pts
    for c in pts:
        norm = math.hypot(c.normal.x, c.normal.z)
        assert norm == pytest.approx(1.0, abs=1e-9)
        assert c.penetration >= 0.0


# --- integration: rest, fall, stacks ------------------------------------------

def test_resting_block_moves_under_1e4_in_one_step():
    w = hold(make_world([(0.2, HALF[1])]), 20)
    before = w.block_pos.copy()
    w2 = physics.step(w, w.joints.copy(), w.base.copy(), PARAMS)
    assert np.max(np.abs(w2.block_pos - before)) < 1e-4


def test_free_fall_one_control_period_matches_kinematics():
    z0 = HALF[1] + 0.1
    w = make_world([(0.2, z0)])
    w2 = physics.step(w, w.joints.copy(), w.base.copy(), PARAMS)
    drop = z0 - w2.block_pos[0, 1]
    expected = 0.5 * PARAMS.gravity * 0.05 ** 2
    assert drop == pytest.approx(expected, rel=0.02)


@pytest.mark.parametrize("n", [1, 2, 3, 5, 7, 10])
def test_settled_flat_stack_drifts_under_1mm_over_120_steps(n):
    # blocks lying flat (long face down), piled vertically: the stable
    # stacking orientation for 30 x 150 mm blocks inside the container
    flat = (HALF[1], HALF[0])
    xs = [(0.2, flat[1] + 2 * flat[1] * i) for i in range(n)]
    w = hold(make_world(xs, container_len=0.4, half=flat), 30)
    start_pos = w.block_pos.copy()
    start_ang = w.block_ang.copy()
    w = hold(w, 120)
    assert np.max(np.abs(w.block_pos - start_pos)) < 1e-3
    assert np.max(np.abs(w.block_ang - start_ang)) < 0.05


@pytest.mark.parametrize("n", [1, 2, 3])
def test_settled_upright_tower_drifts_under_1mm_over_120_steps(n):
    # standing towers get top-heavy fast (30 mm footprint); small ones
    # must still rest without creep
    xs = [(0.2, HALF[1] + 2 * HALF[1] * i) for i in range(n)]
    w = hold(make_world(xs, container_len=0.4), 30)
    start_pos = w.block_pos.copy()
    start_ang = w.block_ang.copy()
    w = hold(w, 120)
    assert np.max(np.abs(w.block_pos - start_pos)) < 1e-3
    assert np.max(np.abs(w.block_ang - start_ang)) < 0.05


def test_settled_row_penetration_within_tolerance():
    gap = 0.001
    xs = [(0.05 + i * (2 * HALF[0] + gap), HALF[1]) for i in range(4)]
    w = hold(make_world(xs), 40)
    for c in physics.resolve_contacts(w, PARAMS):
        assert c.penetration <= 0.002


# --- determinism and purity ---------------------------------------------------

def test_step_is_pure_and_bitwise_deterministic():
    w = hold(make_world([(0.19, HALF[1]), (0.225, HALF[1])],
                        hand=(0.2, 0.3)), 5)
    targets = np.full(16, 0.3)
    base_t = np.array([0.21, 0.25, 0.0])
    snapshot = state_bytes(w)
    a = physics.step(w, targets, base_t, PARAMS)
    assert state_bytes(w) == snapshot, "step must not mutate its input"
    b = physics.step(w, targets, base_t, PARAMS)
    assert state_bytes(a) == state_bytes(b)
    assert a.n_contacts == b.n_contacts
    assert a.contacts[:a.n_contacts].tobytes() == \
        b.contacts[:b.n_contacts].tobytes()


def test_trajectory_bitwise_reproducible_over_many_steps():
    def run():
        w = make_world([(0.18, HALF[1]), (0.22, HALF[1])], hand=(0.2, 0.28))
        digest = []
        for t in range(40):
            q = np.full(16, 0.4 * math.sin(0.1 * t))
            w = physics.step(w, q, np.array([0.2, 0.28 - 0.001 * t, 0.0]),
                             PARAMS)
            digest.append(state_bytes(w))
        return b"".join(digest)

    assert run() == run()


def test_jit_and_pure_python_kernels_agree():
    # compiled libm sin/cos differ from numpy's by 1 ulp on rare arguments,
    # so the two backends cannot match bitwise; they must stay within
    # floating-point noise of each other (logic divergence shows up orders
    # of magnitude above this)
    prog = r"""
import numpy as np, sys
sys.path.insert(0, "src")
from sope import physics
from sope.physics import PhysicsParams, Container, WorldState
P = PhysicsParams()
w = WorldState(np.array([[0.18, 0.075], [0.215, 0.075]]), np.zeros(2),
               np.zeros((2, 2)), np.zeros(2), np.tile((0.015, 0.075), (2, 1)),
               np.full(2, 0.05), Container.build(0.4), np.zeros(16),
               np.zeros(16), np.array([0.2, 0.25, 0.0]))
for t in range(10):
    w = physics.step(w, np.full(16, 0.5), np.array([0.2, 0.22, 0.0]), P)
print(w.block_pos.tobytes().hex(), w.joints.tobytes().hex())
"""
    outs = []
    for disable in ("0", "1"):
        env = dict(os.environ, SOPE_DISABLE_JIT=disable)
        res = subprocess.run([sys.executable, "-c", prog], env=env,
                             capture_output=True, text=True,
                             cwd=os.path.dirname(os.path.dirname(__file__)))
        assert res.returncode == 0, res.stderr
        outs.append(res.stdout)
    decoded = []
    for out in outs:
        pos_hex, joints_hex = out.split()
        decoded.append((np.frombuffer(bytes.fromhex(pos_hex)),
                        np.frombuffer(bytes.fromhex(joints_hex))))
    np.testing.assert_allclose(decoded[0][0], decoded[1][0],
                               rtol=1e-9, atol=1e-11)
    np.testing.assert_allclose(decoded[0][1], decoded[1][1],
                               rtol=1e-9, atol=1e-11)


# --- safety rails -------------------------------------------------------------

def test_blowup_raised_on_runaway_velocity():
    w = make_world([(0.2, 0.5)])
    w.block_vel[0] = (0.0, 3000.0)
    with pytest.raises(NumericalBlowup):
        physics.step(w, np.zeros(16), w.base.copy(), PARAMS)


def test_joint_targets_clamped_to_limits():
    w = make_world([(0.2, HALF[1])], hand=(1.0, 1.0))
    for _ in range(40):
        w = physics.step(w, np.full(16, 99.0), w.base.copy(), PARAMS)
    assert np.max(w.joints) <= PARAMS.joint_limit + 1e-9


def test_constrained_inserts_press_row_inward():
    # insert planes 10 mm inside the outer block faces, so the compliant
    # springs have overlap to push against
    inserts = physics.WallInserts(offset=0.045, stiffness=2000.0)
    xs = [(0.05, HALF[1]), (0.35, HALF[1])]
    free = hold(make_world(xs, container_len=0.4), 60)
    pressed = hold(make_world(xs, container_len=0.4, inserts=inserts), 60)
    # the outer blocks get pushed toward the middle relative to rigid walls
    assert pressed.block_pos[0, 0] > free.block_pos[0, 0] + 0.005
    assert pressed.block_pos[1, 0] < free.block_pos[1, 0] - 0.005


# --- friction cone property ----------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(
    gap=st.floats(0.0, 0.01),
    tilt=st.floats(-0.15, 0.15),
    hx=st.floats(0.12, 0.28),
    hz=st.floats(0.18, 0.35),
    qv=st.floats(-0.8, 0.8),
)
def test_friction_cone_holds_everywhere(gap, tilt, hx, hz, qv):
    xs = [(0.15, HALF[1]), (0.15 + 2 * HALF[0] + gap, HALF[1] + 0.002)]
    w = make_world(xs, angles=[0.0, tilt], hand=(hx, hz))
    q = np.full(16, qv)
    for _ in range(3):
        w = physics.step(w, q, np.array([hx, hz, 0.0]), PARAMS)
        for c in w.contact_points():
            assert abs(c.tangent_force) <= \
                PARAMS.friction * c.normal_force + 1e-9
    for c in physics.resolve_contacts(w, PARAMS):
        assert abs(c.tangent_force) <= PARAMS.friction * c.normal_force + 1e-9
