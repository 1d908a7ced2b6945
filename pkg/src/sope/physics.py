"""Planar rigid-body world: blocks in a box plus a 16-DOF four-finger hand.

The plane is x (along the block row) by z (vertical), embedded in 3D with
y = 0 everywhere so downstream keypoint types stay 3D. Bodies are oriented
rectangles; fingertips are circles on 4-link planar chains hanging from a
kinematically driven base. Contacts use penalty springs with damping and
Coulomb friction, integrated by semi-implicit Euler at a fixed substep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .kernels import (CONTACT_WIDTH, FLOOR, INSERT_L, INSERT_R, MAX_CONTACTS,
                      TIP_BASE, WALL_L, WALL_R)


class NumericalBlowup(Exception):
    """State magnitude exceeded the configured sanity bound."""


@dataclass(frozen=True)
class Vec3:
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @staticmethod
    def from_xz(x: float, z: float) -> "Vec3":
        return Vec3(float(x), 0.0, float(z))


@dataclass
class RigidBlock:
    center: Vec3
    half_extents: tuple[float, float]  # (hx, hz), in plane
    angle: float
    lin_vel: tuple[float, float]
    ang_vel: float
    mass: float
    id: int

    def __post_init__(self):
        assert self.half_extents[0] > 0 and self.half_extents[1] > 0
        assert self.mass > 0
        assert abs(self.angle) < math.pi


@dataclass(frozen=True)
class WallInserts:
    """Compliant inserts narrowing the box interior from both sides."""
    offset: float      # free-length reduction per side, meters
    stiffness: float   # N/m, softer than the rigid walls behind them


@dataclass(frozen=True)
class Container:
    interior_length: float
    wall_height: float
    floor_z: float
    left_wall_x: float
    right_wall_x: float
    constrained_inserts: WallInserts | None = None

    def __post_init__(self):
        assert abs((self.right_wall_x - self.left_wall_x)
                   - self.interior_length) < 1e-12

    @staticmethod
    def build(interior_length: float, wall_height: float = 0.175,
              floor_z: float = 0.0, left_wall_x: float = 0.0,
              inserts: WallInserts | None = None) -> "Container":
        return Container(interior_length, wall_height, floor_z, left_wall_x,
                         left_wall_x + interior_length, inserts)


@dataclass
class HandState:
    base: Vec3
    wrist: float
    joints: np.ndarray      # (16,)
    joint_vel: np.ndarray   # (16,)

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        self.joint_vel = np.asarray(self.joint_vel, dtype=np.float64)
        assert self.joints.shape == (16,)
        assert self.joint_vel.shape == (16,)


@dataclass(frozen=True)
class ContactPoint:
    body_a: int
    body_b: int
    point: Vec3
    normal: Vec3        # unit, from body_b into body_a
    penetration: float
    normal_force: float
    tangent_force: float


@dataclass(frozen=True)
class PhysicsParams:
    # substep chosen so the penalty-spring gain k*dt^2/m_eff stays well
    # under 1 at corner contacts (m_eff ~ 0.045 kg); 12 x 1/240 is marginal
    # (gain 1.9) and lets resting blocks pump themselves into a walk
    gravity: float = 9.81
    substeps: int = 48
    dt: float = 1.0 / 960.0
    contact_stiffness: float = 5000.0
    contact_damping: float = 50.0
    friction: float = 0.6
    tip_radius: float = 0.008
    link_lengths: tuple[float, float, float, float] = (0.05, 0.04, 0.03, 0.02)
    kp: float = 400.0
    kd: float = 40.0
    # reaction coupling: contact force on a tip decelerates its chain so
    # fingers stall against blocks instead of plowing through them
    contact_coupling: float = 80.0
    mount_xs: tuple[float, float, float, float] = (-0.045, -0.015, 0.015, 0.045)
    base_vmax: float = 0.5
    wrist_vmax: float = 2.0
    joint_vmax: float = 10.0
    # force cap on deep penetrations, as spring displacement; keeps a bad
    # wedge from launching blocks while leaving normal contacts untouched
    penetration_force_cap: float = 0.005
    joint_limit: float = 1.6
    blowup_pos: float = 10.0
    blowup_vel: float = 100.0

    def __post_init__(self):
        assert abs(self.substeps * self.dt - 1.0 / 20.0) < 1e-12, \
            "substeps x dt must equal the 1/20 s control period"

    def pack(self, container: Container) -> np.ndarray:
        P = np.zeros(kernels.N_PARAMS, dtype=np.float64)
        P[kernels.IP_DT] = self.dt
        P[kernels.IP_GRAVITY] = self.gravity
        P[kernels.IP_KN] = self.contact_stiffness
        P[kernels.IP_CN] = self.contact_damping
        P[kernels.IP_MU] = self.friction
        P[kernels.IP_TIP_R] = self.tip_radius
        P[kernels.IP_KP] = self.kp
        P[kernels.IP_KD] = self.kd
        P[kernels.IP_KC] = self.contact_coupling
        P[kernels.IP_BASE_VMAX] = self.base_vmax
        P[kernels.IP_WRIST_VMAX] = self.wrist_vmax
        P[kernels.IP_JOINT_VMAX] = self.joint_vmax
        P[kernels.IP_PEN_CAP] = self.penetration_force_cap
        P[kernels.IP_FLOOR_Z] = container.floor_z
        P[kernels.IP_WALL_L] = container.left_wall_x
        P[kernels.IP_WALL_R] = container.right_wall_x
        ins = container.constrained_inserts
        if ins is not None:
            P[kernels.IP_INSERT_L] = container.left_wall_x + ins.offset
            P[kernels.IP_INSERT_R] = container.right_wall_x - ins.offset
            P[kernels.IP_INSERT_K] = ins.stiffness
        return P

    def mounts_array(self) -> np.ndarray:
        return np.asarray(self.mount_xs, dtype=np.float64)

    def links_array(self) -> np.ndarray:
        return np.asarray(self.link_lengths, dtype=np.float64)

    def joint_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.full(16, -self.joint_limit, dtype=np.float64)
        hi = np.full(16, self.joint_limit, dtype=np.float64)
        return lo, hi


class WorldState:
    """Mutable flat-array world; the step() API treats it as a value."""

    def __init__(self, block_pos, block_ang, block_vel, block_angvel,
                 block_half, block_mass, container: Container,
                 joints, joint_vel, base, contacts=None, n_contacts=0):
        self.block_pos = np.asarray(block_pos, dtype=np.float64)
        self.block_ang = np.asarray(block_ang, dtype=np.float64)
        self.block_vel = np.asarray(block_vel, dtype=np.float64)
        self.block_angvel = np.asarray(block_angvel, dtype=np.float64)
        self.block_half = np.asarray(block_half, dtype=np.float64)
        self.block_mass = np.asarray(block_mass, dtype=np.float64)
        self.container = container
        self.joints = np.asarray(joints, dtype=np.float64)
        self.joint_vel = np.asarray(joint_vel, dtype=np.float64)
        self.base = np.asarray(base, dtype=np.float64)  # (x, z, wrist)
        self.contacts = np.zeros((0, CONTACT_WIDTH)) if contacts is None else contacts
        self.n_contacts = n_contacts

    @property
    def n_blocks(self) -> int:
        return self.block_pos.shape[0]

    @property
    def inertia(self) -> np.ndarray:
        hx = self.block_half[:, 0]
        hz = self.block_half[:, 1]
        return self.block_mass * (hx * hx + hz * hz) / 3.0

    @staticmethod
    def create(blocks: list[RigidBlock], container: Container,
               hand: HandState) -> "WorldState":
        n = len(blocks)
        pos = np.zeros((n, 2))
        ang = np.zeros(n)
        vel = np.zeros((n, 2))
        angvel = np.zeros(n)
        half = np.zeros((n, 2))
        mass = np.zeros(n)
        for i, b in enumerate(blocks):
            assert b.id == i, "block ids must be contiguous 0..n-1"
            pos[i] = (b.center.x, b.center.z)
            ang[i] = b.angle
            vel[i] = b.lin_vel
            angvel[i] = b.ang_vel
            half[i] = b.half_extents
            mass[i] = b.mass
        base = np.array([hand.base.x, hand.base.z, hand.wrist])
        return WorldState(pos, ang, vel, angvel, half, mass, container,
                          hand.joints.copy(), hand.joint_vel.copy(), base)

    def blocks(self) -> list[RigidBlock]:
        out = []
        for i in range(self.n_blocks):
            out.append(RigidBlock(
                center=Vec3.from_xz(self.block_pos[i, 0], self.block_pos[i, 1]),
                half_extents=(float(self.block_half[i, 0]),
                              float(self.block_half[i, 1])),
                angle=float(self.block_ang[i]),
                lin_vel=(float(self.block_vel[i, 0]), float(self.block_vel[i, 1])),
                ang_vel=float(self.block_angvel[i]),
                mass=float(self.block_mass[i]),
                id=i))
        return out

    def hand(self) -> HandState:
        return HandState(base=Vec3.from_xz(self.base[0], self.base[1]),
                         wrist=float(self.base[2]),
                         joints=self.joints.copy(),
                         joint_vel=self.joint_vel.copy())

    def clone(self) -> "WorldState":
        return WorldState(self.block_pos.copy(), self.block_ang.copy(),
                          self.block_vel.copy(), self.block_angvel.copy(),
                          self.block_half.copy(), self.block_mass.copy(),
                          self.container,
                          self.joints.copy(), self.joint_vel.copy(),
                          self.base.copy(),
                          self.contacts.copy(), self.n_contacts)

    def contact_points(self) -> list[ContactPoint]:
        out = []
        for c in range(self.n_contacts):
            row = self.contacts[c]
            out.append(ContactPoint(
                body_a=int(row[0]), body_b=int(row[1]),
                point=Vec3.from_xz(row[2], row[3]),
                normal=Vec3.from_xz(row[4], row[5]),
                penetration=float(row[6]),
                normal_force=float(row[7]),
                tangent_force=float(row[8])))
        return out

    def tips_in_contact_with(self, block_idx: int) -> set[int]:
        tips = set()
        rows = self.contacts[:self.n_contacts]
        for c in range(self.n_contacts):
            if int(rows[c, 0]) == block_idx and int(rows[c, 1]) <= TIP_BASE:
                tips.add(-int(rows[c, 1]) - 10)
        return tips

    def to_record(self) -> dict:
        return {
            "blocks": [[float(self.block_pos[i, 0]), float(self.block_pos[i, 1]),
                        float(self.block_ang[i])] for i in range(self.n_blocks)],
            "joints": [float(v) for v in self.joints],
            "base": [float(v) for v in self.base],
            "n_contacts": int(self.n_contacts),
        }


def fk_fingertips(hand: HandState, params: PhysicsParams) -> list[Vec3]:
    tips, _, _ = fk_arrays(hand.joints,
                           np.array([hand.base.x, hand.base.z, hand.wrist]),
                           params)
    return [Vec3.from_xz(tips[f, 0], tips[f, 1]) for f in range(4)]


def fk_arrays(joints: np.ndarray, base: np.ndarray, params: PhysicsParams):
    """Tips (4,2), joint Jacobians (4,2,4), wrist derivative (4,2)."""
    tips = np.empty((4, 2))
    jac = np.empty((4, 2, 4))
    dwrist = np.empty((4, 2))
    kernels.fk_tips(np.asarray(joints, dtype=np.float64),
                    np.asarray(base, dtype=np.float64),
                    params.mounts_array(), params.links_array(),
                    tips, jac, dwrist)
    return tips, jac, dwrist


def top_corners_xz(cx, cz, ang, hx, hz):
    """Two top corners (largest body-frame z) in world coordinates,
    ordered by world x, ties broken by lower world z first."""
    c = math.cos(ang)
    s = math.sin(ang)
    pts = []
    for lx in (-hx, hx):
        pts.append((cx + lx * c - hz * s, cz + lx * s + hz * c))
    pts.sort(key=lambda p: (p[0], p[1]))
    return pts


def block_keypoints(block: RigidBlock) -> tuple[Vec3, Vec3]:
    (x1, z1), (x2, z2) = top_corners_xz(
        block.center.x, block.center.z, block.angle,
        block.half_extents[0], block.half_extents[1])
    return Vec3.from_xz(x1, z1), Vec3.from_xz(x2, z2)


def wall_keypoints(container: Container, side: str) -> tuple[Vec3, Vec3]:
    """Virtual keypoints above a wall, duplicated for both corner slots."""
    x = container.left_wall_x if side == "left" else container.right_wall_x
    p = Vec3.from_xz(x, container.floor_z + container.wall_height)
    return p, p


def _contact_scratch():
    return (np.zeros((MAX_CONTACTS, CONTACT_WIDTH)), np.zeros((4, 2)),
            np.zeros((4, 2)))


def resolve_contacts(world: WorldState,
                     params: PhysicsParams) -> list[ContactPoint]:
    """Contact set and forces for the instantaneous state, no integration.

    Runs the same sequential pass as a substep on copied velocities so the
    reported forces match what the next substep would apply first.
    """
    P = params.pack(world.container)
    tips, jac, _ = fk_arrays(world.joints, world.base, params)
    tipv = np.zeros((4, 2))
    for f in range(4):
        tipv[f] = jac[f] @ world.joint_vel[4 * f:4 * f + 4]
    contacts, tipforce, _ = _contact_scratch()
    vel = world.block_vel.copy()
    angvel = world.block_angvel.copy()
    # gdt = 0: inspection has no gravity-kick context, so the damping term
    # evaluates the law on the instantaneous closing velocity
    nc = kernels.contact_pass(P, 0.0, world.block_pos, world.block_ang, vel,
                              angvel, world.block_half, world.block_mass,
                              world.inertia, tips, tipv, contacts, tipforce)
    preview = WorldState.__new__(WorldState)
    preview.contacts = contacts
    preview.n_contacts = int(nc)
    return WorldState.contact_points(preview)


def step(world: WorldState, joint_targets: np.ndarray, base_target,
         params: PhysicsParams) -> WorldState:
    """Advance one control period. Pure: returns a new WorldState.

    base_target is (x, z, wrist angle) for the kinematic hand base.
    Raises NumericalBlowup when positions or velocities leave sane bounds.
    """
    joint_targets = np.asarray(joint_targets, dtype=np.float64)
    base_target = np.asarray(base_target, dtype=np.float64)
    assert joint_targets.shape == (16,) and base_target.shape == (3,)
    assert np.all(np.isfinite(joint_targets)) and np.all(np.isfinite(base_target))
    lo, hi = params.joint_bounds()
    joint_targets = np.clip(joint_targets, lo, hi)

    out = world.clone()
    P = params.pack(world.container)
    contacts, tipforce, tips = _contact_scratch()
    nc = kernels.control_step(
        P, params.substeps, out.block_pos, out.block_ang, out.block_vel,
        out.block_angvel, out.block_half, out.block_mass, out.inertia,
        out.joints, out.joint_vel, joint_targets, out.base, base_target,
        params.mounts_array(), params.links_array(), lo, hi,
        contacts, tipforce, tips)
    out.contacts = contacts
    out.n_contacts = int(nc)

    if (np.max(np.abs(out.block_pos), initial=0.0) > params.blowup_pos
            or np.max(np.abs(out.block_vel), initial=0.0) > params.blowup_vel
            or not np.all(np.isfinite(out.block_pos))):
        raise NumericalBlowup("unstable state: position or velocity out of bounds")
    return out


def settle(world: WorldState, params: PhysicsParams,
           n_control_steps: int) -> WorldState:
    """Run with held targets so freshly placed blocks reach rest."""
    targets = world.joints.copy()
    base_target = world.base.copy()
    for _ in range(n_control_steps):
        world = step(world, targets, base_target, params)
    return world
