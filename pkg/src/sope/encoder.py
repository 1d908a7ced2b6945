"""Policy observation builders.

The standard 44-dim vector packs, in order: 16 raw joint angles, the
target's two top corners (centered on the episode's captured origin) plus
four displacement vectors to the corresponding neighbor corners, 9 dims of
hand end-effector info, and the phase index. Two ablation layouts swap the
block segment for naive pose+quaternion triples (47) or append per-finger
binary contact flags (48).

All position-derived entries are snapped to a 2^-26 m grid (~15 nm).
Centering and displacement are float subtractions, and translating a scene
perturbs their last bits; snapping makes the advertised exact translation
invariance actually hold bit-for-bit while being far below any physical
scale in the task.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .physics import (Container, Vec3, WorldState, top_corners_xz,
                      wall_keypoints)

EE_OFFSET_DEFAULT = (0.0, 0.0, -0.02)

_SNAP = 67108864.0  # 2^26


def snap(values):
    return np.round(np.asarray(values, dtype=np.float64) * _SNAP) / _SNAP


@dataclass(frozen=True)
class ObservationLayout:
    variant: str
    total_dim: int
    segments: dict

    def segment(self, name: str) -> tuple[int, int]:
        return self.segments[name]


def standard_layout() -> ObservationLayout:
    return ObservationLayout("standard", 44, {
        "hand_dofs": (0, 16),
        "block_info": (16, 34),
        "ee_info": (34, 43),
        "phase": (43, 44),
    })


def naive_layout() -> ObservationLayout:
    return ObservationLayout("naive_block", 47, {
        "hand_dofs": (0, 16),
        "block_info": (16, 37),
        "ee_info": (37, 46),
        "phase": (46, 47),
    })


def tactile_layout() -> ObservationLayout:
    return ObservationLayout("tactile", 48, {
        "hand_dofs": (0, 16),
        "block_info": (16, 34),
        "ee_info": (34, 43),
        "phase": (43, 44),
        "tactile": (44, 48),
    })


def layout_for(variant: str) -> ObservationLayout:
    if variant == "standard":
        return standard_layout()
    if variant == "naive_block":
        return naive_layout()
    if variant == "tactile":
        return tactile_layout()
    raise ValueError(f"unknown observation variant: {variant!r}")


@dataclass(frozen=True)
class CenteringRef:
    """Initial target top-edge midpoint, captured once at reset."""
    origin: Vec3


@dataclass(frozen=True)
class Observation:
    values: np.ndarray
    layout: ObservationLayout


def _poly_corners(world: WorldState, idx: int):
    return top_corners_xz(world.block_pos[idx, 0], world.block_pos[idx, 1],
                          world.block_ang[idx], world.block_half[idx, 0],
                          world.block_half[idx, 1])


def neighbor_corners(world: WorldState, target_idx: int, side: str):
    """Top corners of the adjacent block, or duplicated wall virtual points
    when the target sits at that end of the row."""
    idx = target_idx - 1 if side == "left" else target_idx + 1
    if 0 <= idx < world.n_blocks:
        return _poly_corners(world, idx)
    k1, k2 = wall_keypoints(world.container, side)
    return [(k1.x, k1.z), (k2.x, k2.z)]


def displacement_features(target_corners, left_corners, right_corners):
    """12 reals: [left-target c1, left-target c2, right-target c1,
    right-target c2], each a 3D vector difference (y stays 0)."""
    out = np.zeros(12)
    pairs = [(left_corners[0], target_corners[0]),
             (left_corners[1], target_corners[1]),
             (right_corners[0], target_corners[0]),
             (right_corners[1], target_corners[1])]
    for k, (nb, tg) in enumerate(pairs):
        out[3 * k] = nb.x - tg.x
        out[3 * k + 2] = nb.z - tg.z
    return snap(out)


def _block_segment_standard(world, target_idx, ref):
    tc = _poly_corners(world, target_idx)
    lc = neighbor_corners(world, target_idx, "left")
    rc = neighbor_corners(world, target_idx, "right")
    seg = np.zeros(18)
    seg[0] = tc[0][0] - ref.origin.x
    seg[2] = tc[0][1] - ref.origin.z
    seg[3] = tc[1][0] - ref.origin.x
    seg[5] = tc[1][1] - ref.origin.z
    for k, (nb, tg) in enumerate([(lc[0], tc[0]), (lc[1], tc[1]),
                                  (rc[0], tc[0]), (rc[1], tc[1])]):
        seg[6 + 3 * k] = nb[0] - tg[0]
        seg[8 + 3 * k] = nb[1] - tg[1]
    return snap(seg), tc


def _ee_segment(world, ref, tc, ee_offset):
    mid_x = 0.5 * (tc[0][0] + tc[1][0])
    mid_z = 0.5 * (tc[0][1] + tc[1][1])
    seg = np.zeros(9)
    seg[0] = mid_x - ref.origin.x
    seg[2] = mid_z - ref.origin.z
    seg[3] = world.base[0] + ee_offset[0] - ref.origin.x
    seg[5] = world.base[1] + ee_offset[2] - ref.origin.z
    seg[:6] = snap(seg[:6])
    seg[6] = world.base[2]  # wrist angle, two zero pads follow
    return seg


def encode(world: WorldState, target_idx: int, phase: int, ref: CenteringRef,
           layout: ObservationLayout | None = None,
           ee_offset=EE_OFFSET_DEFAULT) -> Observation:
    if layout is None:
        layout = standard_layout()
    assert layout.variant == "standard"
    assert 0 <= target_idx < world.n_blocks
    values = np.zeros(44)
    values[0:16] = world.joints
    values[16:34], tc = _block_segment_standard(world, target_idx, ref)
    values[34:43] = _ee_segment(world, ref, tc, ee_offset)
    values[43] = float(phase)
    return Observation(values, layout)


def encode_naive(world: WorldState, target_idx: int, phase: int,
                 ref: CenteringRef, ee_offset=EE_OFFSET_DEFAULT) -> Observation:
    layout = naive_layout()
    values = np.zeros(47)
    values[0:16] = world.joints

    def pose_quat(idx, side):
        if 0 <= idx < world.n_blocks:
            px = world.block_pos[idx, 0] - ref.origin.x
            pz = world.block_pos[idx, 1] - ref.origin.z
            half = 0.5 * world.block_ang[idx]
            # planar rotation about the depth axis
            quat = (np.cos(half), 0.0, np.sin(half), 0.0)
        else:
            k1, _ = wall_keypoints(world.container, side)
            px = k1.x - ref.origin.x
            pz = k1.z - ref.origin.z
            quat = (0.0, 0.0, 0.0, 0.0)  # pseudo-block marker
        return px, pz, quat

    at = 16
    for idx, side in [(target_idx, ""), (target_idx - 1, "left"),
                      (target_idx + 1, "right")]:
        px, pz, quat = pose_quat(idx, side)
        values[at] = px
        values[at + 2] = pz
        values[at:at + 3] = snap(values[at:at + 3])
        values[at + 3:at + 7] = quat
        at += 7

    tc = _poly_corners(world, target_idx)
    values[37:46] = _ee_segment(world, ref, tc, ee_offset)
    values[46] = float(phase)
    return Observation(values, layout)


def encode_tactile(world: WorldState, target_idx: int, phase: int,
                   ref: CenteringRef, contacts,
                   ee_offset=EE_OFFSET_DEFAULT) -> Observation:
    base = encode(world, target_idx, phase, ref, standard_layout(), ee_offset)
    values = np.zeros(48)
    values[:44] = base.values
    for c in contacts:
        if c.body_b <= -10:
            values[44 + (-c.body_b - 10)] = 1.0
    return Observation(values, tactile_layout())
