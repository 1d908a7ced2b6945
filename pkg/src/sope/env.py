"""Episode state machine for the singulation task.

An episode packs a row of blocks into the box, picks a target, and runs a
fixed 120-step script of wrist waypoints while the policy moves the 16
finger joints: isolate (45 steps), grasp (25), retrieve (50, hand frozen).
Success is holding the target 0.2 m up for 30 consecutive steps while the
other blocks stay down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import encoder, physics, rewards
from .encoder import CenteringRef, Observation, layout_for
from .physics import (Container, HandState, NumericalBlowup, PhysicsParams,
                      RigidBlock, Vec3, WallInserts, WorldState)


class InfeasibleLayout(Exception):
    """Sampled row does not fit the container interior."""


@dataclass(frozen=True)
class PhaseSchedule:
    phase1_steps: int = 45
    phase2_steps: int = 25
    total_steps: int = 120

    def __post_init__(self):
        assert self.phase1_steps + self.phase2_steps < self.total_steps


def phase_of(t: int, schedule: PhaseSchedule) -> int:
    if t < schedule.phase1_steps:
        return 1
    if t < schedule.phase1_steps + schedule.phase2_steps:
        return 2
    return 3


# default posture: a loose pre-grasp with the tips tucked ~6 cm under the
# base — near enough to the tops that exploration finds contact, mirrored so
# the two left fingers oppose the two right.  Fully extended fingers would
# spear the row at spawn; a tight curl parks the tips out of reach entirely.
def ready_pose() -> np.ndarray:
    q = np.zeros(16)
    for f in range(4):
        s = 1.0 if f < 2 else -1.0
        q[4 * f:4 * f + 4] = (s * -0.85, s * 1.05, s * 1.25, s * 1.25)
    return q


@dataclass
class EpisodeConfig:
    n_blocks: int = 4
    target_policy: int | str = "uniform"  # "uniform" or a fixed index
    gap_range: tuple[float, float] = (0.002, 0.010)
    hand_x_noise: float = 0.01
    hand_z_noise: float = 0.01
    variant: str = "normal"               # or "constrained"
    schedule: PhaseSchedule = field(default_factory=PhaseSchedule)
    success_height: float = 0.2
    success_hold: int = 30
    other_cap: float = 0.05
    ema_beta: float = 0.2
    ema_enabled: bool = False             # deployment smoothing, off in training
    action_clamp: float = 0.1
    hover_dz: float = 0.05
    descend_dz: float = -0.01
    descend_steps: int = 10
    lift_dz: float = 0.25
    lift_steps: int = 20
    early_stop: bool = True
    container_length: float | None = None  # None: auto-size to fit n_blocks
    wall_height: float = 0.175
    block_half: tuple[float, float] = (0.015, 0.075)
    block_mass: float = 0.05
    settle_steps: int = 30
    obs_variant: str = "standard"
    ee_offset: tuple[float, float, float] = encoder.EE_OFFSET_DEFAULT
    reward_params: rewards.RewardParams = field(
        default_factory=rewards.RewardParams)
    phase_weights: dict = field(default_factory=lambda: rewards.PHASE_WEIGHTS)
    # constrained variant: compliant inserts placed insert_press meters
    # into each end of the sampled row ("press", foam squeezing the row
    # flush), or a fixed per-side offset in meters
    insert_offset: float | str = "press"
    insert_press: float = 0.015
    insert_stiffness: float = 2000.0
    physics: PhysicsParams = field(default_factory=PhysicsParams)
    init_joints: np.ndarray | None = None

    def resolved_container_length(self) -> float:
        if self.container_length is not None:
            return self.container_length
        w = 2.0 * self.block_half[0]
        need = (self.n_blocks * w + (self.n_blocks - 1) * self.gap_range[1]
                + 0.04)
        return max(0.26, need)

    def layout(self):
        return layout_for(self.obs_variant)


@dataclass
class TrialOutcome:
    success: bool
    failure_class: str  # none | isolating | grasp_retrieve | blowup
    steps_elapsed: int
    reward_sum: float
    target_idx: int

    def __post_init__(self):
        assert not (self.success and self.failure_class != "none")


def ee_waypoint(phase: int, t: int, ref: CenteringRef,
                config: EpisodeConfig) -> np.ndarray:
    """Wrist target (x, z, angle) for step t. The x stays over the initial
    target top edge; z follows hover -> descend -> lift-and-hold."""
    sched = config.schedule
    hover = ref.origin.z + config.hover_dz
    descend = ref.origin.z + config.descend_dz
    # with a merged isolate+grasp phase (phase2_steps == 0) the descent
    # happens over the tail of phase 1 instead
    descend_start = (sched.phase1_steps if sched.phase2_steps > 0
                     else sched.phase1_steps - config.descend_steps)
    if phase == 3:
        # rise to the final height over lift_steps, then hold: lifting
        # across the whole phase would cross the success height too late
        # to fit the required 30-step hold inside the episode
        k = t - sched.phase1_steps - sched.phase2_steps
        lift_top = hover + config.lift_dz
        frac = min(k / config.lift_steps, 1.0)
        z = descend + (lift_top - descend) * frac
    elif t < descend_start:
        z = hover
    else:
        k = t - descend_start
        frac = min(k / config.descend_steps, 1.0)
        z = hover + (descend - hover) * frac
    return np.array([ref.origin.x, z, 0.0])


def build_container(config: EpisodeConfig, row_halfwidth: float,
                    center_x: float) -> Container:
    length = config.resolved_container_length()
    inserts = None
    if config.variant == "constrained":
        if config.insert_offset == "press":
            # inserts overlap the sampled row ends: the springs squeeze
            # the row flush and keep pressing, so there is no free length
            # to park a pushed neighbor in
            offset = max(length / 2.0 - row_halfwidth + config.insert_press,
                         0.0)
        else:
            offset = float(config.insert_offset)
        inserts = WallInserts(offset, config.insert_stiffness)
    return Container(length, config.wall_height, 0.0,
                     center_x - length / 2.0, center_x + length / 2.0,
                     inserts)


def reset(seed, config: EpisodeConfig):
    """Sample a packed row, settle it, place the hand, pick the target.

    Returns (WorldState, CenteringRef, target_idx, rng). Raises
    InfeasibleLayout when the sampled row cannot fit the container.
    """
    if isinstance(seed, np.random.SeedSequence):
        seq = seed
    else:
        seq = np.random.SeedSequence(seed)
    rng = np.random.Generator(np.random.PCG64(seq))

    n = config.n_blocks
    hx, hz = config.block_half
    gaps = rng.uniform(config.gap_range[0], config.gap_range[1],
                       max(n - 1, 0))
    row_len = n * 2 * hx + float(np.sum(gaps))
    length = config.resolved_container_length()
    if row_len > length - 0.004:
        raise InfeasibleLayout(
            f"row of {n} blocks needs {row_len:.3f} m, container interior "
            f"is {length:.3f} m")

    center_x = 0.13  # keeps the default box at the canonical [0, 0.26]
    container = build_container(config, row_len / 2.0, center_x)

    blocks = []
    x = center_x - row_len / 2.0 + hx
    for i in range(n):
        blocks.append(RigidBlock(Vec3.from_xz(x, container.floor_z + hz),
                                 (hx, hz), 0.0, (0.0, 0.0), 0.0,
                                 config.block_mass, i))
        if i < n - 1:
            x += 2 * hx + gaps[i]

    if config.target_policy == "uniform":
        target_idx = int(rng.integers(0, n))
    else:
        target_idx = int(config.target_policy)
        assert 0 <= target_idx < n

    init_q = (config.init_joints.copy() if config.init_joints is not None
              else ready_pose())
    hand = HandState(Vec3.from_xz(center_x, container.floor_z + 2 * hz + 0.3),
                     0.0, init_q, np.zeros(16))
    world = WorldState.create(blocks, container, hand)
    world = physics.settle(world, config.physics, config.settle_steps)

    # capture the centering origin from the settled target, then place the
    # hand at the hover waypoint plus the sampled offset
    tc = physics.top_corners_xz(world.block_pos[target_idx, 0],
                                world.block_pos[target_idx, 1],
                                world.block_ang[target_idx], hx, hz)
    origin = Vec3.from_xz(0.5 * (tc[0][0] + tc[1][0]),
                          0.5 * (tc[0][1] + tc[1][1]))
    ref = CenteringRef(origin)
    world.base[0] = origin.x + rng.uniform(-config.hand_x_noise,
                                           config.hand_x_noise)
    world.base[1] = (origin.z + config.hover_dz
                     + rng.uniform(-config.hand_z_noise, config.hand_z_noise))
    world.base[2] = 0.0
    return world, ref, target_idx, rng


def split_distance(world: WorldState, target_idx: int) -> float:
    """Min distance between any target top corner and any neighbor top
    corner, over both sides (walls supply virtual corners)."""
    tc = physics.top_corners_xz(world.block_pos[target_idx, 0],
                                world.block_pos[target_idx, 1],
                                world.block_ang[target_idx],
                                world.block_half[target_idx, 0],
                                world.block_half[target_idx, 1])
    best = math.inf
    for side in ("left", "right"):
        for nb in encoder.neighbor_corners(world, target_idx, side):
            for tg in tc:
                d = math.hypot(nb[0] - tg[0], nb[1] - tg[1])
                best = min(best, d)
    return best


def is_success(target_height_history, other_heights_history,
               config: EpisodeConfig) -> bool:
    """True iff some 30-step window holds the target >= 0.2 m up with every
    other block under 0.05 m at every step inside it."""
    th = np.asarray(target_height_history, dtype=np.float64)
    hold = config.success_hold
    run = 0
    for t in range(len(th)):
        others = other_heights_history[t]
        ok = th[t] >= config.success_height and bool(
            np.all(np.asarray(others) < config.other_cap))
        run = run + 1 if ok else 0
        if run >= hold:
            return True
    return False


class SingulationEnv:
    """Gym-style wrapper: reset(seed) -> obs, step(action) -> (obs, reward,
    done, info). One instance is single-threaded; vectorized drivers own k
    independent instances."""

    def __init__(self, config: EpisodeConfig | None = None):
        self.config = config or EpisodeConfig()
        self.world = None
        self.ref = None
        self.target_idx = -1
        self.t = 0
        self.done = True

    # -- helpers ---------------------------------------------------------

    def _heights(self) -> np.ndarray:
        return self.world.block_pos[:, 1] - self._init_heights

    def _features(self, cmd_action) -> rewards.RewardFeatures:
        w = self.world
        tips, _, _ = physics.fk_arrays(w.joints, w.base, self.config.physics)
        tgt = w.block_pos[self.target_idx]
        sum_d = float(np.sum(np.hypot(tips[:, 0] - tgt[0],
                                      tips[:, 1] - tgt[1])))
        sum_c = len(w.tips_in_contact_with(self.target_idx))
        heights = self._heights()
        return rewards.RewardFeatures(
            h_target=float(heights[self.target_idx]),
            sum_d=sum_d,
            sum_c=sum_c,
            d_s=split_distance(w, self.target_idx),
            other_heights=heights,
            action=np.asarray(cmd_action, dtype=np.float64),
            target_idx=self.target_idx)

    def _observe(self, phase: int) -> Observation:
        cfg = self.config
        if cfg.obs_variant == "standard":
            return encoder.encode(self.world, self.target_idx, phase,
                                  self.ref, ee_offset=cfg.ee_offset)
        if cfg.obs_variant == "naive_block":
            return encoder.encode_naive(self.world, self.target_idx, phase,
                                        self.ref, ee_offset=cfg.ee_offset)
        if cfg.obs_variant == "tactile":
            return encoder.encode_tactile(self.world, self.target_idx, phase,
                                          self.ref,
                                          self.world.contact_points(),
                                          ee_offset=cfg.ee_offset)
        raise ValueError(f"unknown observation variant: {cfg.obs_variant!r}")

    # -- API -------------------------------------------------------------

    def reset(self, seed) -> Observation:
        cfg = self.config
        self.world, self.ref, self.target_idx, self._rng = reset(seed, cfg)
        self._init_heights = self.world.block_pos[:, 1].copy()
        self.t = 0
        self.done = False
        self.targets = self.world.joints.copy()
        self.ema_state = np.zeros(16)
        self.hold_run = 0
        self.success = False
        self.blowup = False
        self.reward_sum = 0.0
        self.max_ds_early = 0.0
        self.height_history = []
        self.other_history = []
        return self._observe(phase_of(0, cfg.schedule))

    def step(self, raw_action, base_override=None):
        """Advance one control period. base_override switches to scripted
        mode: the caller owns the wrist waypoint and the phase mask does not
        apply (scripted controllers act through all 120 steps)."""
        assert not self.done, "episode is over; call reset"
        cfg = self.config
        sched = cfg.schedule
        phase = phase_of(self.t, sched)
        raw = np.asarray(raw_action, dtype=np.float64).reshape(16).copy()

        if cfg.ema_enabled and base_override is None:
            self.ema_state = (cfg.ema_beta * raw
                              + (1.0 - cfg.ema_beta) * self.ema_state)
            cmd = self.ema_state.copy()
        else:
            cmd = raw

        if base_override is not None:
            applied = np.clip(cmd, -cfg.action_clamp, cfg.action_clamp)
            self.targets = self.world.joints + applied
            base_target = np.asarray(base_override, dtype=np.float64)
        elif phase == 3:
            # hand frozen while the arm retrieves: zero applied delta and
            # targets held at their last phase-2 values so the squeeze
            # built by the policy persists through the lift
            applied = np.zeros(16)
            base_target = ee_waypoint(phase, self.t, self.ref, cfg)
        else:
            applied = np.clip(cmd, -cfg.action_clamp, cfg.action_clamp)
            self.targets = self.world.joints + applied
            base_target = ee_waypoint(phase, self.t, self.ref, cfg)
        try:
            self.world = physics.step(self.world, self.targets, base_target,
                                      cfg.physics)
        except NumericalBlowup:
            self.blowup = True
            self.done = True
            feats = None
            obs = self._observe(phase)
            info = {"phase": phase, "blowup": True, "applied": applied,
                    "raw": raw, "outcome": self._outcome()}
            return obs, 0.0, True, info

        self.t += 1
        feats = self._features(cmd)
        breakdown = rewards.total_reward(feats, phase, cfg.reward_params,
                                         cfg.phase_weights)
        self.reward_sum += breakdown.total

        if phase <= 2:
            self.max_ds_early = max(self.max_ds_early, feats.d_s)
        heights = feats.other_heights
        self.height_history.append(feats.h_target)
        self.other_history.append(
            np.delete(heights, self.target_idx).copy())
        window_ok = (feats.h_target >= cfg.success_height
                     and bool(np.all(np.delete(heights, self.target_idx)
                                     < cfg.other_cap)))
        self.hold_run = self.hold_run + 1 if window_ok else 0
        if self.hold_run >= cfg.success_hold:
            self.success = True

        if (self.success and cfg.early_stop) or self.t >= sched.total_steps:
            self.done = True

        next_phase = phase_of(min(self.t, sched.total_steps - 1), sched)
        obs = self._observe(next_phase)
        info = {
            "phase": phase,
            "features": feats,
            "breakdown": breakdown,
            "applied": applied,
            "raw": raw,
            "heights": heights,
            "d_s": feats.d_s,
            "success": self.success,
            "base_target": base_target,
        }
        if self.done:
            info["outcome"] = self._outcome()
        return obs, breakdown.total, self.done, info

    def _outcome(self) -> TrialOutcome:
        if self.success:
            cls = "none"
        elif self.blowup:
            cls = "blowup"
        elif self.max_ds_early < self.config.reward_params.alpha_s:
            cls = "isolating"
        else:
            cls = "grasp_retrieve"
        return TrialOutcome(self.success, cls, self.t, self.reward_sum,
                            self.target_idx)


def classify_failure(outcome: TrialOutcome) -> str:
    return outcome.failure_class
