"""Scripted side-to-side swipe & pinch controller, plus ablation presets.

The script is a fixed five-stage routine: press-and-drag the left neighbor
away, same for the right neighbor, open the pinch fingers over the target,
close, lift.  It drives the hand through the episode's scripted-waypoint
interface (joint-target deltas + base waypoint override) and is fully
deterministic given the world at reset and the step clock.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import env, physics, rewards

_LINKS = np.array([0.05, 0.04, 0.03, 0.02])
_MOUNTS = np.array([-0.045, -0.015, 0.015, 0.045])


def _fk1(q):
    """Single-finger planar FK relative to the mount: tip (x, z) and 2x4 Jacobian."""
    phi = np.cumsum(q)
    p = np.array([np.sum(_LINKS * np.sin(phi)), -np.sum(_LINKS * np.cos(phi))])
    jac = np.zeros((2, 4))
    for k in range(4):
        jac[0, k] = np.sum(_LINKS[k:] * np.cos(phi[k:]))
        jac[1, k] = np.sum(_LINKS[k:] * np.sin(phi[k:]))
    return p, jac


def finger_ik(target_xz, seed, iters=80, damp=1e-4):
    """Damped least-squares IK for one finger; deterministic given the seed pose."""
    q = np.array(seed, dtype=np.float64)
    target = np.asarray(target_xz, dtype=np.float64)
    for _ in range(iters):
        p, jac = _fk1(q)
        step = np.linalg.solve(jac.T @ jac + damp * np.eye(4), jac.T @ (target - p))
        q = np.clip(q + np.clip(step, -0.3, 0.3), -1.6, 1.6)
    return q


@dataclass(frozen=True)
class S2SSPConfig:
    """Script shape parameters.  Stage budgets must fit one 120-step episode.

    The stage budgets and stroke length are tuned against the episode
    geometry: pushes need the full press-drag-retract arc to carry a packed
    neighbor past its tipping point, the pinch stage must absorb the slow
    joint-space morph (the PD tracks roughly 0.04 rad per control step), and
    the lift stage needs 30 steps of hold above the success height.
    """
    push_finger: int = 0
    pinch_fingers: tuple[int, int] = (1, 3)
    push_stroke: float = 0.055     # m, outward drag distance per neighbor
    push_depth: float = 0.008     # m, press below the neighbor's top face
    stage_budgets: tuple[int, ...] = (16, 16, 36, 5, 47)
    press_ramp: float = 0.030      # m, extra descent tracking the leaning top
    reach: float = 0.085           # m, deployed tip depth below the base
    clearance: float = 0.020       # m, tip clearance over block tops in transit
    open_halfgap: float = 0.026    # m, pinch tip half-separation before closing
    closed_halfgap: float = 0.019  # m, commanded half-separation when closed
    grip_below_top: float = 0.035  # m, pinch depth below the target's top
    lift_rate: float = 0.015       # m per step while retrieving
    lift_cap: float = 0.30         # m, total lift above the grip waypoint
    descend_window: int = 6        # steps reserved at the end of the pinch stage

    def __post_init__(self):
        assert sum(self.stage_budgets) <= 120
        assert len(self.stage_budgets) == 5

    def hover_dz(self) -> float:
        # hover height that keeps a fully deployed tip clear of the tops
        return self.reach + self.clearance


def stage_of(t: int, budgets) -> tuple[int, int]:
    """Map the episode clock onto (stage index, steps into stage).

    A stage that has not finished its motion when its budget expires is simply
    cut off; the clock advances to the next stage regardless.
    """
    acc = 0
    for i, b in enumerate(budgets):
        if t < acc + b:
            return i, t - acc
        acc += b
    return len(budgets) - 1, t - acc + budgets[-1]


class S2SSPController:
    """Stateful form of the script: anchors are frozen at reset.

    Anchors (target top height, neighbor centers) must come from the reset
    world, not the live one — the script moves exactly the blocks it keys on,
    and re-anchoring each step chases them across the container.
    """

    def __init__(self, config: S2SSPConfig | None = None):
        self.config = config or S2SSPConfig()
        c = self.config
        depth = -c.reach
        # mount-relative IK targets put the deployed tips at base-relative
        # x = -0.045 (push) and +/- the pinch half-gaps
        self.pose_push = finger_ik((0.0, depth), (0.6, 0.4, 0.3, 0.2))
        self.pose_curl_l = np.array([0.3, 1.2, 1.2, 1.2])
        self.pose_curl_r = -self.pose_curl_l
        f1, f3 = c.pinch_fingers
        self.pose_open = {
            f1: finger_ik((-c.open_halfgap - _MOUNTS[f1], depth),
                          (0.5, 0.4, 0.3, 0.2)),
            f3: finger_ik((c.open_halfgap - _MOUNTS[f3], depth),
                          (-0.5, -0.4, -0.3, -0.2)),
        }
        self.pose_closed = {
            f1: finger_ik((-c.closed_halfgap - _MOUNTS[f1], depth),
                          (0.5, 0.4, 0.3, 0.2)),
            f3: finger_ik((c.closed_halfgap - _MOUNTS[f3], depth),
                          (-0.5, -0.4, -0.3, -0.2)),
        }
        self.target_idx = None

    def start_joints(self) -> np.ndarray:
        """Hand pose at spawn: push finger already deployed, the rest curled.

        Deploying the push finger mid-episode would sweep its tip through the
        row; spawning deployed (with a matching hover height) avoids that.
        """
        q = np.zeros(16)
        q[4 * self.config.push_finger:4 * self.config.push_finger + 4] = self.pose_push
        for f in range(4):
            if f != self.config.push_finger:
                q[4 * f:4 * f + 4] = self.pose_curl_l if _MOUNTS[f] < 0 else self.pose_curl_r
        return q

    def reset(self, world, target_idx: int):
        self.target_idx = target_idx
        tc = physics.top_corners_xz(world.block_pos[target_idx, 0],
                                    world.block_pos[target_idx, 1],
                                    world.block_ang[target_idx],
                                    world.block_half[target_idx, 0],
                                    world.block_half[target_idx, 1])
        self.top_z = max(tc[0][1], tc[1][1])
        self.nb_left = (float(world.block_pos[target_idx - 1, 0])
                        if target_idx > 0 else None)
        self.nb_right = (float(world.block_pos[target_idx + 1, 0])
                         if target_idx + 1 < world.n_blocks else None)

    def s2ssp_action(self, world, stage_clock: int):
        """One scripted step: (16 joint-target deltas, base waypoint override)."""
        c = self.config
        stage, k = stage_of(stage_clock, c.stage_budgets)
        q = np.zeros(16)
        pf = c.push_finger
        q[4 * pf:4 * pf + 4] = self.pose_push
        for f in range(4):
            if f != pf:
                q[4 * f:4 * f + 4] = self.pose_curl_l if _MOUNTS[f] < 0 else self.pose_curl_r
        high_z = self.top_z + c.hover_dz()
        press_z = self.top_z - c.push_depth + c.reach
        wp = np.array([world.base[0], high_z, 0.0])

        if stage in (0, 1):
            entry = self.nb_left if stage == 0 else self.nb_right
            if entry is None:
                return q - world.joints, wp  # wall on this side: hold, no-op
            bx = entry - _MOUNTS[pf]  # base offset puts the push tip on entry
            sgn = -1.0 if stage == 0 else 1.0
            if k < 3:
                wp[:] = (bx, high_z, 0.0)
            elif k < 6:
                wp[:] = (bx, press_z, 0.0)
            elif k < 14:
                frac = (k - 5) / 8.0
                # drag while descending along the leaning top so grip holds
                wp[:] = (bx + sgn * c.push_stroke * frac,
                         press_z - c.press_ramp * frac, 0.0)
            else:
                wp[:] = (bx + sgn * c.push_stroke, high_z, 0.0)
        elif stage == 2:
            tc = physics.top_corners_xz(world.block_pos[self.target_idx, 0],
                                        world.block_pos[self.target_idx, 1],
                                        world.block_ang[self.target_idx],
                                        world.block_half[self.target_idx, 0],
                                        world.block_half[self.target_idx, 1])
            mid_x = 0.5 * (tc[0][0] + tc[1][0])
            for f, pose in self.pose_open.items():
                q[4 * f:4 * f + 4] = pose
            if k < c.stage_budgets[2] - c.descend_window:
                # morph and travel together: the opening tips swing above the
                # tops with 2 cm margin, so hovering over the target is safe
                wp[:] = (mid_x, high_z, 0.0)
            else:
                wp[:] = (mid_x, self.top_z + c.reach - c.grip_below_top, 0.0)
        else:
            for f, pose in self.pose_closed.items():
                q[4 * f:4 * f + 4] = pose
            grip_z = self.top_z + c.reach - c.grip_below_top
            if stage == 3:
                wp[:] = (world.base[0], grip_z, 0.0)
            else:
                lift = min(c.lift_rate * (k + 1), c.lift_cap)
                wp[:] = (world.base[0], grip_z + lift, 0.0)
        return q - world.joints, wp


def s2ssp_action(world, target_idx: int, stage_clock: int,
                 controller: S2SSPController):
    """Functional form of the script step; the controller carries the anchors."""
    if controller.target_idx != target_idx:
        raise ValueError("controller was reset for a different target")
    return controller.s2ssp_action(world, stage_clock)


def baseline_episode_config(variant: str = "normal", n_blocks: int = 4,
                            config: S2SSPConfig | None = None,
                            controller: S2SSPController | None = None) -> env.EpisodeConfig:
    ctl = controller or S2SSPController(config)
    return env.EpisodeConfig(n_blocks=n_blocks, variant=variant,
                             init_joints=ctl.start_joints(),
                             hover_dz=ctl.config.hover_dz())


def run_baseline_trial(seed: int, variant: str = "normal", n_blocks: int = 4,
                       config: S2SSPConfig | None = None,
                       step_hook=None) -> env.TrialOutcome:
    """Run one scripted episode end to end and classify the outcome."""
    ctl = S2SSPController(config)
    e = env.SingulationEnv(baseline_episode_config(variant, n_blocks,
                                                   controller=ctl))
    e.reset(seed)
    ctl.reset(e.world, e.target_idx)
    info = {}
    for t in range(e.config.schedule.total_steps):
        delta, wp = ctl.s2ssp_action(e.world, t)
        obs, reward, done, info = e.step(delta, base_override=wp)
        if step_hook is not None:
            step_hook(t, e, reward, info)
        if done:
            break
    return info["outcome"]


# --- trained ablation presets -------------------------------------------------

TWO_PHASE_HOVER_DZ = 0.02  # merged variant starts midway down the approach


@dataclass(frozen=True)
class AblationSpec:
    """One trained ablation: what it changes relative to the default run."""
    name: str
    obs_variant: str = "standard"
    schedule: env.PhaseSchedule | None = None
    phase_weights: dict | None = None
    hover_dz: float | None = None


def two_phase_schedule() -> tuple[env.PhaseSchedule, dict]:
    """Merged isolate+grasp stage covering 70 steps; final stage unchanged."""
    return (env.PhaseSchedule(phase1_steps=70, phase2_steps=0,
                              total_steps=120),
            rewards.TWO_PHASE_WEIGHTS)


_TP_SCHED, _TP_WEIGHTS = two_phase_schedule()

ABLATIONS = {
    "tactile": AblationSpec("tactile", obs_variant="tactile"),
    "naive_block": AblationSpec("naive_block", obs_variant="naive_block"),
    "two_phase": AblationSpec("two_phase", schedule=_TP_SCHED,
                              phase_weights=_TP_WEIGHTS,
                              hover_dz=TWO_PHASE_HOVER_DZ),
}


def ablation_run_config(spec: AblationSpec | str, base=None):
    """Resolve an ablation into a full run configuration.

    The result differs from the default run only in the fields the ablation
    defines (observation variant, phase schedule, phase weights, hover).
    """
    from . import config as config_mod
    if isinstance(spec, str):
        if spec not in ABLATIONS:
            raise config_mod.ConfigError(
                f"unknown ablation {spec!r}; expected one of {sorted(ABLATIONS)}")
        spec = ABLATIONS[spec]
    run = base if base is not None else config_mod.RunConfig()
    env_cfg = config_mod.replace_env(run.env,
                                     obs_variant=spec.obs_variant,
                                     schedule=spec.schedule or run.env.schedule,
                                     phase_weights=spec.phase_weights or run.env.phase_weights,
                                     hover_dz=spec.hover_dz if spec.hover_dz is not None
                                     else run.env.hover_dz)
    return config_mod.replace_run(run, ablation=spec.name, env=env_cfg)
