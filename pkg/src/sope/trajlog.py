"""Line-delimited trajectory logs and replay verification.

One JSON object per line: a header record with episode metadata, then one
record per step carrying the observation, actions, reward features and the
reward breakdown.  Floats are written with full round-trip precision, so a
replay can recompute every reward from the logged features and demand
equality to 1e-9.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import rewards


def _floats(x) -> list:
    return [float(v) for v in np.asarray(x).ravel()]


class TrajectoryWriter:
    def __init__(self, path: str, meta: dict):
        self._fh = open(path, "w")
        self._fh.write(json.dumps({"kind": "header", **meta}) + "\n")

    def write_step(self, step: int, phase: int, obs, raw_action, applied,
                   features: rewards.RewardFeatures,
                   breakdown: rewards.RewardBreakdown) -> None:
        rec = {
            "kind": "step",
            "step": step,
            "phase": phase,
            "obs": _floats(obs),
            "raw_action": _floats(raw_action),
            "applied_action": _floats(applied),
            "features": {
                "h_target": float(features.h_target),
                "sum_d": float(features.sum_d),
                "sum_c": int(features.sum_c),
                "d_s": float(features.d_s),
                "other_heights": _floats(features.other_heights),
                "action": _floats(features.action),
                "target_idx": int(features.target_idx),
            },
            "reward": float(breakdown.total),
            "breakdown": {
                "r_h": breakdown.r_h,
                "r_p": breakdown.r_p,
                "r_g": breakdown.r_g,
                "p_s": breakdown.p_s,
                "p_o": breakdown.p_o,
                "p_a": breakdown.p_a,
            },
        }
        self._fh.write(json.dumps(rec) + "\n")

    def write_outcome(self, outcome) -> None:
        self._fh.write(json.dumps({
            "kind": "outcome",
            "success": bool(outcome.success),
            "failure_class": outcome.failure_class,
            "steps_elapsed": int(outcome.steps_elapsed),
            "reward_sum": float(outcome.reward_sum),
            "target_idx": int(outcome.target_idx),
        }) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def attach_logger(env, path: str, meta: dict) -> TrajectoryWriter:
    """Returns a writer; caller feeds it via log_step after each env.step."""
    full = {"n_blocks": env.config.n_blocks,
            "obs_variant": env.config.obs_variant,
            "target_idx": env.target_idx, **meta}
    return TrajectoryWriter(path, full)


def log_step(writer: TrajectoryWriter, t: int, obs, info: dict) -> None:
    if "features" not in info:  # blowup step has no reward evaluation
        return
    writer.write_step(t, info["phase"], obs.values, info["raw"],
                      info["applied"], info["features"], info["breakdown"])


def read_trajectory(path: str):
    """Returns (header | None, steps, outcome | None)."""
    header = None
    outcome = None
    steps = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            kind = rec.get("kind")
            if kind == "header":
                header = rec
            elif kind == "outcome":
                outcome = rec
            elif kind == "step":
                steps.append(rec)
    return header, steps, outcome


@dataclass
class ReplayReport:
    steps: int
    mismatches: list  # (step index, logged total, recomputed total)
    phase_changes: list  # (step, phase)
    max_d_s: float
    final_height: float

    @property
    def ok(self) -> bool:
        return not self.mismatches


def replay_verify(path: str, params: rewards.RewardParams | None = None,
                  weights: dict | None = None, tol: float = 1e-9,
                  out=None) -> ReplayReport:
    """Recompute rewards from logged features and compare with logged values.

    Prints a human-readable dump to `out` when given (phase boundaries, d_s
    trace, heights).  Empty files produce a clean zero-step report.
    """
    params = params or rewards.RewardParams()
    header, steps, outcome = read_trajectory(path)
    mismatches = []
    phase_changes = []
    last_phase = None
    max_ds = 0.0
    final_h = 0.0
    for rec in steps:
        f = rec["features"]
        feats = rewards.RewardFeatures(
            h_target=f["h_target"], sum_d=f["sum_d"], sum_c=f["sum_c"],
            d_s=f["d_s"], other_heights=np.asarray(f["other_heights"]),
            action=np.asarray(f["action"]), target_idx=f["target_idx"])
        br = rewards.total_reward(feats, rec["phase"], params, weights)
        if abs(br.total - rec["reward"]) > tol:
            mismatches.append((rec["step"], rec["reward"], br.total))
        if rec["phase"] != last_phase:
            phase_changes.append((rec["step"], rec["phase"]))
            last_phase = rec["phase"]
        max_ds = max(max_ds, f["d_s"])
        final_h = f["h_target"]
    report = ReplayReport(steps=len(steps), mismatches=mismatches,
                          phase_changes=phase_changes, max_d_s=max_ds,
                          final_height=final_h)
    if out is not None:
        _dump(report, header, steps, outcome, out)
    return report


def _dump(report: ReplayReport, header, steps, outcome, out) -> None:
    w = out.write
    if header:
        w(f"trajectory: {header.get('n_blocks')} blocks, "
          f"target {header.get('target_idx')}, "
          f"obs {header.get('obs_variant')}\n")
    if report.steps == 0:
        w("no steps\n")
        return
    w(f"{report.steps} steps; phase boundaries: "
      + ", ".join(f"t={t}->phase {p}" for t, p in report.phase_changes) + "\n")
    for rec in steps:
        f = rec["features"]
        w(f"  t={rec['step']:3d} ph={rec['phase']} r={rec['reward']:+9.4f} "
          f"h={f['h_target']:+.4f} d_s={f['d_s']:.4f} c={f['sum_c']}\n")
    w(f"max d_s = {report.max_d_s:.4f}; final height = {report.final_height:.4f}\n")
    if outcome:
        w(f"outcome: success={outcome['success']} "
          f"class={outcome['failure_class']}\n")
    if report.mismatches:
        for step, logged, recomputed in report.mismatches:
            w(f"MISMATCH at step {step}: logged {logged!r} "
              f"recomputed {recomputed!r}\n")
    else:
        w("rewards verified: 0 mismatches\n")
