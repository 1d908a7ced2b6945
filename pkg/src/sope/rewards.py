"""Reward components and the phase-weighted total.

Six shaped terms: height, proximity, grasp, split penalty, other-blocks
penalty, action penalty. Each phase weighs them differently; the split
penalty dominates early (isolate), grasp pays in the middle, height pays
at the end. Components are reported unweighted in the breakdown so logs
can be re-scored exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RewardParams:
    alpha_h: float = 0.2   # height reward cap, m
    lambda_h: float = 0.1  # below-initial height slope
    lambda_p: float = 15.0  # proximity decay rate, 1/m
    alpha_p: float = 0.07  # proximity distance floor, m
    alpha_c: float = 2.0   # grasp contact-count cap
    alpha_s: float = 0.04  # full-split distance, m
    alpha_o: float = 0.05  # other-block lift tolerance, m

    def __post_init__(self):
        assert min(self.alpha_h, self.lambda_p, self.alpha_p,
                   self.alpha_c, self.alpha_s, self.alpha_o) > 0


@dataclass(frozen=True)
class PhaseWeights:
    w_h: float
    w_p: float
    w_g: float
    w_s: float
    w_o: float
    w_a: float

    def __post_init__(self):
        assert self.w_s <= 0 and self.w_o <= 0 and self.w_a <= 0


# per-phase weights: 1 = isolate, 2 = grasp, 3 = retrieve (hand frozen, so
# grasp/split shaping is inert there and set to zero)
PHASE_WEIGHTS = {
    1: PhaseWeights(0.0, 0.2, 0.0, -10.0, -11.0, -0.001),
    2: PhaseWeights(0.0, 0.2, 0.1, -5.0, -11.0, -0.001),
    3: PhaseWeights(10.0, 0.2, 0.0, 0.0, -11.0, 0.0),
}

# merged isolate+grasp weights for the two-phase ablation: grasp shaping
# active from the start, split pressure kept at the stronger early value
TWO_PHASE_WEIGHTS = {
    1: PhaseWeights(0.0, 0.2, 0.1, -10.0, -11.0, -0.001),
    2: PhaseWeights(0.0, 0.2, 0.1, -10.0, -11.0, -0.001),
    3: PHASE_WEIGHTS[3],
}


@dataclass
class RewardFeatures:
    h_target: float        # target height above its initial height, m
    sum_d: float           # sum of fingertip-to-target-center distances, m
    sum_c: int             # fingertips in contact with the target
    d_s: float             # min target-corner to neighbor-corner distance, m
    other_heights: np.ndarray  # per-block height above its own initial, m
    action: np.ndarray     # commanded joint deltas, rad
    target_idx: int        # index skipped by the other-blocks penalty

    def __post_init__(self):
        assert self.sum_d >= 0 and self.d_s >= 0
        assert 0 <= self.sum_c <= 4


@dataclass(frozen=True)
class RewardBreakdown:
    r_h: float
    r_p: float
    r_g: float
    p_s: float
    p_o: float
    p_a: float
    total: float
    phase: int


def height_reward(h: float, params: RewardParams) -> float:
    if h >= 0.0:
        return min(h, params.alpha_h)
    return params.lambda_h * h


def proximity_reward(sum_d: float, params: RewardParams) -> float:
    return math.exp(-params.lambda_p * max(sum_d, params.alpha_p))


def grasp_reward(sum_c: float, params: RewardParams) -> float:
    return min(float(sum_c), params.alpha_c)


def split_penalty(d_s: float, params: RewardParams) -> float:
    return max(params.alpha_s - d_s, 0.0)


def other_blocks_penalty(other_heights, target_idx: int,
                         params: RewardParams) -> float:
    total = 0.0
    for i, h in enumerate(other_heights):
        if i != target_idx and h > params.alpha_o:
            total += h
    return total


def action_penalty(action) -> float:
    a = np.asarray(action, dtype=np.float64)
    return float(a @ a)


def total_reward(features: RewardFeatures, phase: int, params: RewardParams,
                 weights: dict | None = None) -> RewardBreakdown:
    w = (weights or PHASE_WEIGHTS)[phase]
    r_h = height_reward(features.h_target, params)
    r_p = proximity_reward(features.sum_d, params)
    r_g = grasp_reward(features.sum_c, params)
    p_s = split_penalty(features.d_s, params)
    p_o = other_blocks_penalty(features.other_heights, features.target_idx,
                               params)
    p_a = action_penalty(features.action)
    total = (w.w_h * r_h + w.w_p * r_p + w.w_g * r_g
             + w.w_s * p_s + w.w_o * p_o + w.w_a * p_a)
    return RewardBreakdown(r_h, r_p, r_g, p_s, p_o, p_a, total, phase)


def recompose(breakdown: RewardBreakdown,
              weights: dict | None = None) -> float:
    """Re-derive the total from logged components; used by replay checks."""
    w = (weights or PHASE_WEIGHTS)[breakdown.phase]
    return (w.w_h * breakdown.r_h + w.w_p * breakdown.r_p
            + w.w_g * breakdown.r_g + w.w_s * breakdown.p_s
            + w.w_o * breakdown.p_o + w.w_a * breakdown.p_a)
