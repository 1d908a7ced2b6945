"""Resolved run configuration and its on-disk form.

A RunConfig fully describes a train / eval / sweep / baseline / replay run before any
environment is constructed.  The on-disk form is JSON; loading rejects unknown
keys so a typo'd config fails loudly instead of silently training defaults,
and a resolved snapshot written next to run outputs can be fed back to the
CLI to reproduce the run.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import env as env_mod
from . import rewards
from .physics import PhysicsParams


class ConfigError(Exception):
    """Invalid, unknown, or inconsistent configuration input."""


@dataclass(frozen=True)
class PPOHyperparams:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    learning_rate: float = 3e-4
    epochs: int = 5
    minibatches: int = 4
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    grad_clip: float = 1.0
    n_envs: int = 64
    horizon: int = 120
    hidden: tuple[int, ...] = (256, 128, 64)
    log_std_init: float = -1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    advantage_eps: float = 1e-8
    obs_norm: bool = True

    def __post_init__(self):
        assert 0.0 < self.gamma <= 1.0 and 0.0 < self.lam <= 1.0
        assert self.clip_eps > 0.0
        assert self.epochs >= 1 and self.minibatches >= 1


@dataclass(frozen=True)
class RunConfig:
    mode: str = "train"          # train | eval | sweep | baseline | replay
    seeds: tuple[int, ...] = (0,)
    env: env_mod.EpisodeConfig = field(default_factory=env_mod.EpisodeConfig)
    ablation: str | None = None
    hyper: PPOHyperparams = field(default_factory=PPOHyperparams)
    iterations: int = 3000
    checkpoint_every: int = 500
    out_dir: str = "runs/out"
    checkpoint: str | None = None
    episodes: int = 100
    deterministic_eval: bool = True
    eval_ema: bool = True

    def __post_init__(self):
        if self.mode not in ("train", "eval", "sweep", "baseline", "replay"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")


def replace_env(env_cfg: env_mod.EpisodeConfig, **kw) -> env_mod.EpisodeConfig:
    return replace(env_cfg, **kw)


def replace_run(run: RunConfig, **kw) -> RunConfig:
    return replace(run, **kw)


# --- dict / JSON round-trip ----------------------------------------------------

def _weights_to_lists(pw: dict) -> dict:
    return {str(k): [v.w_h, v.w_p, v.w_g, v.w_s, v.w_o, v.w_a]
            for k, v in pw.items()}


def _weights_from_lists(d: dict) -> dict:
    out = {}
    for k, row in d.items():
        if len(row) != 6:
            raise ConfigError(f"phase_weights[{k}] needs 6 entries, got {len(row)}")
        out[int(k)] = rewards.PhaseWeights(*map(float, row))
    return out


def _simple_dataclass_to_dict(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def _simple_dataclass_from_dict(cls, d: dict, label: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {label} keys: {sorted(unknown)}")
    kw = dict(d)
    for f in dataclasses.fields(cls):
        if f.name in kw and isinstance(kw[f.name], list):
            kw[f.name] = tuple(kw[f.name])
    try:
        return cls(**kw)
    except (TypeError, AssertionError) as exc:
        raise ConfigError(f"invalid {label} config: {exc}") from exc


def env_config_to_dict(cfg: env_mod.EpisodeConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "schedule":
            out[f.name] = [v.phase1_steps, v.phase2_steps, v.total_steps]
        elif f.name == "reward_params":
            out[f.name] = _simple_dataclass_to_dict(v)
        elif f.name == "phase_weights":
            out[f.name] = _weights_to_lists(v)
        elif f.name == "physics":
            out[f.name] = _simple_dataclass_to_dict(v)
        elif f.name == "init_joints":
            out[f.name] = None if v is None else [float(x) for x in v]
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


def env_config_from_dict(d: dict) -> env_mod.EpisodeConfig:
    names = {f.name for f in dataclasses.fields(env_mod.EpisodeConfig)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown env keys: {sorted(unknown)}")
    kw = {}
    for key, v in d.items():
        if key == "init_joints":
            if v is not None:
                if len(v) != 16:
                    raise ConfigError("init_joints needs 16 entries")
                v = np.asarray(v, dtype=np.float64)
            kw[key] = v
        elif key == "schedule":
            if len(v) != 3:
                raise ConfigError("schedule needs [phase1, phase2, total]")
            kw[key] = env_mod.PhaseSchedule(*map(int, v))
        elif key == "reward_params":
            kw[key] = _simple_dataclass_from_dict(rewards.RewardParams, v,
                                                  "reward_params")
        elif key == "phase_weights":
            kw[key] = _weights_from_lists(v)
        elif key == "physics":
            kw[key] = _simple_dataclass_from_dict(PhysicsParams, v, "physics")
        elif isinstance(v, list):
            kw[key] = tuple(v)
        else:
            kw[key] = v
    try:
        return env_mod.EpisodeConfig(**kw)
    except (TypeError, AssertionError) as exc:
        raise ConfigError(f"invalid env config: {exc}") from exc


def run_config_to_dict(run: RunConfig) -> dict:
    out = {}
    for f in dataclasses.fields(run):
        v = getattr(run, f.name)
        if f.name == "env":
            out[f.name] = env_config_to_dict(v)
        elif f.name == "hyper":
            d = _simple_dataclass_to_dict(v)
            d["hidden"] = list(v.hidden)
            out[f.name] = d
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


def run_config_from_dict(d: dict) -> RunConfig:
    names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kw = {}
    for key, v in d.items():
        if key == "env":
            kw[key] = env_config_from_dict(v)
        elif key == "hyper":
            kw[key] = _simple_dataclass_from_dict(PPOHyperparams, v, "hyper")
        elif isinstance(v, list):
            kw[key] = tuple(v)
        else:
            kw[key] = v
    try:
        return RunConfig(**kw)
    except TypeError as exc:
        raise ConfigError(f"invalid run config: {exc}") from exc


def load_run_config(path: str) -> RunConfig:
    try:
        fh = open(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    with fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return run_config_from_dict(data)


def save_run_config(run: RunConfig, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(run_config_to_dict(run), fh, indent=2, sort_keys=True)
        fh.write("\n")
