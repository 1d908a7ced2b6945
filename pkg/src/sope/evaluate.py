"""Deterministic policy evaluation, the scripted-baseline runner, and the
zero-shot block-count sweep.

Evaluation episodes use per-episode seeds derived from (seed, episode index),
the policy's distribution mean (unless sampling is requested), and EMA action
smoothing — the deployment configuration.  Nothing here mutates checkpoints
or normalization statistics.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import baselines, env as env_mod, ppo, trajlog


class CheckpointMismatch(Exception):
    """Checkpoint and env config disagree (observation variant/dimension)."""


def worker_count() -> int:
    """SOPE_THREADS caps eval workers; absent or 0 means single-threaded."""
    raw = os.environ.get("SOPE_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"SOPE_THREADS must be an integer, got {raw!r}")
    return max(n, 0)


@dataclass
class MetricsRecord:
    episodes: int
    successes: int
    success_rate: float
    per_target_successes: dict
    failure_classes: dict
    mean_episode_reward: float

    def check(self) -> "MetricsRecord":
        assert sum(self.per_target_successes.values()) == self.successes
        assert sum(self.failure_classes.values()) + self.successes == self.episodes
        return self

    def to_dict(self) -> dict:
        return {
            "episodes": self.episodes,
            "successes": self.successes,
            "success_rate": self.success_rate,
            "per_target_successes": {str(k): v for k, v
                                     in sorted(self.per_target_successes.items())},
            "failure_classes": dict(sorted(self.failure_classes.items())),
            "mean_episode_reward": self.mean_episode_reward,
        }


def episode_seed(seed: int, episode: int) -> int:
    ss = np.random.SeedSequence((seed, episode))
    return int(ss.generate_state(1, np.uint64)[0])


class PolicyAgent:
    """Wraps a checkpoint: frozen normalization, mean or sampled actions."""

    def __init__(self, policy, value_net, norm, obs_variant: str,
                 deterministic: bool = True, sample_seed: int = 0):
        self.policy = policy
        self.norm = norm
        self.obs_variant = obs_variant
        self.deterministic = deterministic
        self._rng = np.random.default_rng(sample_seed)

    @classmethod
    def from_checkpoint(cls, path: str, env_cfg: env_mod.EpisodeConfig,
                        deterministic: bool = True) -> "PolicyAgent":
        ckpt = ppo.load_checkpoint(path)
        variant = ckpt["header"]["obs_variant"]
        if variant != env_cfg.obs_variant:
            raise CheckpointMismatch(
                f"checkpoint trained on {variant!r} observations, env is "
                f"{env_cfg.obs_variant!r}")
        if ckpt["header"]["obs_dim"] != env_cfg.layout().total_dim:
            raise CheckpointMismatch(
                f"checkpoint obs dim {ckpt['header']['obs_dim']} != env "
                f"{env_cfg.layout().total_dim}")
        policy, value_net, norm = ppo.restore_nets(ckpt)
        return cls(policy, value_net, norm, variant, deterministic)

    def begin_episode(self, environment) -> None:
        pass

    def act(self, environment, obs, t: int):
        x = self.norm.normalize(obs.values[None, :])
        if self.deterministic:
            action = self.policy.mean(x)[0]
        else:
            action, _ = self.policy.sample(x, self._rng)
            action = action[0]
        return action, None


class ScriptedAgent:
    """Adapts the swipe-and-pinch script to the evaluation loop."""

    def __init__(self, config: baselines.S2SSPConfig | None = None):
        self.controller = baselines.S2SSPController(config)

    def episode_config(self, env_cfg: env_mod.EpisodeConfig) -> env_mod.EpisodeConfig:
        return replace(env_cfg, init_joints=self.controller.start_joints(),
                       hover_dz=self.controller.config.hover_dz())

    def begin_episode(self, environment) -> None:
        self.controller.reset(environment.world, environment.target_idx)

    def act(self, environment, obs, t: int):
        return self.controller.s2ssp_action(environment.world, t)


class RandomAgent:
    """Acts with clamped Gaussian noise; the no-learning floor."""

    def __init__(self, scale: float = 0.05, seed: int = 0):
        self.scale = scale
        self._rng = np.random.default_rng(seed)

    def begin_episode(self, environment) -> None:
        pass

    def act(self, environment, obs, t: int):
        return self._rng.normal(0.0, self.scale, 16), None


def run_episode(agent, env_cfg: env_mod.EpisodeConfig, seed: int,
                traj_path: str | None = None):
    e = env_mod.SingulationEnv(env_cfg)
    obs = e.reset(seed)
    agent.begin_episode(e)
    writer = None
    if traj_path:
        writer = trajlog.attach_logger(e, traj_path, {"seed": seed})
    info = {}
    for t in range(env_cfg.schedule.total_steps):
        out = agent.act(e, obs, t)
        action, override = out if isinstance(out, tuple) else (out, None)
        obs, reward, done, info = e.step(action, base_override=override)
        if writer is not None:
            trajlog.log_step(writer, t, obs, info)
        if done:
            break
    outcome = info["outcome"]
    if writer is not None:
        writer.write_outcome(outcome)
        writer.close()
    return outcome


def aggregate(outcomes) -> MetricsRecord:
    successes = sum(1 for o in outcomes if o.success)
    per_target = {}
    classes = {}
    for o in outcomes:
        if o.success:
            per_target[o.target_idx] = per_target.get(o.target_idx, 0) + 1
        else:
            classes[o.failure_class] = classes.get(o.failure_class, 0) + 1
    rec = MetricsRecord(
        episodes=len(outcomes),
        successes=successes,
        success_rate=successes / len(outcomes) if outcomes else 0.0,
        per_target_successes=per_target,
        failure_classes=classes,
        mean_episode_reward=float(np.mean([o.reward_sum for o in outcomes]))
        if outcomes else 0.0,
    )
    return rec.check()


def evaluate(agent_factory, env_cfg: env_mod.EpisodeConfig, n_episodes: int,
             seed: int, ema: bool = True,
             traj_dir: str | None = None) -> MetricsRecord:
    """Run n_episodes with deterministic per-episode seeds and aggregate.

    `agent_factory()` must build a fresh agent (workers never share one:
    forward caches and script anchors are mutable).  Episodes are dispatched
    by index and aggregated in index order, so the result does not depend on
    the worker count.
    """
    eval_cfg = replace(env_cfg, ema_enabled=ema)
    probe = agent_factory()
    if isinstance(probe, ScriptedAgent):
        eval_cfg = probe.episode_config(eval_cfg)
    if traj_dir:
        os.makedirs(traj_dir, exist_ok=True)

    def one(idx: int):
        agent = agent_factory()
        path = (os.path.join(traj_dir, f"episode{idx:04d}.jsonl")
                if traj_dir else None)
        return run_episode(agent, eval_cfg, episode_seed(seed, idx), path)

    workers = worker_count()
    if workers <= 1:
        outcomes = [one(i) for i in range(n_episodes)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one, range(n_episodes)))
    return aggregate(outcomes)


SWEEP_BLOCK_COUNTS = (1, 2, 5, 10)


def generalization_sweep(checkpoint: str, seeds,
                         env_cfg: env_mod.EpisodeConfig | None = None,
                         episodes: int = 100, ema: bool = True,
                         block_counts=SWEEP_BLOCK_COUNTS):
    """Zero-shot eval of one checkpoint across block counts.

    Returns {n_blocks: [success_rate per seed]}; the observation layout is
    block-count independent, so the same policy runs everywhere.
    """
    env_cfg = env_cfg or env_mod.EpisodeConfig()
    results = {}
    for n in block_counts:
        cfg_n = replace(env_cfg, n_blocks=n)
        agent_factory = lambda: PolicyAgent.from_checkpoint(checkpoint, cfg_n)
        rates = []
        for seed in seeds:
            rec = evaluate(agent_factory, cfg_n, episodes, seed, ema=ema)
            rates.append(rec.success_rate)
        results[n] = rates
    return results


def sweep_table(results: dict, method: str = "ours") -> str:
    """Comma-separated table: one row per method, one column per task."""
    cols = sorted(results)
    header = "method," + ",".join(f"1-out-of-{n}" for n in cols)
    cells = []
    for n in cols:
        rates = np.asarray(results[n], dtype=np.float64)
        cells.append(f"{rates.mean():.3f}±{rates.std():.3f}")
    return header + "\n" + method + "," + ",".join(cells) + "\n"
