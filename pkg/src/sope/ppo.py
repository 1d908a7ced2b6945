"""Clipped-surrogate policy optimization over vectorized episodes.

The trainer alternates full-episode rollout collection across k env instances
with epochs of minibatch gradient steps on the clipped objective plus a value
MSE.  All gradient math is analytic (see nets.py); the optimizer is Adam as
written equations, not a library.  Everything is single-threaded and seeded,
so runs are bitwise reproducible.
"""
from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, replace

import numpy as np

from . import env as env_mod
from .config import PPOHyperparams, RunConfig
from .nets import (Adam, GaussianPolicy, RunningNorm, ValueNet,
                   LOG_STD_MIN, LOG_STD_MAX, clip_global_norm)

CKPT_MAGIC = "SOPE-CKPT v1"


class NonFiniteLoss(RuntimeError):
    """A loss or gradient went NaN/Inf; training state is not trustworthy."""


def gae(rewards, values, dones, bootstrap_value, gamma, lam):
    """Generalized advantage estimation by backward recursion.

    Accepts (T,) or (E, T) arrays; `bootstrap_value` is the value estimate of
    the state after the last step (scalar or (E,)), ignored wherever the last
    step is terminal.  Returns (advantages, returns), returns = adv + values.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    squeeze = rewards.ndim == 1
    if squeeze:
        rewards = rewards[None, :]
        values = np.asarray(values, dtype=np.float64)[None, :]
        dones = np.asarray(dones, dtype=np.float64)[None, :]
    else:
        values = np.asarray(values, dtype=np.float64)
        dones = np.asarray(dones, dtype=np.float64)
    n_envs, horizon = rewards.shape
    boot = np.broadcast_to(np.asarray(bootstrap_value, dtype=np.float64),
                           (n_envs,)).copy()
    adv = np.zeros_like(rewards)
    running = np.zeros(n_envs)
    next_value = boot
    for t in range(horizon - 1, -1, -1):
        not_done = 1.0 - dones[:, t]
        delta = rewards[:, t] + gamma * next_value * not_done - values[:, t]
        running = delta + gamma * lam * not_done * running
        adv[:, t] = running
        next_value = values[:, t]
    rets = adv + values
    if squeeze:
        return adv[0], rets[0]
    return adv, rets


def clipped_policy_loss(ratio, advantage, eps):
    """-E[min(r·A, clip(r, 1-eps, 1+eps)·A)] over the batch."""
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    u1 = ratio * advantage
    u2 = np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantage
    return float(-np.mean(np.minimum(u1, u2)))


@dataclass
class RolloutBuffer:
    obs: np.ndarray        # (E, T, obs_dim), normalized as seen by the policy
    raw_obs: np.ndarray    # (E, T, obs_dim), pre-normalization
    actions: np.ndarray    # (E, T, act_dim)
    log_probs: np.ndarray  # (E, T)
    values: np.ndarray     # (E, T)
    rewards: np.ndarray    # (E, T)
    dones: np.ndarray      # (E, T)
    phases: np.ndarray     # (E, T)
    outcomes: list         # per-env TrialOutcome

    @property
    def n_envs(self) -> int:
        return self.obs.shape[0]

    @property
    def horizon(self) -> int:
        return self.obs.shape[1]


def episode_seed(run_seed: int, iteration: int, env_idx: int) -> int:
    ss = np.random.SeedSequence((run_seed, iteration, env_idx))
    return int(ss.generate_state(1, np.uint64)[0])


def collect_rollouts(policy, value_net, envs, hyper: PPOHyperparams,
                     norm: RunningNorm | None, rng: np.random.Generator,
                     seeds, deterministic: bool = False) -> RolloutBuffer:
    """Run every env for one full episode and record the trajectory.

    Envs are reset with the given per-env seeds and stepped in index order, so
    a fixed seed list yields a bitwise identical buffer.  An env that dies
    early (blowup) is frozen in place: remaining slots repeat its last
    observation with zero reward and done=1, contributing no advantage.
    """
    n_envs = len(envs)
    horizon = hyper.horizon
    obs_dim = envs[0].config.layout().total_dim
    act_dim = 16
    buf = RolloutBuffer(
        obs=np.zeros((n_envs, horizon, obs_dim)),
        raw_obs=np.zeros((n_envs, horizon, obs_dim)),
        actions=np.zeros((n_envs, horizon, act_dim)),
        log_probs=np.zeros((n_envs, horizon)),
        values=np.zeros((n_envs, horizon)),
        rewards=np.zeros((n_envs, horizon)),
        dones=np.zeros((n_envs, horizon)),
        phases=np.zeros((n_envs, horizon), dtype=np.int64),
        outcomes=[None] * n_envs,
    )
    raw = np.zeros((n_envs, obs_dim))
    for e, (inst, seed) in enumerate(zip(envs, seeds)):
        raw[e] = inst.reset(seed).values
    done_flags = np.zeros(n_envs, dtype=bool)
    for t in range(horizon):
        obs_n = norm.normalize(raw) if norm is not None else raw.copy()
        if deterministic:
            actions = policy.mean(obs_n)
            log_probs = policy.log_prob_given_mean(actions, actions)
        else:
            actions, log_probs = policy.sample(obs_n, rng)
        values = value_net.forward(obs_n)
        buf.obs[:, t] = obs_n
        buf.raw_obs[:, t] = raw
        buf.actions[:, t] = actions
        buf.log_probs[:, t] = log_probs
        buf.values[:, t] = values
        for e, inst in enumerate(envs):
            if done_flags[e]:
                buf.dones[e, t] = 1.0
                buf.phases[e, t] = buf.phases[e, t - 1]
                continue
            obs, reward, done, info = inst.step(actions[e])
            buf.rewards[e, t] = reward
            buf.phases[e, t] = info["phase"]
            raw[e] = obs.values
            if done:
                done_flags[e] = True
                buf.dones[e, t] = 1.0
                buf.outcomes[e] = info["outcome"]
    assert all(oc is not None for oc in buf.outcomes), \
        "horizon must cover the full episode so every env terminates"
    return buf


def _pack_grads(policy, value_net, d_trunk_w, d_trunk_b, d_log_std,
                d_value_w, d_value_b) -> np.ndarray:
    parts = []
    for dw, db in zip(d_trunk_w, d_trunk_b):
        parts.append(dw.ravel())
        parts.append(db.ravel())
    parts.append(d_log_std.ravel())
    for dw, db in zip(d_value_w, d_value_b):
        parts.append(dw.ravel())
        parts.append(db.ravel())
    return np.concatenate(parts)


def loss_and_grad(policy: GaussianPolicy, value_net: ValueNet, batch: dict,
                  hyper: PPOHyperparams):
    """Total clipped loss on one minibatch plus its analytic gradient.

    Returns (loss, flat gradient in pack order, stats dict).  The gradient
    covers [policy trunk, log_std, value trunk] to match pack()/unpack().
    """
    obs = batch["obs"]
    actions = batch["actions"]
    lp_old = batch["log_probs"]
    adv = batch["advantages"]
    rets = batch["returns"]
    n = obs.shape[0]
    eps = hyper.clip_eps

    mu = policy.mean(obs)
    ls = policy.clamped_log_std()
    std = np.exp(ls)
    z = (actions - mu) / std
    lp = -0.5 * (z ** 2 + np.log(2.0 * np.pi)).sum(axis=1) - ls.sum()

    ratio = np.exp(lp - lp_old)
    u1 = ratio * adv
    u2 = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    pg_loss = -np.mean(np.minimum(u1, u2))
    active = u1 <= u2  # unclipped branch (ties inside the clip region included)
    d_lp = -(active * ratio * adv) / n

    v = value_net.forward(obs)
    v_err = v - rets
    v_loss = np.mean(v_err ** 2)
    entropy = policy.entropy()
    loss = pg_loss + hyper.value_coef * v_loss - hyper.entropy_coef * entropy

    # d lp / d mu_j = z_j / std_j ; d lp / d log_std_j = z_j^2 - 1
    d_mu = d_lp[:, None] * (z / std)
    ls_open = (policy.log_std > LOG_STD_MIN) & (policy.log_std < LOG_STD_MAX)
    d_log_std = (d_lp @ (z ** 2 - 1.0) - hyper.entropy_coef) * ls_open
    d_trunk_w, d_trunk_b = policy.trunk.backward(d_mu)
    d_v = (hyper.value_coef * 2.0 / n) * v_err
    d_value_w, d_value_b = value_net.trunk.backward(d_v[:, None])

    grad = _pack_grads(policy, value_net, d_trunk_w, d_trunk_b, d_log_std,
                       d_value_w, d_value_b)
    stats = {
        "policy_loss": float(pg_loss),
        "value_loss": float(v_loss),
        "entropy": float(entropy),
        "approx_kl": float(np.mean(lp_old - lp)),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > eps)),
    }
    return float(loss), grad, stats


@dataclass
class TrainStats:
    loss: float
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float
    grad_norm: float


def normalize_advantages(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    mu = adv.mean()
    sigma = adv.std()
    return (adv - mu) / max(sigma, eps)


def update(policy: GaussianPolicy, value_net: ValueNet, buffer: RolloutBuffer,
           hyper: PPOHyperparams, adam: Adam,
           rng: np.random.Generator) -> TrainStats:
    """Epochs x minibatches of clipped-objective steps on one rollout buffer."""
    boot = np.zeros(buffer.n_envs)  # horizon == full episode; last step terminal
    adv, rets = gae(buffer.rewards, buffer.values, buffer.dones, boot,
                    hyper.gamma, hyper.lam)
    adv = normalize_advantages(adv, hyper.advantage_eps)

    n = buffer.n_envs * buffer.horizon
    flat = {
        "obs": buffer.obs.reshape(n, -1),
        "actions": buffer.actions.reshape(n, -1),
        "log_probs": buffer.log_probs.reshape(n),
        "advantages": adv.reshape(n),
        "returns": rets.reshape(n),
    }
    mb_size = n // hyper.minibatches
    last = None
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        for k in range(hyper.minibatches):
            idx = order[k * mb_size:(k + 1) * mb_size]
            batch = {key: arr[idx] for key, arr in flat.items()}
            loss, grad, stats = loss_and_grad(policy, value_net, batch, hyper)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise NonFiniteLoss(
                    f"non-finite loss/grad at optimizer step {adam.t + 1}: "
                    f"loss={loss!r}")
            grad, norm = clip_global_norm(grad, hyper.grad_clip)
            params = np.concatenate([policy.pack(), value_net.pack()])
            params = adam.step(params, grad)
            n_pol = policy.n_params
            policy.unpack(params[:n_pol])
            value_net.unpack(params[n_pol:])
            last = TrainStats(loss=loss, grad_norm=norm, **stats)
    return last


# --- checkpoints ----------------------------------------------------------------

def save_checkpoint(path: str, policy: GaussianPolicy, value_net: ValueNet,
                    norm: RunningNorm, adam: Adam | None, rng_state: dict,
                    iteration: int, obs_variant: str,
                    hyper: PPOHyperparams) -> None:
    pol = policy.pack().astype("<f4")
    val = value_net.pack().astype("<f4")
    sections = [["policy", pol.size], ["value", val.size]]
    blobs = [pol, val]
    header = {
        "policy_sizes": list(policy.trunk.sizes),
        "value_sizes": list(value_net.trunk.sizes),
        "act_dim": policy.act_dim,
        "obs_dim": policy.obs_dim,
        "obs_variant": obs_variant,
        "normalization": norm.state(),
        "rng_state": rng_state,
        "iteration": int(iteration),
        "hyper": dataclasses.asdict(hyper),
        "adam_t": adam.t if adam is not None else None,
    }
    if adam is not None:
        m = adam.m.astype("<f8")
        v = adam.v.astype("<f8")
        sections += [["adam_m", m.size], ["adam_v", v.size]]
        blobs += [m, v]
    header["sections"] = [[name, size, blob.dtype.str]
                          for (name, size), blob in zip(sections, blobs)]
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write((CKPT_MAGIC + "\n").encode())
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for blob in blobs:
            fh.write(blob.tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> dict:
    with open(path, "rb") as fh:
        magic = fh.readline().decode().rstrip("\n")
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic {magic!r})")
        header = json.loads(fh.readline().decode())
        data = fh.read()
    out = {"header": header}
    offset = 0
    for name, size, dtype in header["sections"]:
        arr = np.frombuffer(data, dtype=np.dtype(dtype), count=size,
                            offset=offset)
        offset += arr.nbytes
        out[name] = arr
    return out


def build_nets(obs_dim: int, hyper: PPOHyperparams, rng: np.random.Generator):
    policy = GaussianPolicy(obs_dim, 16, hyper.hidden, rng,
                            log_std_init=hyper.log_std_init)
    value_net = ValueNet(obs_dim, hyper.hidden, rng)
    return policy, value_net


def restore_nets(ckpt: dict):
    """Rebuild policy/value/norm from a loaded checkpoint dict."""
    h = ckpt["header"]
    rng = np.random.default_rng(0)  # shapes only; weights overwritten below
    policy = GaussianPolicy(h["obs_dim"], h["act_dim"],
                            tuple(h["policy_sizes"][1:-1]), rng)
    value_net = ValueNet(h["obs_dim"], tuple(h["value_sizes"][1:-1]), rng)
    policy.unpack(ckpt["policy"].astype(np.float64))
    value_net.unpack(ckpt["value"].astype(np.float64))
    norm = RunningNorm.from_state(h["normalization"])
    return policy, value_net, norm


# --- the training loop ------------------------------------------------------------

def make_envs(env_cfg: env_mod.EpisodeConfig, n_envs: int):
    train_cfg = replace(env_cfg, early_stop=False)
    return [env_mod.SingulationEnv(train_cfg) for _ in range(n_envs)]


def toy_lift_run_config() -> RunConfig:
    """Learning smoke benchmark: one block, pinch fingers spawned astride it.

    The policy only has to close the pinch and keep it; the scripted wrist
    does the lifting in the final phase.
    """
    from . import baselines
    ctl = baselines.S2SSPController()
    f1, f3 = ctl.config.pinch_fingers
    q = np.zeros(16)
    q[0:4] = ctl.pose_curl_l
    q[8:12] = ctl.pose_curl_r
    q[4 * f1:4 * f1 + 4] = ctl.pose_open[f1]
    q[4 * f3:4 * f3 + 4] = ctl.pose_open[f3]
    env_cfg = replace(env_mod.EpisodeConfig(), n_blocks=1, target_policy=0,
                      init_joints=q)
    return RunConfig(env=env_cfg, iterations=300, checkpoint_every=100,
                     out_dir="artifacts/toy")


def train(run: RunConfig, seed: int, out_dir: str,
          resume_from: str | None = None, log=lambda s: None) -> str:
    """One seed of training.  Writes metrics.jsonl + curve.csv + checkpoints
    under out_dir and returns the final checkpoint path."""
    hyper = run.hyper
    os.makedirs(out_dir, exist_ok=True)
    envs = make_envs(run.env, hyper.n_envs)
    obs_dim = run.env.layout().total_dim

    start_iter = 0
    if resume_from:
        ckpt = load_checkpoint(resume_from)
        if ckpt["header"]["obs_variant"] != run.env.obs_variant:
            raise ValueError(
                f"checkpoint observation variant {ckpt['header']['obs_variant']!r}"
                f" != run config {run.env.obs_variant!r}")
        policy, value_net, norm = restore_nets(ckpt)
        adam = Adam(policy.n_params + value_net.n_params, hyper.learning_rate,
                    hyper.adam_beta1, hyper.adam_beta2, hyper.adam_eps)
        if "adam_m" in ckpt:
            adam.m = ckpt["adam_m"].astype(np.float64).copy()
            adam.v = ckpt["adam_v"].astype(np.float64).copy()
            adam.t = ckpt["header"]["adam_t"]
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt["header"]["rng_state"]
        start_iter = ckpt["header"]["iteration"]
    else:
        root = np.random.SeedSequence(seed)
        net_ss, rng_ss = root.spawn(2)
        policy, value_net = build_nets(obs_dim, hyper,
                                       np.random.default_rng(net_ss))
        norm = RunningNorm(obs_dim)
        adam = Adam(policy.n_params + value_net.n_params, hyper.learning_rate,
                    hyper.adam_beta1, hyper.adam_beta2, hyper.adam_eps)
        rng = np.random.default_rng(rng_ss)

    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    curve_path = os.path.join(out_dir, "curve.csv")
    if start_iter == 0 and not os.path.exists(curve_path):
        with open(curve_path, "w") as fh:
            fh.write("iteration,success_rate_last100,mean_return\n")

    recent = []  # rolling last-100-episode outcomes
    blowups_total = 0
    episodes_total = 0
    final_path = os.path.join(out_dir, "final.ckpt")
    for it in range(start_iter, run.iterations):
        t0 = time.perf_counter()
        seeds = [episode_seed(seed, it, e) for e in range(hyper.n_envs)]
        buf = collect_rollouts(policy, value_net, envs, hyper,
                               norm if hyper.obs_norm else None, rng, seeds)
        stats = update(policy, value_net, buf, hyper, adam, rng)
        if hyper.obs_norm:
            norm.update(buf.raw_obs.reshape(-1, obs_dim))

        recent.extend(1.0 if oc.success else 0.0 for oc in buf.outcomes)
        del recent[:-100]
        blowups_total += sum(1 for oc in buf.outcomes
                             if oc.failure_class == "blowup")
        episodes_total += len(buf.outcomes)
        success_100 = float(np.mean(recent))
        mean_return = float(buf.rewards.sum(axis=1).mean())
        record = {
            "iteration": it + 1,
            "env_steps": (it + 1) * hyper.n_envs * hyper.horizon,
            "mean_return": mean_return,
            "success_rate_last100": success_100,
            "policy_loss": stats.policy_loss,
            "value_loss": stats.value_loss,
            "entropy": stats.entropy,
            "approx_kl": stats.approx_kl,
            "clip_fraction": stats.clip_fraction,
            "grad_norm": stats.grad_norm,
            "blowups_total": blowups_total,
            "episodes_total": episodes_total,
            "wall_s": round(time.perf_counter() - t0, 4),
        }
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps(record) + "\n")
        with open(curve_path, "a") as fh:
            fh.write(f"{it + 1},{success_100},{mean_return}\n")
        log(f"iter {it + 1}/{run.iterations} success100={success_100:.3f} "
            f"return={mean_return:.2f}")

        if (it + 1) % run.checkpoint_every == 0 or it + 1 == run.iterations:
            save_checkpoint(os.path.join(out_dir, f"iter{it + 1:06d}.ckpt"),
                            policy, value_net, norm, adam,
                            rng.bit_generator.state, it + 1,
                            run.env.obs_variant, hyper)
    save_checkpoint(final_path, policy, value_net, norm, adam,
                    rng.bit_generator.state, run.iterations,
                    run.env.obs_variant, hyper)
    return final_path
