"""Command-line entry points: train, eval, sweep, baseline, replay.

Config resolution is layered: built-in defaults, then the --config file,
then explicit flags.  Every run writes the fully resolved config next to its
outputs so the exact run can be reproduced from the snapshot alone.

Exit codes: 0 success, 1 runtime failure (diverged training, a blowup
epidemic, replay mismatches), 2 usage or config errors.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from . import baselines, evaluate, ppo, trajlog
from . import config as config_mod
from .config import ConfigError, RunConfig, replace_env, replace_run

BLOWUP_EPIDEMIC = 0.01  # tolerated fraction of episodes lost to instability


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="run config file (JSON); flags override it")
    common.add_argument("--seed", metavar="N", type=int, action="append",
                        help="run seed; repeat the flag for several")
    common.add_argument("--n-blocks", metavar="N", type=int)
    common.add_argument("--variant", choices=("normal", "constrained"),
                        help="layout variant")
    common.add_argument("--ablation", metavar="NAME",
                        help=f"one of {sorted(baselines.ABLATIONS)}")
    common.add_argument("--checkpoint", metavar="PATH")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--episodes", metavar="N", type=int)
    common.add_argument("--deterministic-eval", metavar="BOOL",
                        type=_parse_bool, dest="deterministic_eval")
    common.add_argument("--ema", metavar="BOOL", type=_parse_bool)

    p = argparse.ArgumentParser(
        prog="sope",
        description="Train, evaluate, and inspect block-singulation policies.")
    sub = p.add_subparsers(dest="cmd", required=True)
    sub.add_parser("train", parents=[common],
                   help="PPO training, one output directory per seed")
    sub.add_parser("eval", parents=[common],
                   help="deterministic evaluation of a checkpoint")
    sub.add_parser("sweep", parents=[common],
                   help="zero-shot block-count sweep of a checkpoint")
    sub.add_parser("baseline", parents=[common],
                   help="scripted swipe-and-pinch trials with trajectory logs")
    rp = sub.add_parser("replay", help="verify and dump a trajectory log")
    rp.add_argument("trajectory", metavar="PATH")
    return p


def resolve_run(args, mode: str) -> RunConfig:
    """defaults -> config file -> flags, in increasing precedence."""
    if args.config:
        run = config_mod.load_run_config(args.config)
        run = replace_run(run, mode=mode)
    else:
        run = RunConfig(mode=mode)

    run_fields = {}
    if args.seed:
        run_fields["seeds"] = tuple(args.seed)
    elif mode == "sweep" and not args.config:
        run_fields["seeds"] = (0, 1, 2, 3, 4)  # the training seeds
    if args.checkpoint is not None:
        run_fields["checkpoint"] = args.checkpoint
    if args.out is not None:
        run_fields["out_dir"] = args.out
    if args.episodes is not None:
        run_fields["episodes"] = args.episodes
    if args.deterministic_eval is not None:
        run_fields["deterministic_eval"] = args.deterministic_eval
    if args.ema is not None:
        run_fields["eval_ema"] = args.ema
    if run_fields:
        run = replace_run(run, **run_fields)

    env_fields = {}
    if args.n_blocks is not None:
        if args.n_blocks < 1:
            raise ConfigError("--n-blocks must be >= 1")
        env_fields["n_blocks"] = args.n_blocks
    if args.variant is not None:
        env_fields["variant"] = args.variant
    if env_fields:
        run = replace_run(run, env=replace_env(run.env, **env_fields))

    ablation = args.ablation if args.ablation is not None else run.ablation
    if ablation is not None:
        run = baselines.ablation_run_config(ablation, base=run)
    return run


def write_snapshot(run: RunConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    config_mod.save_run_config(run, os.path.join(out_dir,
                                                 "resolved_config.json"))


def _write_metrics(rec: evaluate.MetricsRecord, out_dir: str,
                   name: str = "metrics.json") -> None:
    with open(os.path.join(out_dir, name), "w") as fh:
        json.dump(rec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _epidemic(rec: evaluate.MetricsRecord) -> bool:
    return (rec.failure_classes.get("blowup", 0)
            > BLOWUP_EPIDEMIC * rec.episodes)


def cmd_train(args) -> int:
    run = resolve_run(args, "train")
    write_snapshot(run, run.out_dir)
    for seed in run.seeds:
        seed_dir = os.path.join(run.out_dir, f"seed{seed}")
        print(f"training seed {seed} -> {seed_dir}")
        try:
            ppo.train(run, seed, seed_dir, resume_from=run.checkpoint,
                      log=print)
        except ppo.NonFiniteLoss as exc:
            print(f"error: seed {seed} diverged: {exc}", file=sys.stderr)
            return 1
        last = None
        with open(os.path.join(seed_dir, "metrics.jsonl")) as fh:
            for line in fh:
                last = line
        if last:
            rec = json.loads(last)
            if rec["blowups_total"] > BLOWUP_EPIDEMIC * rec["episodes_total"]:
                print(f"error: seed {seed}: {rec['blowups_total']} of "
                      f"{rec['episodes_total']} episodes blew up",
                      file=sys.stderr)
                return 1
    return 0


def cmd_eval(args) -> int:
    run = resolve_run(args, "eval")
    if not run.checkpoint:
        print("error: eval needs --checkpoint (or one in the config file)",
              file=sys.stderr)
        return 2
    agent_factory = lambda: evaluate.PolicyAgent.from_checkpoint(
        run.checkpoint, run.env, deterministic=run.deterministic_eval)
    agent_factory()  # fail fast on a bad checkpoint before touching out_dir
    write_snapshot(run, run.out_dir)
    rec = evaluate.evaluate(agent_factory, run.env, run.episodes,
                            seed=run.seeds[0], ema=run.eval_ema)
    _write_metrics(rec, run.out_dir)
    print(f"success rate {rec.success_rate:.3f} over {rec.episodes} episodes"
          f" ({run.env.n_blocks} blocks, {run.env.variant})")
    if _epidemic(rec):
        print(f"error: {rec.failure_classes.get('blowup', 0)} of "
              f"{rec.episodes} episodes blew up", file=sys.stderr)
        return 1
    return 0


def cmd_sweep(args) -> int:
    run = resolve_run(args, "sweep")
    if not run.checkpoint:
        print("error: sweep needs --checkpoint (or one in the config file)",
              file=sys.stderr)
        return 2
    write_snapshot(run, run.out_dir)
    results = evaluate.generalization_sweep(
        run.checkpoint, run.seeds, env_cfg=run.env, episodes=run.episodes,
        ema=run.eval_ema)
    table = evaluate.sweep_table(results, method=run.ablation or "ours")
    path = os.path.join(run.out_dir, "sweep.csv")
    with open(path, "w") as fh:
        fh.write(table)
    print(table, end="")
    print(f"wrote {path}")
    return 0


def cmd_baseline(args) -> int:
    run = resolve_run(args, "baseline")
    write_snapshot(run, run.out_dir)
    traj_dir = os.path.join(run.out_dir, "trajectories")
    rec = evaluate.evaluate(lambda: evaluate.ScriptedAgent(), run.env,
                            run.episodes, seed=run.seeds[0],
                            ema=run.eval_ema, traj_dir=traj_dir)
    _write_metrics(rec, run.out_dir)
    print(f"scripted baseline: {rec.successes}/{rec.episodes} "
          f"({run.env.n_blocks} blocks, {run.env.variant})")
    if _epidemic(rec):
        return 1
    return 0


def cmd_replay(args) -> int:
    report = trajlog.replay_verify(args.trajectory, out=sys.stdout)
    if not report.ok:
        print(f"error: {len(report.mismatches)} reward mismatches "
              f"(first at step {report.mismatches[0][0]})", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles usage errors (exit code 2)
        return int(exc.code or 0)
    try:
        evaluate.worker_count()  # validate SOPE_THREADS up front
        handler = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
                   "baseline": cmd_baseline, "replay": cmd_replay}[args.cmd]
        return handler(args)
    except (ConfigError, evaluate.CheckpointMismatch, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
