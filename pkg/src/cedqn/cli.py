"""``cedqn`` command line: train, eval, compare, inspect."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import nncore
from .agent import load_agent, save_agent
from .config import load_config, resolved_dict, with_task_size
from .errors import CedqnError, CheckpointError, ConfigError, IOFailure
from .training import (ComparisonMatrix, RunConfig, Team, evaluate_completion_time, fmt,
                       run_comparison, train_team)

log = logging.getLogger("cedqn")

COMPLETION_COLUMNS = ("algo", "team_id", "task_size", "seed", "trial", "completion_steps",
                      "timeout")


def _write_json(path, data):
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _out_dir(args):
    out = args.out or os.environ.get("CEDQN_OUT") or "cedqn_out"
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create output directory {path}: {exc}") from None
    return path


def _overrides(args):
    return {"seed": args.seed, "algo": args.algo, "team": args.team,
            "task_size": args.task_size, "episodes": args.episodes}


def _load_run_config(args):
    cfg = load_config(args.config, _overrides(args))
    if isinstance(cfg, ComparisonMatrix):
        raise ConfigError(f"{args.config} holds a comparison matrix; use 'cedqn compare'")
    return cfg


def save_team(team, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    robots = [save_agent(a, directory).name for a in team]
    _write_json(directory / "team.json", {"run": team.config.to_dict(), "robots": robots,
                                          "env_steps": team.env_steps})


def load_team(config, directory):
    directory = Path(directory)
    manifest = directory / "team.json"
    if not manifest.is_file():
        raise CheckpointError(f"missing checkpoints: {manifest} not found", kind="missing")
    try:
        robots = json.loads(manifest.read_text())["robots"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed team manifest {manifest}: {exc}") from None
    agents = [load_agent(directory / name) for name in robots]
    if len(agents) != config.env.num_robots:
        raise CheckpointError(f"checkpoint holds {len(agents)} robots, config needs "
                              f"{config.env.num_robots}", kind="shape")
    if any(a.comm_enabled != config.comm_enabled for a in agents):
        raise ConfigError(f"checkpoints in {directory} were not trained with algo={config.algo}")
    return Team(config, agents)


def cmd_train(args):
    config = _load_run_config(args)
    out = _out_dir(args)
    _write_json(out / "resolved_config.json", resolved_dict(config))

    def progress(stats):
        if (stats.episode + 1) % 100 == 0:
            log.info("episode %d  team_reward %.3f  boxes %d  steps %d", stats.episode + 1,
                     stats.team_reward, stats.boxes_lifted, stats.steps)

    team, mlog = train_team(config, progress)
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        mlog.to_csv(fh)
    save_team(team, out / "checkpoints")
    print(f"wrote {out / 'metrics.csv'} ({len(mlog.episodes)} episodes)")
    return 0


def cmd_eval(args):
    config = _load_run_config(args)
    out = _out_dir(args)
    ckpt = Path(args.checkpoints) if args.checkpoints else out / "checkpoints"
    team = load_team(config, ckpt)
    _write_json(out / "resolved_eval_config.json", resolved_dict(config))
    result = evaluate_completion_time(team, config.env, config.eval_trials, config.seed)
    with open(out / "completion.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COMPLETION_COLUMNS)
        for k, (steps, timeout) in enumerate(zip(result.steps, result.timeouts)):
            writer.writerow([config.algo, config.team_id, config.env.task_size, config.seed, k,
                             steps, int(timeout)])
    print(f"mean_completion_steps={fmt(result.mean_steps)} "
          f"timeout_fraction={fmt(result.timeout_fraction)}")
    return 0


def cmd_compare(args):
    matrix = load_config(args.config, _overrides(args))
    if isinstance(matrix, RunConfig):
        matrix = ComparisonMatrix(base=matrix)
    out = _out_dir(args)
    _write_json(out / "resolved_config.json", resolved_dict(matrix))
    jobs = args.jobs or os.cpu_count() or 1
    table = run_comparison(matrix, jobs=jobs, checkpoint_root=str(out / "cells"))
    for (algo, team_id, seed), mlog in table.logs.items():
        cell = out / "cells" / f"{algo}-team{team_id}-s{seed}"
        cell.mkdir(parents=True, exist_ok=True)
        with open(cell / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
            mlog.to_csv(fh)
    with open(out / "comparison.csv", "w", newline="", encoding="utf-8") as fh:
        table.to_csv(fh)
    failed = sum(r.error is not None for r in table.rows)
    print(f"wrote {out / 'comparison.csv'} ({len(table.rows)} rows, {failed} failed)")
    return 0


def _describe_net(name, net):
    norms = [float(np.linalg.norm(w)) for w in net.weights]
    return (f"  {name}: layers={list(net.layer_sizes)} hidden={net.hidden_activation} "
            f"output={net.output_activation} params={net.params.size} "
            f"weight_norms=[{', '.join(fmt(n) for n in norms)}]")


def cmd_inspect(args):
    path = Path(args.path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint {path}", kind="missing")
    if path.is_dir():
        manifests = sorted(p for p in path.glob("robot*.json"))
        if not manifests:
            raise CheckpointError(f"no agent manifests in {path}", kind="missing")
        for m in manifests:
            agent = load_agent(m)
            print(f"robot {agent.robot_id}: comm_enabled={agent.comm_enabled} "
                  f"train_step={agent.train_steps}")
            for name, net in agent.networks().items():
                print(_describe_net(name, net))
    elif path.suffix == ".json":
        agent = load_agent(path)
        print(f"robot {agent.robot_id}: comm_enabled={agent.comm_enabled} "
              f"train_step={agent.train_steps}")
        for name, net in agent.networks().items():
            print(_describe_net(name, net))
    else:
        print(_describe_net(path.name, nncore.load_mlp(path)))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="cedqn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, jobs=False):
        p.add_argument("--config", required=True, metavar="PATH")
        p.add_argument("--out", metavar="DIR", help="output directory (default: $CEDQN_OUT)")
        p.add_argument("--seed", type=int)
        p.add_argument("--algo", choices=("dqn", "cedqn"))
        p.add_argument("--team", type=int, choices=(1, 2, 3, 4))
        p.add_argument("--task-size", type=int, dest="task_size")
        p.add_argument("--episodes", type=int)
        if jobs:
            p.add_argument("--jobs", type=int, help="worker processes (default: CPU count)")

    common(sub.add_parser("train", help="train a team, write metrics.csv and checkpoints"))
    p = sub.add_parser("eval", help="completion time of trained checkpoints")
    common(p)
    p.add_argument("--checkpoints", metavar="DIR", help="default: OUT/checkpoints")
    common(sub.add_parser("compare", help="algos x teams x task sizes x seeds"), jobs=True)
    p = sub.add_parser("inspect", help="summarise a checkpoint file or directory")
    p.add_argument("path")
    return parser


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "compare": cmd_compare,
            "inspect": cmd_inspect}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CedqnError as exc:
        kind = getattr(exc, "kind", type(exc).__name__)
        msg = str(exc).replace("\n", " ")
        print(f"error[{exc.exit_code}] {kind}: {msg}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error[3] io: {exc}".replace("\n", " "), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
