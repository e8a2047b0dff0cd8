"""Long-running trend experiments, cached on disk.

A cell is one (algo, team, seed) training run followed by completion-time
evaluation at several task sizes.  Results are stored under a key made from
the run config digest and a hash of the numeric source code (docstrings and
comments excluded), so editing the engine invalidates stale results while
documentation edits do not.

    python -m cedqn.experiments --cache DIR [--algos dqn cedqn] [--seeds 0 1 2 3 4]
"""

from __future__ import annotations

import argparse
import ast
import hashlib
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import agent, comms, gridworld, nncore, rng, training
from .training import (RunConfig, TeamSpec, env_for_team, evaluate_completion_time, fmt,
                       moving_average, train_team)

log = logging.getLogger(__name__)

ENGINE_MODULES = (nncore, gridworld, comms, agent, training, rng)
TREND_TEAM = 4
TREND_TASK_SIZE = 20
TREND_EPISODES = 3000
TREND_SEEDS = (0, 1, 2, 3, 4)
EVAL_TASK_SIZES = (20, 40, 60, 80, 100)
EVAL_TRIALS = 10
FINAL_WINDOW = 300


def _strip_docstrings(tree):
    for node in ast.walk(tree):
        body = getattr(node, "body", None)
        if (isinstance(body, list) and body and isinstance(body[0], ast.Expr)
                and isinstance(body[0].value, ast.Constant)
                and isinstance(body[0].value.value, str)):
            node.body = body[1:] or [ast.Pass()]
    return tree


def engine_hash():
    """Hash of the engine's code, insensitive to docstrings, comments and layout."""
    h = hashlib.sha256()
    for module in ENGINE_MODULES:
        source = Path(module.__file__).read_text()
        h.update(ast.dump(_strip_docstrings(ast.parse(source))).encode())
    return h.hexdigest()[:12]


def trend_config(algo, seed, team=TREND_TEAM, episodes=TREND_EPISODES):
    return RunConfig(algo=algo, team=TeamSpec.from_id(team),
                     env=replace(gridworld.EnvConfig(), task_size=TREND_TASK_SIZE),
                     episodes=episodes, seed=seed)


def cell_dir(cache, config):
    return Path(cache) / f"{config.run_id}-{config.digest()}-{engine_hash()}"


def run_cell(config, cache, task_sizes=EVAL_TASK_SIZES, trials=EVAL_TRIALS):
    """Train and evaluate one cell unless a cached result exists; returns the summary dict."""
    out = cell_dir(cache, config)
    summary_path = out / "summary.json"
    if summary_path.is_file():
        return json.loads(summary_path.read_text())
    out.mkdir(parents=True, exist_ok=True)
    log.info("training %s (%d episodes)", config.run_id, config.episodes)
    start = time.perf_counter()
    team, mlog = train_team(config)
    train_seconds = time.perf_counter() - start
    (out / "metrics.csv").write_text(mlog.to_csv())
    for a in team:
        agent.save_agent(a, out / "checkpoints")

    completion = {}
    for size in task_sizes:
        env = env_for_team(config.env, config.team, size)
        res = evaluate_completion_time(team, env, trials,
                                       rng.derived_int(config.seed, "eval", size))
        completion[str(size)] = {"steps": res.steps, "timeouts": res.timeouts,
                                 "mean_steps": res.mean_steps,
                                 "timeout_fraction": res.timeout_fraction}
    rewards = mlog.team_rewards()
    summary = {
        "run_id": config.run_id,
        "config": config.to_dict(),
        "engine_hash": engine_hash(),
        "train_seconds": train_seconds,
        "episodes": len(rewards),
        "team_rewards": rewards.tolist(),
        "completion": completion,
    }
    tmp = summary_path.with_suffix(".tmp")
    tmp.write_text(json.dumps(summary))
    tmp.replace(summary_path)
    return summary


def window_scores(rewards, window=FINAL_WINDOW):
    """Mean of the smoothed team reward over the first and the last ``window`` episodes."""
    ma = moving_average(rewards)
    return float(np.mean(ma[:window])), float(np.mean(ma[-window:]))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--cache", required=True)
    p.add_argument("--algos", nargs="+", default=list(training.ALGOS))
    p.add_argument("--seeds", nargs="+", type=int, default=list(TREND_SEEDS))
    p.add_argument("--team", type=int, default=TREND_TEAM)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for seed in args.seeds:
        for algo in args.algos:
            s = run_cell(trend_config(algo, seed, args.team), args.cache)
            first, last = window_scores(s["team_rewards"])
            print(f"{s['run_id']}: train {s['train_seconds']:.0f}s first {fmt(first)} "
                  f"last {fmt(last)} completion@100 "
                  f"{fmt(s['completion'][str(EVAL_TASK_SIZES[-1])]['mean_steps'])}", flush=True)


if __name__ == "__main__":
    main()
