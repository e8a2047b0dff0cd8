"""Episode loop, training runs, completion-time evaluation, comparison grid."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .agent import AgentGroup, CommTrace, DqnAgent, HyperParams, epsilon_at
from .comms import MSG_DIM, Message, MessageBus
from .errors import CedqnError, ConfigError
from .gridworld import (DISTURBANCE_CAPACITY, STANDARD_CAPACITY, EnvConfig,
                        default_max_steps, reset)
from .rng import derived_int

log = logging.getLogger(__name__)

ALGOS = ("dqn", "cedqn")
TEAMS = {1: (6, 0), 2: (5, 1), 3: (4, 2), 4: (3, 3)}
SMOOTHING_WINDOW = 100

METRICS_COLUMNS = ("run_id", "algo", "team_id", "task_size", "seed", "episode", "steps",
                   "boxes_lifted", "team_reward", "discounted_return", "mean_q_loss",
                   "mean_comm_loss", "messages_sent", "gate_rate")
COMPARISON_COLUMNS = ("algo", "team_id", "task_size", "seed", "mean_completion_steps",
                      "timeout_fraction", "final_reward_ma")


def fmt(x):
    """6 significant digits; integers stay integers."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, str):
        return x
    return f"{float(x):.6g}"


@dataclass(frozen=True)
class TeamSpec:
    team_id: int
    standard_count: int
    disturbance_count: int

    @classmethod
    def from_id(cls, team_id):
        if team_id not in TEAMS:
            raise ConfigError(f"team must be one of {sorted(TEAMS)}, got {team_id!r}")
        return cls(team_id, *TEAMS[team_id])

    @classmethod
    def from_counts(cls, standard, disturbance):
        for tid, counts in TEAMS.items():
            if counts == (standard, disturbance):
                return cls(tid, standard, disturbance)
        raise ConfigError(f"team composition standard={standard}, disturbance={disturbance} "
                          f"is not one of the four defined teams {list(TEAMS.values())}")

    @property
    def size(self):
        return self.standard_count + self.disturbance_count

    def capacities(self):
        return ((STANDARD_CAPACITY,) * self.standard_count
                + (DISTURBANCE_CAPACITY,) * self.disturbance_count)


def env_for_team(env, team, task_size=None):
    """Copy of ``env`` with the team's capacities and (optionally) a new task size.

    The step limit is recomputed from the default rule unless it was set explicitly.
    """
    task_size = env.task_size if task_size is None else task_size
    explicit = env.max_steps_per_episode != default_max_steps(env.task_size, env.num_robots)
    steps = env.max_steps_per_episode if explicit else None
    return replace(env, capacities=team.capacities(), task_size=task_size,
                   max_steps_per_episode=steps)


@dataclass(frozen=True)
class RunConfig:
    algo: str = "cedqn"
    team: TeamSpec | None = TeamSpec(1, 6, 0)
    env: EnvConfig = EnvConfig()
    hyper: HyperParams = HyperParams()
    episodes: int = 3000
    seed: int = 0
    eval_epsilon: float = 0.05
    eval_trials: int = 10

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ConfigError(f"algo must be one of {ALGOS}, got {self.algo!r}")
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if not 0.0 <= self.eval_epsilon <= 1.0:
            raise ConfigError("eval_epsilon must be in [0, 1]")
        if self.team is not None and self.env.capacities != self.team.capacities():
            object.__setattr__(self, "env", env_for_team(self.env, self.team))

    @property
    def comm_enabled(self):
        return self.algo == "cedqn"

    @property
    def team_id(self):
        return 0 if self.team is None else self.team.team_id

    def to_dict(self):
        return {"algo": self.algo, "team": None if self.team is None else asdict(self.team), "env": asdict(self.env),
                "hyper": asdict(self.hyper), "episodes": self.episodes, "seed": self.seed,
                "eval_epsilon": self.eval_epsilon, "eval_trials": self.eval_trials}

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @property
    def run_id(self):
        return f"{self.algo}-team{self.team_id}-n{self.env.task_size}-s{self.seed}"


@dataclass
class EpisodeStats:
    episode: int
    robot_rewards: list
    team_reward: float
    discounted_return: float
    steps: int
    boxes_lifted: int
    messages_sent: int
    gate_decisions: int
    mean_q_loss: float
    mean_comm_loss: float
    done_reason: str

    @property
    def gate_rate(self):
        return self.messages_sent / self.gate_decisions if self.gate_decisions else 0.0


@dataclass
class MetricsLog:
    run_id: str
    algo: str
    team_id: int
    task_size: int
    seed: int
    config_hash: str
    episodes: list = field(default_factory=list)

    def team_rewards(self):
        return np.array([e.team_reward for e in self.episodes])

    def rows(self):
        for e in self.episodes:
            yield (self.run_id, self.algo, self.team_id, self.task_size, self.seed, e.episode,
                   e.steps, e.boxes_lifted, e.team_reward, e.discounted_return, e.mean_q_loss,
                   e.mean_comm_loss, e.messages_sent, e.gate_rate)

    def to_csv(self, fh=None):
        """Write to ``fh`` (or return a string) with the fixed metrics header."""
        buf = io.StringIO() if fh is None else fh
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for row in self.rows():
            writer.writerow([fmt(v) for v in row])
        return buf.getvalue() if fh is None else None


def discounted_return(rewards, gamma):
    if not 0.0 <= gamma < 1.0:
        raise ConfigError(f"gamma must satisfy 0 <= gamma < 1, got {gamma}")
    total, weight = 0.0, 1.0
    for r in rewards:
        total += weight * r
        weight *= gamma
    return total


def moving_average(values, window=SMOOTHING_WINDOW):
    """Trailing mean; the first ``window - 1`` points average what is available."""
    x = np.asarray(values, dtype=np.float64)
    c = np.concatenate(([0.0], np.cumsum(x)))
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


class Team:
    """The agents of one run, their shared message bus, and the global step count."""

    def __init__(self, config, agents=None):
        self.config = config
        if agents is None:
            agents = [DqnAgent(i, config.hyper, config.comm_enabled,
                               derived_int(config.seed, "robot", i))
                      for i in range(config.env.num_robots)]
        self.agents = list(agents)
        self.group = AgentGroup(self.agents)
        self.bus = MessageBus()
        self.env_steps = 0

    @property
    def comm_enabled(self):
        return self.config.comm_enabled

    def __iter__(self):
        return iter(self.agents)

    def __len__(self):
        return len(self.agents)


def _augmented_states(team, observations, traces, record):
    """Gate phase (CE agents broadcast), then each agent fuses what it received.

    Returns the ``(k, 15)`` augmented states and the number of messages sent.
    """
    obs = np.asarray(observations)
    k = len(obs)
    if not team.comm_enabled:
        return np.hstack((obs, np.zeros((k, MSG_DIM)))), 0
    bus = team.bus
    bus.flush()
    probs, sends = team.group.gate(obs)
    for i in range(k):
        if record:
            traces[i].record(obs[i], float(probs[i]), bool(sends[i]))
        if sends[i]:
            bus.broadcast(Message.from_observation(i, obs[i]))
    received, _ = bus.collect_all(k)
    sent = len(bus)
    bus.flush()
    return np.hstack((obs, received)), sent


def run_episode(team, env_config, mode="train", seed=0, episode=0, eval_epsilon=0.05):
    """Play one episode; in ``train`` mode also store, learn and update the gates."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if len(team) != env_config.num_robots:
        raise CedqnError("team size does not match env robot count")
    train = mode == "train"
    hyper = team.config.hyper
    schedule = hyper.epsilon_schedule
    eval_rng = None if train else np.random.default_rng(derived_int(seed, "eval"))

    world, observations = reset(env_config, seed=seed)
    traces = [CommTrace() for _ in team]
    states, messages = _augmented_states(team, observations, traces, record=True)
    gate_decisions = len(team) if team.comm_enabled else 0
    robot_rewards = np.zeros(len(team))
    team_rewards = []
    q_losses = []

    while True:
        if train:
            actions = team.group.act(states, epsilon_at(schedule, team.env_steps))
        else:
            actions = team.group.act(states, eval_epsilon, [eval_rng] * len(team))
        outcome = world.step(actions)
        rewards = outcome.rewards
        robot_rewards += rewards
        team_rewards.append(sum(rewards))
        for i, r in enumerate(rewards):
            traces[i].rewards.append(r)

        more = not outcome.done
        next_states, sent = _augmented_states(team, outcome.observations, traces, record=more)
        if more and team.comm_enabled:
            messages += sent
            gate_decisions += len(team)

        if train:
            team.env_steps += 1
            # a step-limit cut is not a terminal state, so it still bootstraps
            terminal = outcome.done_reason == "main_task_complete"
            team.group.store(states, actions, rewards, next_states, terminal)
            losses = team.group.train()
            if losses is not None:
                q_losses.extend(losses)
        states = next_states
        if outcome.done:
            break

    comm_losses = []
    if train and team.comm_enabled:
        comm_losses = [a.update_comm_policy(traces[a.robot_id]) for a in team]
    team.bus.flush()

    return EpisodeStats(
        episode=episode,
        robot_rewards=robot_rewards.tolist(),
        team_reward=float(sum(team_rewards)),
        discounted_return=discounted_return(team_rewards, hyper.gamma),
        steps=world.step_count,
        boxes_lifted=world.boxes_lifted,
        messages_sent=messages,
        gate_decisions=gate_decisions,
        mean_q_loss=float(np.mean(q_losses)) if q_losses else 0.0,
        mean_comm_loss=float(np.mean(comm_losses)) if comm_losses else 0.0,
        done_reason=outcome.done_reason,
    )


def train_team(config, progress=None):
    """Train a fresh team; returns ``(team, MetricsLog)``."""
    team = Team(config)
    mlog = MetricsLog(config.run_id, config.algo, config.team_id, config.env.task_size,
                      config.seed, config.digest())
    for k in range(config.episodes):
        stats = run_episode(team, config.env, "train", derived_int(config.seed, "env", k), k)
        mlog.episodes.append(stats)
        if progress is not None:
            progress(stats)
    return team, mlog


def train_run(config, progress=None):
    return train_team(config, progress)[1]


@dataclass
class CompletionResult:
    task_size: int
    steps: list
    timeouts: list

    @property
    def mean_steps(self):
        return float(np.mean(self.steps))

    @property
    def timeout_fraction(self):
        return float(np.mean(self.timeouts))


def evaluate_completion_time(team, env_config, trials, seed, eval_epsilon=None):
    """Frozen-policy episodes on fresh layouts; a timeout counts as ``max_steps``."""
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    eps = team.config.eval_epsilon if eval_epsilon is None else eval_epsilon
    steps, timeouts = [], []
    for k in range(trials):
        s = run_episode(team, env_config, "eval", derived_int(seed, "eval", k), k, eps)
        finished = s.done_reason == "main_task_complete"
        steps.append(s.steps if finished else env_config.max_steps_per_episode)
        timeouts.append(not finished)
    return CompletionResult(env_config.task_size, steps, timeouts)


# -- comparison grid ----------------------------------------------------------------

@dataclass(frozen=True)
class ComparisonMatrix:
    """Cells are (algo, team, task_size, seed).  One team is trained per
    (algo, team, seed) on ``base.env.task_size`` and evaluated at every task size."""

    base: RunConfig
    algos: tuple = ALGOS
    teams: tuple = (1, 2, 3, 4)
    task_sizes: tuple = (20, 40, 60, 80, 100)
    seeds: tuple = (0, 1, 2, 3, 4)
    trials: int = 10

    def __post_init__(self):
        if not (self.algos and self.teams and self.task_sizes and self.seeds):
            raise ConfigError("comparison matrix must be non-empty in every dimension")
        for t in self.teams:
            TeamSpec.from_id(t)
        for a in self.algos:
            if a not in ALGOS:
                raise ConfigError(f"unknown algo {a!r}")

    def groups(self):
        return [(a, t, s) for a in self.algos for t in self.teams for s in self.seeds]

    def run_config(self, algo, team_id, seed):
        return replace(self.base, algo=algo, team=TeamSpec.from_id(team_id), seed=seed)


@dataclass
class ComparisonRow:
    algo: str
    team_id: int
    task_size: int
    seed: int
    mean_completion_steps: float | None
    timeout_fraction: float | None
    final_reward_ma: float | None
    error: str | None = None

    @property
    def key(self):
        return (self.algo, self.team_id, self.task_size, self.seed)

    def values(self):
        if self.error is not None:
            return [self.algo, self.team_id, self.task_size, self.seed, "error", "error", "error"]
        return [self.algo, self.team_id, self.task_size, self.seed, self.mean_completion_steps,
                self.timeout_fraction, self.final_reward_ma]


@dataclass
class ComparisonTable:
    rows: list
    logs: dict = field(default_factory=dict)

    def to_csv(self, fh=None):
        buf = io.StringIO() if fh is None else fh
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COMPARISON_COLUMNS)
        for row in sorted(self.rows, key=lambda r: r.key):
            writer.writerow([fmt(v) for v in row.values()])
        return buf.getvalue() if fh is None else None


def run_group(matrix, algo, team_id, seed, checkpoint_dir=None):
    """Train one team and evaluate it at every task size of the matrix."""
    config = matrix.run_config(algo, team_id, seed)
    try:
        team, mlog = train_team(config)
        if checkpoint_dir is not None:
            from .agent import save_agent
            for agent in team:
                save_agent(agent, checkpoint_dir)
        final_ma = float(moving_average(mlog.team_rewards())[-1])
        rows = []
        for size in matrix.task_sizes:
            env = env_for_team(config.env, config.team, size)
            res = evaluate_completion_time(team, env, matrix.trials,
                                           derived_int(seed, "eval", size))
            rows.append(ComparisonRow(algo, team_id, size, seed, res.mean_steps,
                                      res.timeout_fraction, final_ma))
        return rows, mlog
    except CedqnError as exc:
        log.warning("cell %s/team%s/seed%s failed: %s", algo, team_id, seed, exc)
        return [ComparisonRow(algo, team_id, size, seed, None, None, None, str(exc))
                for size in matrix.task_sizes], None


def run_comparison(matrix, jobs=1, checkpoint_root=None):
    groups = matrix.groups()

    def ckpt(g):
        if checkpoint_root is None:
            return None
        a, t, s = g
        return f"{checkpoint_root}/{a}-team{t}-s{s}"

    if jobs > 1 and len(groups) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_group, [matrix] * len(groups), *zip(*groups),
                                    [ckpt(g) for g in groups]))
    else:
        results = [run_group(matrix, *g, ckpt(g)) for g in groups]
    table = ComparisonTable([])
    for g, (rows, mlog) in zip(groups, results):
        table.rows.extend(rows)
        if mlog is not None:
            table.logs[g] = mlog
    table.rows.sort(key=lambda r: r.key)
    return table
