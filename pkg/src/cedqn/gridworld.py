"""Box-lifting grid world: N robots with load capacities, weighted crates.

Coordinates are ``(x, y)`` with ``x`` growing east and ``y`` growing north.
Several robots may share a cell (joint lifts need it); crates never do.
A lift succeeds when the robots choosing ``LIFT`` on a crate's cell have a
combined capacity of at least the crate's weight.  Lifting is instantaneous:
the crate disappears and, while fewer than ``task_size`` crates have been
spawned, a replacement appears on a random free cell.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EnvError

STANDARD_CAPACITY = 3.0
DISTURBANCE_CAPACITY = 0.0
OBS_DIM = 9


class Action(enum.IntEnum):
    MOVE_NORTH = 0
    MOVE_SOUTH = 1
    MOVE_EAST = 2
    MOVE_WEST = 3
    LIFT = 4
    STAY = 5


N_ACTIONS = len(Action)
_MOVES = {
    Action.MOVE_NORTH: (0, 1),
    Action.MOVE_SOUTH: (0, -1),
    Action.MOVE_EAST: (1, 0),
    Action.MOVE_WEST: (-1, 0),
}


def default_max_steps(task_size, num_robots):
    return max(200, (40 * task_size) // num_robots)


@dataclass(frozen=True)
class EnvConfig:
    capacities: tuple = (STANDARD_CAPACITY,) * 6
    task_size: int = 20
    grid_width: int = 10
    grid_height: int = 10
    max_active_boxes: int = 5
    box_weight_range: tuple = (2.0, 5.0)
    max_steps_per_episode: int | None = None
    step_penalty: float = -0.01
    lift_reward: float = 1.0
    main_task_bonus: float = 10.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "capacities", tuple(float(c) for c in self.capacities))
        object.__setattr__(self, "box_weight_range", tuple(float(w) for w in self.box_weight_range))
        if self.max_steps_per_episode is None:
            object.__setattr__(self, "max_steps_per_episode",
                               default_max_steps(self.task_size, max(1, self.num_robots)))
        self.validate()

    @property
    def num_robots(self):
        return len(self.capacities)

    @property
    def n_cells(self):
        return self.grid_width * self.grid_height

    def validate(self):
        lo, hi = self.box_weight_range
        problems = []
        if self.grid_width < 1 or self.grid_height < 1:
            problems.append("grid dimensions must be positive")
        if self.num_robots < 1:
            problems.append("need at least one robot")
        if any(c < 0 for c in self.capacities):
            problems.append("capacities must be non-negative")
        if self.task_size < 1:
            problems.append("task_size must be >= 1")
        if self.max_active_boxes < 1:
            problems.append("max_active_boxes must be >= 1")
        if self.max_active_boxes > self.n_cells - self.num_robots:
            problems.append("max_active_boxes exceeds free cells")
        if not 0 < lo <= hi:
            problems.append(f"bad box_weight_range {self.box_weight_range}")
        if self.max_steps_per_episode < 1:
            problems.append("max_steps_per_episode must be >= 1")
        if problems:
            raise EnvError("invalid EnvConfig: " + "; ".join(problems))

    def with_seed(self, seed):
        return replace(self, seed=seed)


@dataclass
class Robot:
    id: int
    position: tuple
    capacity: float
    is_disturbance: bool = False
    lifting: bool = False


@dataclass
class Crate:
    id: int
    position: tuple
    weight: float
    lifted: bool = False


@dataclass
class StepOutcome:
    rewards: list
    observations: list
    subtasks_completed: int
    done: bool
    done_reason: str | None
    lifted_by: list = field(default_factory=list)


class GridWorld:
    """Global state plus the transition function.  Build with :func:`reset`."""

    def __init__(self, config, rng):
        self.config = config
        self.rng = rng
        self.robots: list[Robot] = []
        self.crates: list[Crate] = []
        self.boxes_lifted = 0
        self.step_count = 0
        self.done = False
        self.done_reason = None

    # -- queries ---------------------------------------------------------------

    @property
    def spawned(self):
        return len(self.crates)

    def active_crates(self):
        return [c for c in self.crates if not c.lifted]

    def _occupied(self):
        cells = {r.position for r in self.robots}
        cells.update(c.position for c in self.crates if not c.lifted)
        return cells

    def _random_free_cell(self):
        taken = self._occupied()
        w = self.config.grid_width
        free = [i for i in range(self.config.n_cells) if (i % w, i // w) not in taken]
        i = free[self.rng.integers(len(free))]
        return (i % w, i // w)

    def _spawn_crate(self, position=None, weight=None):
        lo, hi = self.config.box_weight_range
        if position is None:
            position = self._random_free_cell()
        if weight is None:
            weight = float(self.rng.uniform(lo, hi))
        self.crates.append(Crate(len(self.crates), tuple(position), float(weight)))

    # -- dynamics --------------------------------------------------------------

    def step(self, joint_action):
        cfg = self.config
        if self.done:
            raise EnvError("episode already finished; call reset()")
        if len(joint_action) != len(self.robots):
            raise EnvError(f"expected {len(self.robots)} actions, got {len(joint_action)}")
        actions = [Action(int(a)) for a in joint_action]

        lifters: dict[tuple, list[Robot]] = {}
        for robot, act in zip(self.robots, actions):
            robot.lifting = act == Action.LIFT
            if act in _MOVES:
                dx, dy = _MOVES[act]
                x = min(max(robot.position[0] + dx, 0), cfg.grid_width - 1)
                y = min(max(robot.position[1] + dy, 0), cfg.grid_height - 1)
                robot.position = (x, y)
            elif robot.lifting:
                lifters.setdefault(robot.position, []).append(robot)

        rewards = [cfg.step_penalty] * len(self.robots)
        lifted_by = []
        if lifters:
            for crate in self.crates:
                if crate.lifted or crate.position not in lifters:
                    continue
                team = lifters[crate.position]
                if sum(r.capacity for r in team) >= crate.weight:
                    crate.lifted = True
                    self.boxes_lifted += 1
                    lifted_by.append([r.id for r in team])
                    for r in team:
                        rewards[r.id] += cfg.lift_reward
            for _ in lifted_by:
                if self.spawned < cfg.task_size:
                    self._spawn_crate()

        self.step_count += 1
        if self.boxes_lifted >= cfg.task_size:
            self.done, self.done_reason = True, "main_task_complete"
            rewards = [r + cfg.main_task_bonus for r in rewards]
        elif self.step_count >= cfg.max_steps_per_episode:
            self.done, self.done_reason = True, "step_limit"
        return StepOutcome(rewards, self.observe_all(), len(lifted_by), self.done,
                           self.done_reason, lifted_by)

    # -- observations ----------------------------------------------------------

    def nearest_crate(self, position):
        best, best_d = None, None
        for c in self.crates:
            if c.lifted:
                continue
            d = abs(c.position[0] - position[0]) + abs(c.position[1] - position[1])
            if best is None or d < best_d:
                best, best_d = c, d
        return best

    def encode_observation(self, robot_id):
        """9-vector: pos(2), capacity, lifting flag, crate offset(2), crate weight,
        active-crate count, remaining-task fraction."""
        if not 0 <= robot_id < len(self.robots):
            raise EnvError(f"unknown robot id {robot_id}")
        cfg = self.config
        robot = self.robots[robot_id]
        sx = 1.0 / max(cfg.grid_width - 1, 1)
        sy = 1.0 / max(cfg.grid_height - 1, 1)
        w_max = cfg.box_weight_range[1]
        x, y = robot.position
        crate = self.nearest_crate(robot.position)
        n_active = sum(not c.lifted for c in self.crates)
        obs = np.zeros(OBS_DIM)
        obs[0] = x * sx
        obs[1] = y * sy
        obs[2] = min(robot.capacity / w_max, 1.0)
        obs[3] = float(robot.lifting)
        if crate is not None:
            obs[4] = (crate.position[0] - x) * sx
            obs[5] = (crate.position[1] - y) * sy
            obs[6] = crate.weight / w_max
        obs[7] = n_active / cfg.max_active_boxes
        obs[8] = (cfg.task_size - self.boxes_lifted) / cfg.task_size
        return obs

    def observe_all(self):
        return [self.encode_observation(i) for i in range(len(self.robots))]

    def snapshot(self):
        """Hashable summary of the full state, for determinism checks."""
        return (tuple((r.position, r.lifting) for r in self.robots),
                tuple((c.position, c.weight, c.lifted) for c in self.crates),
                self.boxes_lifted, self.step_count)


def _make_robots(config, positions):
    lo = config.box_weight_range[0]
    return [Robot(i, tuple(p), cap, is_disturbance=cap < lo)
            for i, (p, cap) in enumerate(zip(positions, config.capacities))]


def reset(config, seed=None):
    """Fresh episode; returns ``(world, observations)``.  ``seed`` overrides ``config.seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    world = GridWorld(config, rng)
    n = config.num_robots
    cells = rng.choice(config.n_cells, size=n, replace=False)
    w = config.grid_width
    world.robots = _make_robots(config, [(int(c) % w, int(c) // w) for c in cells])
    for _ in range(min(config.task_size, config.max_active_boxes)):
        world._spawn_crate()
    return world, world.observe_all()


def from_layout(config, robot_positions, crates, seed=None):
    """World with explicit placements; ``crates`` is a list of ``((x, y), weight)``."""
    config.validate()
    if len(robot_positions) != config.num_robots:
        raise EnvError("one position per robot required")
    world = GridWorld(config, np.random.default_rng(config.seed if seed is None else seed))
    for p in list(robot_positions) + [p for p, _ in crates]:
        if not (0 <= p[0] < config.grid_width and 0 <= p[1] < config.grid_height):
            raise EnvError(f"position {p} is off the grid")
    if len({tuple(p) for p, _ in crates}) != len(crates):
        raise EnvError("crates must occupy distinct cells")
    world.robots = _make_robots(config, robot_positions)
    for pos, weight in crates:
        world._spawn_crate(pos, weight)
    return world, world.observe_all()


def step(world, joint_action):
    return world.step(joint_action)


def encode_observation(world, robot_id):
    return world.encode_observation(robot_id)


def optimal_steps_oracle(source):
    """Minimal steps to finish a 1-robot, 1-crate micro instance, by BFS.

    ``source`` is an :class:`EnvConfig` (placement drawn via :func:`reset`) or a
    :class:`GridWorld`.  The search uses its own move model, not ``GridWorld.step``.
    """
    world = reset(source)[0] if isinstance(source, EnvConfig) else source
    cfg = world.config
    if cfg.grid_width > 4 or cfg.grid_height > 4 or cfg.num_robots != 1 or cfg.task_size != 1:
        raise EnvError("oracle handles only grids <= 4x4 with 1 robot and task_size 1")
    crates = world.active_crates()
    if len(crates) != 1:
        raise EnvError("oracle needs exactly one crate on the grid")
    crate = crates[0]
    if world.robots[0].capacity < crate.weight:
        raise EnvError("robot cannot lift the crate; instance infeasible for the oracle")

    start = world.robots[0].position
    dist = {start: 0}
    queue = deque([start])
    while queue:
        pos = queue.popleft()
        if pos == crate.position:
            return dist[pos] + 1  # the lift itself
        for dx, dy in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            nxt = (min(max(pos[0] + dx, 0), cfg.grid_width - 1),
                   min(max(pos[1] + dy, 0), cfg.grid_height - 1))
            if nxt not in dist:
                dist[nxt] = dist[pos] + 1
                queue.append(nxt)
    raise EnvError("crate unreachable")
