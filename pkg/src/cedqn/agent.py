"""Per-robot learner: behaviour net, target net, communication gate, replay.

With ``comm_enabled=False`` the agent is plain DQN over a 15-dim input whose
last six (message) components are always zero.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nncore
from .comms import MSG_DIM
from .errors import CedqnError, CheckpointError, ConfigError, DivergenceError, ShapeError
from .gridworld import N_ACTIONS, OBS_DIM
from .rng import generator

STATE_DIM = OBS_DIM + MSG_DIM


@dataclass(frozen=True)
class EpsilonSchedule:
    start: float = 1.0
    end: float = 0.05
    decay_steps: int = 50_000


def epsilon_at(schedule, global_step):
    """Linear from ``start`` to ``end`` over ``decay_steps``, then flat."""
    if schedule.decay_steps <= 0 or global_step >= schedule.decay_steps:
        return schedule.end
    frac = max(global_step, 0) / schedule.decay_steps
    return schedule.start + frac * (schedule.end - schedule.start)


@dataclass(frozen=True)
class HyperParams:
    gamma: float = 0.95
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 50_000
    batch_size: int = 64
    buffer_capacity: int = 50_000
    target_sync_interval: int = 500
    q_lr: float = 1e-3
    comm_lr: float = 1e-3
    comm_threshold: float = 0.5
    q_hidden: tuple = (64, 64)
    comm_hidden: tuple = (32,)
    baseline_decay: float = 0.99
    clip_norm: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "q_hidden", tuple(int(h) for h in self.q_hidden))
        object.__setattr__(self, "comm_hidden", tuple(int(h) for h in self.comm_hidden))
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must satisfy 0 <= gamma < 1, got {self.gamma}")
        for name in ("epsilon_start", "epsilon_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.batch_size < 1 or self.buffer_capacity < 1 or self.target_sync_interval < 1:
            raise ConfigError("batch_size, buffer_capacity, target_sync_interval must be >= 1")

    @property
    def epsilon_schedule(self):
        return EpsilonSchedule(self.epsilon_start, self.epsilon_end, self.epsilon_decay_steps)


# -- replay -----------------------------------------------------------------------

@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool


class ReplayBuffer:
    """Fixed-capacity FIFO ring backed by preallocated arrays."""

    def __init__(self, capacity, state_dim=STATE_DIM):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.dones = np.zeros(capacity)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def attach(self, states, actions, rewards, next_states, dones):
        """Swap in externally owned (still empty) storage arrays."""
        if self.size:
            raise ValueError("can only attach storage to an empty buffer")
        self.states, self.actions, self.rewards = states, actions, rewards
        self.next_states, self.dones = next_states, dones

    def add(self, state, action, reward, next_state, done):
        i = self.cursor
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.dones[i] = float(done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def oldest_index(self):
        return self.cursor if self.size == self.capacity else 0

    def __getitem__(self, i):
        """The ``i``-th oldest stored transition."""
        if not 0 <= i < self.size:
            raise IndexError(i)
        j = (self.oldest_index() + i) % self.capacity
        return Transition(self.states[j].copy(), int(self.actions[j]), float(self.rewards[j]),
                          self.next_states[j].copy(), bool(self.dones[j]))

    def sample_indices(self, batch_size, rng):
        return rng.choice(self.size, size=batch_size, replace=False)

    def batch(self, idx):
        return (self.states[idx], self.actions[idx], self.rewards[idx],
                self.next_states[idx], self.dones[idx])


# -- pure helpers ---------------------------------------------------------------

def augment(observation, message):
    """Concatenate observation (9) and aggregated message (6)."""
    observation = np.asarray(observation, dtype=np.float64)
    message = np.asarray(getattr(message, "vector", message), dtype=np.float64)
    if observation.shape != (OBS_DIM,) or message.shape != (MSG_DIM,):
        raise ShapeError(f"augment needs lengths {OBS_DIM}+{MSG_DIM}, got "
                         f"{observation.shape}+{message.shape}")
    return np.concatenate((observation, message))


def bellman_targets(target_net, rewards, next_states, dones, gamma):
    """r + gamma * max_a' Qhat(s', a'), or just r where ``done``."""
    q_next = target_net(np.atleast_2d(next_states)).max(axis=1)
    return np.asarray(rewards, dtype=np.float64) + gamma * q_next * (1.0 - np.asarray(dones))


def rewards_to_go(rewards, gamma):
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


@dataclass
class CommTrace:
    """Gate decisions of one agent over one episode."""

    observations: list = field(default_factory=list)
    probabilities: list = field(default_factory=list)
    sent: list = field(default_factory=list)
    rewards: list = field(default_factory=list)

    def record(self, observation, probability, sent):
        self.observations.append(observation)
        self.probabilities.append(probability)
        self.sent.append(sent)

    def __len__(self):
        return len(self.sent)


# -- the agent -------------------------------------------------------------------

class DqnAgent:
    def __init__(self, robot_id, hyper=None, comm_enabled=True, seed=0):
        self.robot_id = int(robot_id)
        self.hyper = hyper or HyperParams()
        self.comm_enabled = bool(comm_enabled)
        self.seed = int(seed)
        h = self.hyper
        self.q_net = nncore.mlp_init([STATE_DIM, *h.q_hidden, N_ACTIONS], "identity",
                                     seed=generator(seed, "q_init"))
        self.target_net = self.q_net.clone()
        self.comm_net = None
        self.comm_opt = None
        if self.comm_enabled:
            self.comm_net = nncore.mlp_init([OBS_DIM, *h.comm_hidden, 1], "sigmoid",
                                            seed=generator(seed, "comm_init"))
            self.comm_opt = nncore.OptimizerState("adam", h.comm_lr)
        self.q_opt = nncore.OptimizerState("adam", h.q_lr)
        self.buffer = ReplayBuffer(h.buffer_capacity)
        self.explore_rng = generator(seed, "explore")
        self.replay_rng = generator(seed, "replay")
        self.train_steps = 0
        self.comm_baseline = None

    @property
    def comm_threshold(self):
        return self.hyper.comm_threshold

    # acting

    def comm_gate(self, observation):
        """Return ``(probability, send)``; sending needs probability strictly above threshold."""
        if not self.comm_enabled:
            raise CedqnError(f"agent {self.robot_id} has communication disabled")
        p = float(self.comm_net(np.asarray(observation, dtype=np.float64))[0])
        return p, p > self.hyper.comm_threshold

    def q_values(self, state):
        return self.q_net(state)

    def select_action(self, state, epsilon, rng=None):
        rng = self.explore_rng if rng is None else rng
        if rng.random() < epsilon:
            return int(rng.integers(N_ACTIONS))
        return int(np.argmax(self.q_net(state)))

    # learning

    def store_transition(self, t):
        if not 0 <= int(t.action) < N_ACTIONS:
            raise ShapeError(f"action index {t.action} outside 0..{N_ACTIONS - 1}")
        if np.shape(t.state) != (STATE_DIM,) or np.shape(t.next_state) != (STATE_DIM,):
            raise ShapeError(f"transition states must have length {STATE_DIM}")
        if not np.isfinite(t.reward):
            raise ShapeError("transition reward must be finite")
        self.buffer.add(t.state, int(t.action), float(t.reward), t.next_state, bool(t.done))

    def train_batch(self):
        """One DQN step on a uniform minibatch; ``None`` while the buffer is too small."""
        n = self.hyper.batch_size
        if len(self.buffer) < n:
            return None
        idx = self.buffer.sample_indices(n, self.replay_rng)
        return self.train_on_batch(*self.buffer.batch(idx))

    def train_on_batch(self, states, actions, rewards, next_states, dones):
        h = self.hyper
        y = bellman_targets(self.target_net, rewards, next_states, dones, h.gamma)
        q, trace = nncore.forward(self.q_net, states)
        rows = np.arange(len(actions))
        err = q[rows, actions] - y
        loss = float(np.mean(err * err))
        if not np.isfinite(loss):
            raise DivergenceError(f"agent {self.robot_id}: non-finite q loss")
        g = np.zeros_like(q)
        g[rows, actions] = 2.0 * err / len(actions)
        grads = nncore.clip_by_global_norm(nncore.backward(self.q_net, trace, g), h.clip_norm)
        nncore.apply_update(self.q_net, grads, self.q_opt)
        self.train_steps += 1
        if self.train_steps % h.target_sync_interval == 0:
            self.sync_target()
        return loss

    def update_comm_policy(self, trace):
        """Advantage-weighted logistic update of the gate from one episode.

        Each gate decision's discounted reward-to-go is compared with a running
        (EMA) baseline.  Steps where the agent sent get label 1 if they beat the
        baseline, else 0, and are weighted by ``|advantage|`` in a BCE loss.
        """
        if not self.comm_enabled:
            raise CedqnError(f"agent {self.robot_id} has communication disabled")
        if not len(trace):
            return 0.0
        h = self.hyper
        rtg = rewards_to_go(trace.rewards, h.gamma)
        adv = np.empty(len(rtg))
        base = rtg[0] if self.comm_baseline is None else self.comm_baseline
        for t, value in enumerate(rtg):
            adv[t] = value - base
            base = h.baseline_decay * base + (1.0 - h.baseline_decay) * value
        self.comm_baseline = float(base)

        sent = np.asarray(trace.sent, dtype=bool)
        if not sent.any():
            return 0.0
        obs = np.asarray(trace.observations)[sent]
        adv = adv[sent]
        labels = (adv > 0).astype(np.float64)
        weights = np.abs(adv)
        p, ftrace = nncore.forward(self.comm_net, obs)
        p = p[:, 0]
        pc = np.clip(p, 1e-12, 1.0 - 1e-12)
        bce = -(labels * np.log(pc) + (1.0 - labels) * np.log(1.0 - pc))
        loss = float(np.mean(weights * bce))
        if not np.isfinite(loss):
            raise DivergenceError(f"agent {self.robot_id}: non-finite comm loss")
        dz = (weights * (p - labels) / len(p))[:, None]
        grads = nncore.backward(self.comm_net, ftrace, dz, preactivation=True)
        if grads.norm() > 0.0:
            nncore.clip_by_global_norm(grads, h.clip_norm)
            nncore.apply_update(self.comm_net, grads, self.comm_opt)
        return loss

    def sync_target(self):
        nncore.copy_weights(self.q_net, self.target_net)

    def networks(self):
        nets = {"q_net": self.q_net, "target_net": self.target_net}
        if self.comm_net is not None:
            nets["comm_net"] = self.comm_net
        return nets


class AgentGroup:
    """Fused acting and training for a team of agents with identical settings.

    The agents' networks, Adam moments and replay storage are moved into
    stacked arrays (each agent keeps views), so one numpy call serves the
    whole team.  Results match calling each agent's own methods in turn:
    the same random draws in the same order, and the same arithmetic up to
    BLAS rounding.
    """

    def __init__(self, agents):
        self.agents = list(agents)
        hyper = self.agents[0].hyper
        if any(a.hyper != hyper or a.comm_enabled != self.agents[0].comm_enabled
               for a in self.agents):
            raise CedqnError("grouped agents must share hyperparameters and algorithm")
        self.hyper = hyper
        self.comm_enabled = self.agents[0].comm_enabled
        k = len(self.agents)
        self.q = nncore.MlpStack([a.q_net for a in self.agents])
        self.target = nncore.MlpStack([a.target_net for a in self.agents])
        self.comm = (nncore.MlpStack([a.comm_net for a in self.agents])
                     if self.comm_enabled else None)
        self.m = np.zeros_like(self.q.params)
        self.v = np.zeros_like(self.q.params)
        for i, a in enumerate(self.agents):
            if a.q_opt.m is not None or len(a.buffer):
                raise CedqnError("agents must be grouped before training starts")
            a.q_opt.m, a.q_opt.v = self.m[i], self.v[i]
        cap = hyper.buffer_capacity
        self.states = np.zeros((k, cap, STATE_DIM))
        self.actions = np.zeros((k, cap), dtype=np.int64)
        self.rewards = np.zeros((k, cap))
        self.next_states = np.zeros((k, cap, STATE_DIM))
        self.dones = np.zeros((k, cap))
        for i, a in enumerate(self.agents):
            a.buffer.attach(self.states[i], self.actions[i], self.rewards[i],
                            self.next_states[i], self.dones[i])
        self._rows = np.arange(k)

    def __len__(self):
        return len(self.agents)

    def gate(self, observations):
        """Gate probabilities and send decisions for all agents."""
        p = self.comm(np.asarray(observations)[:, None, :])[:, 0, 0]
        return p, p > self.hyper.comm_threshold

    def act(self, states, epsilon, rngs=None):
        rngs = [a.explore_rng for a in self.agents] if rngs is None else rngs
        actions = [None] * len(self.agents)
        for i, rng in enumerate(rngs):
            if rng.random() < epsilon:
                actions[i] = int(rng.integers(N_ACTIONS))
        if any(a is None for a in actions):
            q = self.q(np.asarray(states)[:, None, :])[:, 0, :]
            greedy = q.argmax(axis=1)
            actions = [int(g) if a is None else a for a, g in zip(actions, greedy)]
        return actions

    def store(self, states, actions, rewards, next_states, done):
        for a, s, act, r, s2 in zip(self.agents, states, actions, rewards, next_states):
            a.store_transition(Transition(s, act, r, s2, done))

    def train(self):
        """One DQN step per agent; returns per-agent losses or ``None`` if buffers are short."""
        h = self.hyper
        n = h.batch_size
        if any(len(a.buffer) < n for a in self.agents):
            return None
        idx = np.stack([a.buffer.sample_indices(n, a.replay_rng) for a in self.agents])
        r = self._rows[:, None]
        states, actions = self.states[r, idx], self.actions[r, idx]
        rewards, next_states, dones = self.rewards[r, idx], self.next_states[r, idx], self.dones[r, idx]

        y = rewards + h.gamma * self.target(next_states).max(axis=2) * (1.0 - dones)
        q, trace = self.q.forward(states)
        cols = np.arange(n)[None, :]
        err = q[r, cols, actions] - y
        losses = np.mean(err * err, axis=1)
        if not np.all(np.isfinite(losses)):
            raise DivergenceError("non-finite q loss")
        g = np.zeros_like(q)
        g[r, cols, actions] = 2.0 * err / n
        grads = nncore.clip_rows_by_norm(self.q.backward(trace, g), h.clip_norm)
        nncore.apply_update_stacked(self.q, grads, [a.q_opt for a in self.agents],
                                    self.m, self.v)
        for a in self.agents:
            a.train_steps += 1
        if self.agents[0].train_steps % h.target_sync_interval == 0:
            self.target.params[...] = self.q.params
        return losses


# module-level spellings of the agent operations

def comm_gate(agent, observation):
    return agent.comm_gate(observation)


def select_action(agent, augmented_state, epsilon, rng=None):
    return agent.select_action(augmented_state, epsilon, rng)


def store_transition(agent, transition):
    agent.store_transition(transition)


def train_batch(agent, rng=None):
    if rng is not None:
        agent.replay_rng = rng
    return agent.train_batch()


def update_comm_policy(agent, trace):
    return agent.update_comm_policy(trace)


def sync_target(agent):
    agent.sync_target()


# -- checkpoints ------------------------------------------------------------------

def save_agent(agent, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, net in agent.networks().items():
        fname = f"robot{agent.robot_id}_{name}.ckpt"
        nncore.save_mlp(net, directory / fname)
        files[name] = fname
    manifest = {
        "robot_id": agent.robot_id,
        "comm_enabled": agent.comm_enabled,
        "hyperparams": asdict(agent.hyper),
        "train_step": agent.train_steps,
        "seed": agent.seed,
        "networks": files,
    }
    path = directory / f"robot{agent.robot_id}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_agent(manifest_path):
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise CheckpointError(f"missing agent manifest {manifest_path}", kind="missing")
    try:
        manifest = json.loads(manifest_path.read_text())
        hyper = HyperParams(**manifest["hyperparams"])
        agent = DqnAgent(manifest["robot_id"], hyper, manifest["comm_enabled"],
                         manifest.get("seed", 0))
        files = manifest["networks"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed agent manifest {manifest_path}: {exc}") from None
    for name in agent.networks():
        path = manifest_path.parent / files.get(name, "")
        if name not in files or not path.is_file():
            raise CheckpointError(f"missing checkpoint for {name} of robot {agent.robot_id}",
                                  kind="missing")
        net = nncore.load_mlp(path)
        nncore.copy_weights(net, getattr(agent, name))
    agent.train_steps = int(manifest["train_step"])
    return agent
