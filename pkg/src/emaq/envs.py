"""Desk-scale environments, offline dataset generation and the dataset file format.

Dataset files are a single UTF-8 JSON header line followed by fixed-size
little-endian records, one per transition::

    float32 state[state_dim] | float32 action[action_dim] | float32 reward
    | float32 next_state[state_dim] | uint8 terminal
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .errors import ConfigurationError, ParseError, StructuralError, ValidationError
from .tabular import DiscretePolicy, TabularMDP, q_learning_fixed_point

FORMAT_NAME = "emaq-transitions"
FORMAT_VERSION = 1
REGIMES = ("random", "medium", "mixed", "medium_expert")


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    reward: float
    terminal: bool


def _timestamp():
    # SOURCE_DATE_EPOCH keeps files reproducible; without it the epoch is used
    epoch = int(os.environ.get("SOURCE_DATE_EPOCH", "0"))
    return datetime.fromtimestamp(epoch, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


class OfflineDataset:
    """Columnar transition store; ``transitions`` gives the row view."""

    def __init__(self, states, actions, rewards, next_states, terminals, metadata=None):
        self.states = np.asarray(states, dtype=np.float32)
        self.actions = np.asarray(actions, dtype=np.float32)
        self.rewards = np.asarray(rewards, dtype=np.float32).reshape(-1)
        self.next_states = np.asarray(next_states, dtype=np.float32)
        self.terminals = np.asarray(terminals, dtype=np.uint8).reshape(-1)
        self.metadata = dict(metadata or {})
        n = len(self.rewards)
        if self.states.ndim != 2 or self.actions.ndim != 2 or self.next_states.shape != self.states.shape \
                or len(self.states) != n or len(self.actions) != n or len(self.terminals) != n:
            raise StructuralError("dataset columns have inconsistent shapes")
        for key, dim in (("state_dim", self.states.shape[1]), ("action_dim", self.actions.shape[1])):
            if self.metadata.setdefault(key, dim) != dim:
                raise ValidationError(f"metadata {key}={self.metadata[key]} but data has {dim}")

    @classmethod
    def empty(cls, state_dim, action_dim, metadata=None):
        return cls(np.zeros((0, state_dim)), np.zeros((0, action_dim)), np.zeros(0),
                   np.zeros((0, state_dim)), np.zeros(0), metadata)

    @classmethod
    def from_transitions(cls, transitions, metadata=None, state_dim=None, action_dim=None):
        if not transitions:
            return cls.empty(state_dim, action_dim, metadata)
        return cls([t.state for t in transitions], [t.action for t in transitions],
                   [t.reward for t in transitions], [t.next_state for t in transitions],
                   [t.terminal for t in transitions], metadata)

    @property
    def state_dim(self):
        return self.states.shape[1]

    @property
    def action_dim(self):
        return self.actions.shape[1]

    def __len__(self):
        return len(self.rewards)

    def __getitem__(self, i):
        return Transition(self.states[i], self.actions[i], self.next_states[i],
                          float(self.rewards[i]), bool(self.terminals[i]))

    @property
    def transitions(self):
        return [self[i] for i in range(len(self))]

    def extend(self, other: "OfflineDataset") -> "OfflineDataset":
        """New dataset with ``other`` appended; metadata of ``self`` is kept."""
        return OfflineDataset(np.concatenate([self.states, other.states]),
                              np.concatenate([self.actions, other.actions]),
                              np.concatenate([self.rewards, other.rewards]),
                              np.concatenate([self.next_states, other.next_states]),
                              np.concatenate([self.terminals, other.terminals]), self.metadata)

    def subset(self, idx) -> "OfflineDataset":
        return OfflineDataset(self.states[idx], self.actions[idx], self.rewards[idx],
                              self.next_states[idx], self.terminals[idx], self.metadata)


def _record_dtype(state_dim, action_dim):
    return np.dtype([
        ("state", "<f4", (state_dim,)),
        ("action", "<f4", (action_dim,)),
        ("reward", "<f4"),
        ("next_state", "<f4", (state_dim,)),
        ("terminal", "u1"),
    ])


def dataset_bytes(ds: OfflineDataset) -> bytes:
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "count": len(ds),
              "state_dim": ds.state_dim, "action_dim": ds.action_dim, "metadata": ds.metadata}
    rec = np.zeros(len(ds), dtype=_record_dtype(ds.state_dim, ds.action_dim))
    rec["state"], rec["action"], rec["reward"] = ds.states, ds.actions, ds.rewards
    rec["next_state"], rec["terminal"] = ds.next_states, ds.terminals
    head = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    return head + rec.tobytes()


def save_dataset(path, ds: OfflineDataset) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))


def parse_dataset(data: bytes) -> OfflineDataset:
    nl = data.find(b"\n")
    if nl < 0:
        raise ParseError("missing header line", offset=0)
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise ParseError(f"header is not valid JSON: {exc}", offset=0) from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise ParseError("not an emaq transition file", offset=0)
    try:
        count, sdim, adim = int(header["count"]), int(header["state_dim"]), int(header["action_dim"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"header missing field: {exc}", offset=0) from None
    if count < 0 or sdim < 1 or adim < 1:
        raise ValidationError("header dimensions must be positive")
    dtype = _record_dtype(sdim, adim)
    body = data[nl + 1:]
    if len(body) != count * dtype.itemsize:
        complete = len(body) // dtype.itemsize
        raise ParseError(
            f"body holds {len(body)} bytes, expected {count} records of {dtype.itemsize} bytes",
            offset=nl + 1 + complete * dtype.itemsize, record=complete)
    rec = np.frombuffer(body, dtype=dtype, count=count)
    for name in ("state", "action", "reward", "next_state"):
        col = rec[name].reshape(count, -1)
        bad = ~np.all(np.isfinite(col), axis=1)
        if np.any(bad):
            i = int(np.argmax(bad))
            raise ValidationError(f"record {i}: non-finite {name}")
    if np.any(rec["terminal"] > 1):
        i = int(np.argmax(rec["terminal"] > 1))
        raise ValidationError(f"record {i}: terminal flag must be 0 or 1")
    meta = header.get("metadata", {})
    for key, dim in (("state_dim", sdim), ("action_dim", adim)):
        if key in meta and meta[key] != dim:
            raise ValidationError(f"metadata {key} disagrees with header")
    return OfflineDataset(rec["state"].reshape(count, sdim), rec["action"].reshape(count, adim),
                          rec["reward"], rec["next_state"].reshape(count, sdim), rec["terminal"],
                          meta)


def load_dataset(path) -> OfflineDataset:
    with open(path, "rb") as fh:
        return parse_dataset(fh.read())


# ---------------------------------------------------------------- environments


class Environment:
    """Base interface: states are float vectors, actions continuous in bounds."""

    name = "env"
    horizon: int
    state_dim: int
    action_low: np.ndarray
    action_high: np.ndarray

    def reset(self, rng) -> np.ndarray:
        raise NotImplementedError

    def step(self, state, action, rng):
        """Return ``(next_state, reward, terminal)``."""
        raise NotImplementedError

    @property
    def action_dim(self):
        return len(self.action_low)


@dataclass
class PointMassConfig:
    goal: tuple = (0.5, 0.5)
    start: tuple = (-0.5, -0.5)
    start_noise: float = 0.05
    horizon: int = 100


class PointMass(Environment):
    """2-D point mass; state (x, y, vx, vy), action (ax, ay), both boxed to [-1, 1]."""

    name = "pointmass"

    def __init__(self, config: PointMassConfig | None = None):
        self.config = config or PointMassConfig()
        self.goal = np.asarray(self.config.goal, dtype=np.float64)
        self.horizon = int(self.config.horizon)
        self.state_dim = 4
        self.action_low = -np.ones(2)
        self.action_high = np.ones(2)

    def reset(self, rng):
        noise = rng.uniform(-self.config.start_noise, self.config.start_noise, size=2)
        pos = np.clip(np.asarray(self.config.start) + noise, -1.0, 1.0)
        return np.concatenate([pos, np.zeros(2)])

    def step(self, state, action, rng=None):
        state = np.asarray(state, dtype=np.float64)
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        vel = np.clip(0.95 * state[2:] + 0.1 * a, -1.0, 1.0)
        pos = np.clip(state[:2] + 0.1 * vel, -1.0, 1.0)
        reward = -float(np.linalg.norm(pos - self.goal))
        return np.concatenate([pos, vel]), reward, False


def pointmass_env(config: PointMassConfig | None = None) -> PointMass:
    return PointMass(config)


@dataclass
class GridWorldConfig:
    width: int = 5
    height: int = 5
    goal: tuple = (4, 4)
    start: tuple = (0, 0)
    slip: float = 0.1
    horizon: int = 50
    gamma: float = 0.95


# up, right, down, left as (dx, dy)
MOVES = ((0, 1), (1, 0), (0, -1), (-1, 0))


class GridWorld(Environment):
    """Grid with a goal cell; one-hot states and a 1-D continuous action.

    Action ``a`` in ``[0, 4)`` selects move ``floor(a)``; with probability
    ``slip`` the move is replaced by a uniformly random one.  Every step taken
    outside the goal costs -1 and entering the goal terminates the episode.
    """

    name = "gridworld"

    def __init__(self, config: GridWorldConfig | None = None):
        c = self.config = config or GridWorldConfig()
        if c.width < 1 or c.height < 1 or not (0 <= c.slip <= 1):
            raise ConfigurationError("invalid gridworld dimensions or slip")
        for cell in (c.goal, c.start):
            if not (0 <= cell[0] < c.width and 0 <= cell[1] < c.height):
                raise ConfigurationError(f"cell {cell} outside the grid")
        self.num_cells = c.width * c.height
        self.state_dim = self.num_cells
        self.horizon = int(c.horizon)
        self.action_low = np.zeros(1)
        self.action_high = np.full(1, float(len(MOVES)))
        self.goal_index = self.cell_index(c.goal)
        self.start_index = self.cell_index(c.start)
        self.mdp = self._build_mdp()

    def cell_index(self, cell):
        return int(cell[1] * self.config.width + cell[0])

    def _neighbor(self, s, move):
        x, y = s % self.config.width, s // self.config.width
        dx, dy = MOVES[move]
        nx = min(max(x + dx, 0), self.config.width - 1)
        ny = min(max(y + dy, 0), self.config.height - 1)
        return self.cell_index((nx, ny))

    def _build_mdp(self):
        S, A, slip = self.num_cells, len(MOVES), self.config.slip
        P = np.zeros((S, A, S))
        R = np.zeros((S, A))
        for s in range(S):
            if s == self.goal_index:
                P[s, :, s] = 1.0
                continue
            R[s] = -1.0
            for a in range(A):
                P[s, a, self._neighbor(s, a)] += 1.0 - slip
                for b in range(A):
                    P[s, a, self._neighbor(s, b)] += slip / A
        return TabularMDP(P, R, self.config.gamma)

    def one_hot(self, s):
        v = np.zeros(self.num_cells)
        v[s] = 1.0
        return v

    def decode(self, state):
        return int(np.argmax(state))

    @staticmethod
    def discrete_action(action):
        return min(int(np.floor(np.asarray(action).reshape(-1)[0])), len(MOVES) - 1)

    def continuous_action(self, move, rng):
        return np.array([move + rng.random()])

    def start_distribution(self):
        return self.one_hot(self.start_index)

    def reset(self, rng):
        return self.one_hot(self.start_index)

    def step(self, state, action, rng):
        s = self.decode(state)
        move = self.discrete_action(action)
        # one draw decides slipping, a second picks the slip direction
        if rng.random() < self.config.slip:
            move = int(rng.integers(len(MOVES)))
        nxt = self._neighbor(s, move)
        return self.one_hot(nxt), -1.0, nxt == self.goal_index


def gridworld_env(config: GridWorldConfig | None = None):
    """Return ``(env, mdp)``: the rollout environment and its exact tabular twin."""
    env = GridWorld(config)
    return env, env.mdp


# ------------------------------------------------------------ data collection


class RandomPolicy:
    description = "uniform random actions"

    def __init__(self, env):
        self.low, self.high = env.action_low, env.action_high

    def __call__(self, state, rng):
        return rng.uniform(self.low, self.high)


class TabularEpsilonGreedy:
    """Epsilon-greedy on a Q table, emitting continuous gridworld actions."""

    def __init__(self, env: GridWorld, q_values, epsilon):
        self.env, self.q, self.epsilon = env, np.asarray(q_values), float(epsilon)
        self.description = f"epsilon-greedy on exact Q* (epsilon={self.epsilon})"

    def tabular_policy(self) -> DiscretePolicy:
        A = self.q.shape[1]
        probs = np.full(self.q.shape, self.epsilon / A)
        probs[np.arange(len(self.q)), self.q.argmax(axis=1)] += 1.0 - self.epsilon
        return DiscretePolicy(probs)

    def __call__(self, state, rng):
        s = self.env.decode(state)
        if rng.random() < self.epsilon:
            move = int(rng.integers(self.q.shape[1]))
        else:
            move = int(np.argmax(self.q[s]))
        return self.env.continuous_action(move, rng)


def collect(env: Environment, policy, size: int, rng, on_step=None):
    """Roll ``policy(state, rng)`` episode after episode until ``size`` transitions.

    Horizon truncation leaves ``terminal = 0``.  ``on_step(k)`` is called
    before each step with the running transition count.
    """
    cols = {k: [] for k in ("s", "a", "r", "s2", "t")}
    count = 0
    while count < size:
        state = env.reset(rng)
        for _ in range(env.horizon):
            if on_step is not None:
                on_step(count)
            action = np.asarray(policy(state, rng), dtype=np.float64)
            nxt, reward, terminal = env.step(state, action, rng)
            cols["s"].append(state)
            cols["a"].append(action)
            cols["r"].append(reward)
            cols["s2"].append(nxt)
            cols["t"].append(terminal)
            count += 1
            state = nxt
            if terminal or count >= size:
                break
    return OfflineDataset(np.reshape(cols["s"], (count, env.state_dim)),
                          np.reshape(cols["a"], (count, env.action_dim)), cols["r"],
                          np.reshape(cols["s2"], (count, env.state_dim)), cols["t"])


@dataclass
class ReferencePolicies:
    """Generating policies for the non-random regimes.

    ``mixed`` is a callable ``(size, rng) -> OfflineDataset`` replaying the
    medium policy's training history, or a ready dataset to truncate.
    """

    medium: object = None
    expert: object = None
    mixed: object = None
    notes: dict = field(default_factory=dict)


def gridworld_references(env: GridWorld, medium_eps=0.5, expert_eps=0.05) -> ReferencePolicies:
    q_star = q_learning_fixed_point(env.mdp).values
    medium = TabularEpsilonGreedy(env, q_star, medium_eps)
    expert = TabularEpsilonGreedy(env, q_star, expert_eps)

    def mixed(size, rng):
        # training-history analog: epsilon anneals from 1 down to the medium level
        annealed = TabularEpsilonGreedy(env, q_star, 1.0)
        annealed.description = f"epsilon annealed 1.0 -> {medium_eps}"

        def set_eps(k):
            annealed.epsilon = 1.0 - (1.0 - medium_eps) * k / max(size - 1, 1)

        return collect(env, annealed, size, rng, on_step=set_eps), annealed.description

    return ReferencePolicies(medium, expert, mixed)


def generate_dataset(env: Environment, regime: str, size: int, rng,
                     references: ReferencePolicies | None = None, seed=None) -> OfflineDataset:
    if regime not in REGIMES:
        raise ConfigurationError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    if size < 1:
        raise ConfigurationError("dataset size must be positive")
    if references is None and isinstance(env, GridWorld):
        references = gridworld_references(env)
    if regime != "random" and (references is None or references.medium is None):
        raise ConfigurationError(f"regime {regime!r} needs a reference policy for {env.name}")
    if regime == "random":
        policy = RandomPolicy(env)
        ds, desc = collect(env, policy, size, rng), policy.description
    elif regime == "medium":
        ds, desc = collect(env, references.medium, size, rng), _describe(references.medium)
    elif regime == "mixed":
        if references.mixed is None:
            raise ConfigurationError("regime 'mixed' needs the medium policy's training history")
        if callable(references.mixed):
            ds, desc = references.mixed(size, rng)
        else:
            if len(references.mixed) < size:
                raise ConfigurationError("training history shorter than requested size")
            ds, desc = references.mixed.subset(slice(0, size)), "medium policy training history"
    else:
        if references.expert is None:
            raise ConfigurationError("regime 'medium_expert' needs an expert policy")
        n_medium = size - size // 2
        med = collect(env, references.medium, n_medium, rng)
        exp = collect(env, references.expert, size // 2, rng)
        ds = med.extend(exp)
        desc = f"{_describe(references.medium)} then {_describe(references.expert)}"
    ds.metadata.update({
        "env": env.name,
        "regime": regime,
        "policy": desc,
        "seed": seed,
        "created": _timestamp(),
        "state_dim": env.state_dim,
        "action_dim": env.action_dim,
        "action_low": np.asarray(env.action_low).tolist(),
        "action_high": np.asarray(env.action_high).tolist(),
    })
    return ds


def _describe(policy):
    return getattr(policy, "description", type(policy).__name__)
