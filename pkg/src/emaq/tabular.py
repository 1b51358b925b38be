"""Finite MDPs, tabular policies and exact dynamic programming.

Everything here is dense numpy: the MDPs we care about have at most a few
hundred states.  All containers are frozen and their arrays read-only, so
they can be shared freely.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import DivergenceError, StructuralError, ValidationError

PROB_TOL = 1e-12
DEFAULT_TOL = 1e-10
MAX_SWEEPS = 100_000
DIVERGENCE_PATIENCE = 100


def _frozen(arr, dtype=np.float64):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _check_distribution_rows(probs, what):
    if np.any(~np.isfinite(probs)):
        raise ValidationError(f"{what} contains non-finite entries")
    if np.any(probs < 0):
        raise ValidationError(f"{what} contains negative probabilities")
    err = np.abs(probs.sum(axis=-1) - 1.0)
    if np.any(err > PROB_TOL):
        raise ValidationError(f"{what} rows do not sum to 1 (max error {err.max():.3e})")


@dataclass(frozen=True)
class TabularMDP:
    transition: np.ndarray  # [S, A, S]
    reward: np.ndarray  # [S, A]
    gamma: float

    def __post_init__(self):
        transition = _frozen(self.transition)
        reward = _frozen(self.reward)
        if transition.ndim != 3 or transition.shape[0] != transition.shape[2]:
            raise StructuralError(f"transition must be [S, A, S], got {transition.shape}")
        if reward.shape != transition.shape[:2]:
            raise StructuralError(
                f"reward shape {reward.shape} does not match transition {transition.shape}"
            )
        if transition.shape[0] < 1 or transition.shape[1] < 1:
            raise StructuralError("MDP needs at least one state and one action")
        _check_distribution_rows(transition, "transition")
        if not np.all(np.isfinite(reward)):
            raise ValidationError("reward contains non-finite entries")
        if not (0.0 <= self.gamma < 1.0):
            raise ValidationError(f"gamma must lie in [0, 1), got {self.gamma}")
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    def to_json(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "gamma": self.gamma,
            "reward": self.reward.tolist(),
            "transition": self.transition.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TabularMDP":
        try:
            mdp = cls(np.asarray(doc["transition"], dtype=np.float64),
                      np.asarray(doc["reward"], dtype=np.float64),
                      float(doc["gamma"]))
        except KeyError as exc:
            raise StructuralError(f"MDP document missing field {exc}") from None
        if (mdp.num_states, mdp.num_actions) != (doc.get("num_states"), doc.get("num_actions")):
            raise StructuralError("num_states/num_actions disagree with tensor shapes")
        return mdp

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TabularMDP":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class DiscretePolicy:
    probs: np.ndarray  # [S, A]

    def __post_init__(self):
        probs = _frozen(self.probs)
        if probs.ndim != 2:
            raise StructuralError(f"policy must be [S, A], got {probs.shape}")
        _check_distribution_rows(probs, "policy")
        object.__setattr__(self, "probs", probs)

    @property
    def full_support(self) -> bool:
        return bool(np.all(self.probs > 0))

    @classmethod
    def uniform(cls, num_states, num_actions) -> "DiscretePolicy":
        return cls(np.full((num_states, num_actions), 1.0 / num_actions))

    @classmethod
    def deterministic(cls, actions, num_actions) -> "DiscretePolicy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, num_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)


@dataclass(frozen=True)
class QTable:
    values: np.ndarray  # [S, A]

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 2:
            raise StructuralError(f"Q table must be [S, A], got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("Q table contains non-finite entries")
        object.__setattr__(self, "values", values)


def _check_policy(mdp: TabularMDP, policy: DiscretePolicy) -> None:
    if policy.probs.shape != (mdp.num_states, mdp.num_actions):
        raise StructuralError(
            f"policy shape {policy.probs.shape} does not match MDP "
            f"({mdp.num_states}, {mdp.num_actions})"
        )


def policy_backup(mdp: TabularMDP, policy: DiscretePolicy, q: np.ndarray) -> np.ndarray:
    """One application of the evaluation operator for ``policy``."""
    v = np.einsum("sa,sa->s", policy.probs, q)
    return mdp.reward + mdp.gamma * (mdp.transition @ v)


def optimality_backup(mdp: TabularMDP, q: np.ndarray) -> np.ndarray:
    """One application of the Bellman optimality operator."""
    return mdp.reward + mdp.gamma * (mdp.transition @ q.max(axis=1))


def iterate_to_fixed_point(
    backup: Callable[[np.ndarray], np.ndarray],
    q0: np.ndarray,
    gamma: float,
    tol: float,
    max_sweeps: int = MAX_SWEEPS,
) -> np.ndarray:
    """Synchronous sweeps of a gamma-contraction until the residual is small.

    Stops once ``||TQ - Q|| <= tol * (1 - gamma)``, which puts the iterate
    within ``tol`` of the true fixed point (and therefore its own residual is
    below ``tol`` too).  If round-off makes that unreachable, stops at the
    floating-point floor as long as the residual is already below ``tol``.
    """
    if tol <= 0:
        raise ValidationError("tol must be positive")
    target = tol * (1.0 - gamma)
    q = np.array(q0, dtype=np.float64)
    best = np.inf
    stalled = 0
    growing = 0
    prev = np.inf
    for _ in range(max_sweeps):
        nxt = backup(q)
        residual = float(np.max(np.abs(nxt - q)))
        q = nxt
        if not np.isfinite(residual):
            raise DivergenceError("fixed-point iteration produced non-finite values")
        if residual <= target:
            return q
        growing = growing + 1 if residual > prev else 0
        if growing >= DIVERGENCE_PATIENCE:
            raise DivergenceError(f"residual grew for {growing} consecutive sweeps")
        if residual < best:
            best, stalled = residual, 0
        else:
            stalled += 1
        if stalled >= 50 and best <= tol:
            return q
        prev = residual
    raise DivergenceError(f"no convergence within {max_sweeps} sweeps (residual {residual:.3e})")


def evaluate_policy(mdp: TabularMDP, policy: DiscretePolicy, tol: float = DEFAULT_TOL) -> QTable:
    """Exact Q-function of ``policy`` via a dense linear solve on state values."""
    _check_policy(mdp, policy)
    if tol <= 0:
        raise ValidationError("tol must be positive")
    p_pi = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    r_pi = np.einsum("sa,sa->s", policy.probs, mdp.reward)
    v = np.linalg.solve(np.eye(mdp.num_states) - mdp.gamma * p_pi, r_pi)
    q = mdp.reward + mdp.gamma * (mdp.transition @ v)
    # polish away solver round-off so the residual contract holds as returned
    residual = np.max(np.abs(policy_backup(mdp, policy, q) - q))
    if residual > tol * (1.0 - mdp.gamma):
        q = iterate_to_fixed_point(lambda x: policy_backup(mdp, policy, x), q, mdp.gamma, tol)
    return QTable(q)


def q_learning_fixed_point(mdp: TabularMDP, tol: float = DEFAULT_TOL) -> QTable:
    q0 = np.zeros((mdp.num_states, mdp.num_actions))
    return QTable(iterate_to_fixed_point(lambda x: optimality_backup(mdp, x), q0, mdp.gamma, tol))


def greedy_actions(values: np.ndarray) -> np.ndarray:
    # np.argmax already returns the lowest index among ties
    return np.argmax(values, axis=-1)


def greedy_policy(q: QTable) -> DiscretePolicy:
    return DiscretePolicy.deterministic(greedy_actions(q.values), q.values.shape[1])


def bellman_residual(mdp: TabularMDP, policy: DiscretePolicy, q: QTable) -> float:
    return float(np.max(np.abs(policy_backup(mdp, policy, q.values) - q.values)))


def finite_horizon_return(
    mdp: TabularMDP,
    policy: DiscretePolicy,
    start: np.ndarray,
    horizon: int,
    terminal_states=(),
) -> float:
    """Expected undiscounted return over ``horizon`` steps from ``start``.

    ``terminal_states`` stop accumulating reward once entered, matching an
    episodic rollout that ends on a true terminal.
    """
    _check_policy(mdp, policy)
    alive = np.ones(mdp.num_states)
    alive[list(terminal_states)] = 0.0
    p_pi = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    r_pi = np.einsum("sa,sa->s", policy.probs, mdp.reward)
    dist = np.asarray(start, dtype=np.float64) * alive
    total = 0.0
    for _ in range(horizon):
        total += float(dist @ r_pi)
        dist = (dist @ p_pi) * alive
    return total


def random_mdp(num_states, num_actions, gamma, rng, reward_range=(-1.0, 1.0)) -> TabularMDP:
    """Dirichlet(1) transition rows and uniform rewards."""
    transition = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    # renormalise in float64 so rows meet the 1e-12 contract
    transition /= transition.sum(axis=-1, keepdims=True)
    reward = rng.uniform(*reward_range, size=(num_states, num_actions))
    return TabularMDP(transition, reward, gamma)


def random_policy(num_states, num_actions, rng, smoothing=0.0) -> DiscretePolicy:
    """Dirichlet(1) rows, optionally epsilon-mixed with uniform for full support."""
    probs = rng.dirichlet(np.ones(num_actions), size=num_states)
    probs = (1.0 - smoothing) * probs + smoothing / num_actions
    probs /= probs.sum(axis=-1, keepdims=True)
    return DiscretePolicy(probs)
