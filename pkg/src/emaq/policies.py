"""Deployment and exploration policies, rollouts, and the online collect/train loop."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .behavior import AutoregressiveBehaviorModel, BehaviorConfig, FitConfig, TemperatureSpec, fit
from .envs import Environment, OfflineDataset, RandomPolicy, collect
from .errors import ConfigurationError, ValidationError
from .trainer import QEnsemble, ensemble_mix, make_optimizers, step_stream, target_uniforms, train_step

log = logging.getLogger(__name__)


@dataclass
class TestPolicy:
    """Sample N behavior actions and keep the one with the best ensemble score."""

    __test__ = False  # not a pytest class

    ensemble: QEnsemble
    behavior: AutoregressiveBehaviorModel
    n_samples: int
    lambda_mix: float = 1.0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValidationError("n_samples must be >= 1")

    def __call__(self, state, rng):
        return act_test(self, state, rng)


@dataclass
class ExplorePolicy:
    """Tempered proposal plus an optimistic mean + beta * std ensemble score."""

    ensemble: QEnsemble
    behavior: AutoregressiveBehaviorModel
    n_samples: int
    beta: float = 1.0
    temp: TemperatureSpec = field(default_factory=TemperatureSpec)

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValidationError("n_samples must be >= 1")
        if not (np.isfinite(self.beta) and self.beta >= 0):
            raise ValidationError("beta must be finite and >= 0")
        if self.beta > 0 and self.ensemble.num_q < 2:
            raise ConfigurationError("a std bonus (beta > 0) needs at least two Q networks")

    def __call__(self, state, rng):
        return act_explore(self, state, rng)


def candidate_scores(policy: TestPolicy, state, candidates):
    q = policy.ensemble.q_values(np.asarray(state)[None], candidates)  # [K, N, 1]
    return ensemble_mix(q, policy.lambda_mix)[:, 0]


def act_test(policy: TestPolicy, state, rng):
    state = np.asarray(state, dtype=np.float64)
    candidates = policy.behavior.sample(state[None], rng, n=policy.n_samples)  # [N, 1, D]
    if policy.n_samples == 1:
        return candidates[0, 0]
    scores = candidate_scores(policy, state, candidates)
    return candidates[int(np.argmax(scores)), 0]


def explore_scores(policy: ExplorePolicy, state, candidates):
    q = policy.ensemble.q_values(np.asarray(state)[None], candidates)[:, :, 0]  # [K, N]
    return q.mean(axis=0) + policy.beta * q.std(axis=0)  # population std


def act_explore(policy: ExplorePolicy, state, rng):
    state = np.asarray(state, dtype=np.float64)
    candidates = policy.behavior.sample(state[None], rng, n=policy.n_samples, tau=policy.temp.tau)
    scores = explore_scores(policy, state, candidates)
    return candidates[int(np.argmax(scores)), 0]


@dataclass
class ReturnStats:
    mean: float
    std: float
    min: float
    max: float
    returns: list
    lengths: list


def _stream(*key):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def evaluate_policy_rollouts(policy, env: Environment, episodes: int, rng) -> ReturnStats:
    """Undiscounted returns of full episodes (truncated at ``env.horizon``).

    Each episode takes one seed from ``rng``; the environment and the policy
    then draw from separate streams, the policy's re-keyed at every time step.
    Two policies evaluated with equally seeded ``rng`` therefore face the same
    environment noise, and sample-N policies see nested candidate sets.
    """
    if episodes < 1:
        raise ValidationError("episodes must be >= 1")
    returns, lengths = [], []
    for _ in range(episodes):
        ep_seed = int(rng.integers(2**63))
        env_rng = _stream(ep_seed, 0)
        state = env.reset(env_rng)
        total, t = 0.0, 0
        for t in range(1, env.horizon + 1):
            action = policy(state, _stream(ep_seed, 1, t))
            state, reward, terminal = env.step(state, action, env_rng)
            total += reward
            if terminal:
                break
        returns.append(total)
        lengths.append(t)
    r = np.asarray(returns)
    return ReturnStats(float(r.mean()), float(r.std()), float(r.min()), float(r.max()), returns, lengths)


@dataclass
class OnlineConfig:
    total_steps: int = 50_000
    seed_steps: int = 1000
    updates_per_phase: int | None = None  # defaults to M
    batch_size: int = 128
    q_lr: float = 1e-3
    refit_steps: int = 300
    refit_batch: int = 256
    mu_lr: float = 5e-4
    eval_episodes: int = 5
    eval_n: int | None = None
    seed: int = 0
    snapshot_at: tuple = ()


@dataclass
class OnlineResult:
    rows: list
    dataset: OfflineDataset
    snapshots: dict

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["phase", "env_steps", "updates", "mean_loss", "eval_return_mean", "eval_return_std"])
            for r in self.rows:
                w.writerow([r["phase"], r["env_steps"], r["updates"],
                            "" if np.isnan(r["mean_loss"]) else repr(r["mean_loss"]),
                            repr(r["eval_mean"]), repr(r["eval_std"])])


def _refit(env, dataset, behavior_config, fit_config, seed):
    model = AutoregressiveBehaviorModel(env.state_dim, env.action_low, env.action_high, behavior_config,
                                        rng=np.random.default_rng([seed, 1]))
    fit(model, dataset, fit_config)
    return model


def online_loop(policy: ExplorePolicy, env: Environment, batch_env_steps: int, config: OnlineConfig,
                behavior_config: BehaviorConfig | None = None, dataset: OfflineDataset | None = None):
    """Alternate ``M`` exploration steps with ``M`` ensemble updates.

    The behavior model is refit from scratch on the grown dataset at the start
    of each collection phase.  The exploration policy's ``behavior`` and
    ``ensemble`` are updated in place.
    """
    M = int(batch_env_steps)
    if M < 1:
        raise ValidationError("batch_env_steps must be >= 1")
    behavior_config = behavior_config or policy.behavior.config
    rng = np.random.default_rng([config.seed, 2])
    eval_rng = np.random.default_rng([config.seed, 3])
    batch_rng = np.random.default_rng([config.seed, 4])
    ensemble = policy.ensemble
    optimizers = make_optimizers(ensemble, config.q_lr)
    if dataset is None:
        dataset = OfflineDataset.empty(env.state_dim, env.action_dim, {"env": env.name})
    if config.seed_steps > 0:
        dataset = dataset.extend(collect(env, RandomPolicy(env), config.seed_steps, rng))
    fit_cfg = FitConfig(steps=config.refit_steps, batch_size=config.refit_batch,
                        learning_rate=config.mu_lr, seed=config.seed)
    eval_n = config.eval_n or policy.n_samples
    rows, snapshots = [], {}
    env_steps = updates = 0
    phase = 0
    state, t_in_episode = env.reset(rng), 0

    def evaluate():
        stats = evaluate_policy_rollouts(TestPolicy(ensemble, policy.behavior, eval_n, ensemble.lambda_mix),
                                         env, config.eval_episodes, eval_rng)
        return stats.mean, stats.std

    if len(dataset) > 0:
        policy.behavior = _refit(env, dataset, behavior_config, fit_cfg, config.seed)
    ev = evaluate()
    rows.append({"phase": 0, "env_steps": 0, "updates": 0, "mean_loss": float("nan"),
                 "eval_mean": ev[0], "eval_std": ev[1]})
    pending_snaps = sorted(config.snapshot_at)
    while env_steps < config.total_steps:
        phase += 1
        steps = min(M, config.total_steps - env_steps)
        cols = {k: [] for k in "s a r n t".split()}
        for _ in range(steps):
            action = act_explore(policy, state, rng)
            nxt, reward, terminal = env.step(state, action, rng)
            for k, v in zip("s a r n t".split(), (state, action, reward, nxt, terminal)):
                cols[k].append(v)
            state, t_in_episode = nxt, t_in_episode + 1
            if terminal or t_in_episode >= env.horizon:
                state, t_in_episode = env.reset(rng), 0
        dataset = dataset.extend(OfflineDataset(cols["s"], cols["a"], cols["r"], cols["n"], cols["t"]))
        env_steps += steps
        policy.behavior = _refit(env, dataset, behavior_config, fit_cfg, config.seed + phase)
        n_updates = steps if config.updates_per_phase is None else config.updates_per_phase
        losses = []
        for _ in range(n_updates):
            updates += 1
            idx = batch_rng.integers(0, len(dataset), size=config.batch_size)
            u = target_uniforms(step_stream(config.seed, updates), ensemble.n_samples, config.batch_size,
                                ensemble.action_dim)
            losses.append(train_step(ensemble, policy.behavior, dataset.subset(idx), optimizers, u))
        ev = evaluate()
        rows.append({"phase": phase, "env_steps": env_steps, "updates": updates,
                     "mean_loss": float(np.mean(losses)) if losses else float("nan"),
                     "eval_mean": ev[0], "eval_std": ev[1]})
        log.info("online phase %d steps %d return %.2f", phase, env_steps, ev[0])
        while pending_snaps and env_steps >= pending_snaps[0]:
            snapshots[pending_snaps.pop(0)] = (ensemble.copy(), copy.deepcopy(policy.behavior), len(dataset))
    return OnlineResult(rows, dataset, snapshots)
