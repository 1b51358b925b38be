"""Experiment configuration, run directories and the per-mode pipelines.

Seed derivation: every component draws from ``SeedSequence([seed, k])``
where ``k`` is the stream id in :data:`STREAMS`.  Re-running one component
with the same master seed therefore reproduces it without replaying the
others.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .behavior import AutoregressiveBehaviorModel, BehaviorConfig, FitConfig, TemperatureSpec, fit
from .envs import (
    GridWorld,
    GridWorldConfig,
    PointMassConfig,
    RandomPolicy,
    ReferencePolicies,
    TabularEpsilonGreedy,
    collect,
    generate_dataset,
    gridworld_env,
    load_dataset,
    pointmass_env,
    save_dataset,
)
from .errors import ConfigurationError, EmaqError, VerificationError
from .exact import verify_theorems
from .policies import ExplorePolicy, OnlineConfig, TestPolicy, evaluate_policy_rollouts, online_loop
from .tabular import (
    DiscretePolicy,
    QTable,
    TabularMDP,
    finite_horizon_return,
    greedy_policy,
    q_learning_fixed_point,
    random_mdp,
    random_policy,
)
from .trainer import DESK_PROFILE, FULL_PROFILE, QEnsemble, TrainerConfig, train

log = logging.getLogger(__name__)

MODES = ("verify-theorems", "fit-behavior", "gen-data", "train-offline", "eval", "sweep-n", "online")
ENVS = ("gridworld", "pointmass")
STREAMS = {"behavior": 1, "trainer": 2, "env": 3, "eval": 4}
PROFILES = {"desk": DESK_PROFILE, "full": FULL_PROFILE}
# fields that do not change what is being measured, only where or which replicate
_RUN_LOCAL = ("seed", "seeds", "out", "mode")


@dataclass
class ExperimentConfig:
    mode: str = "train-offline"
    env: str = "gridworld"
    out: str = "runs/emaq"
    seed: int = 0
    seeds: list | None = None
    profile: str = "desk"
    # inputs
    dataset: str | None = None
    behavior: str | None = None
    checkpoint: str | None = None
    mdp: str | None = None
    # data generation
    regime: str = "medium"
    size: int = 20_000
    reference_steps: int = 50_000
    # EMaQ and the Q ensemble
    n_samples: int = 16
    n_list: list = field(default_factory=lambda: [1, 2, 4, 8, 16, 32, 64])
    num_q: int | None = None
    lambda_mix: float | None = None
    alpha_ema: float | None = None
    gamma: float | None = None
    hidden: list = field(default_factory=lambda: [64, 64])
    q_lr: float | None = None
    batch_size: int | None = None
    num_updates: int = 20_000
    eval_interval: int = 5000
    eval_episodes: int = 50
    # behavior model
    num_bins: int | None = None
    mu_lr: float = 5e-4
    mu_steps: int = 3000
    mu_batch: int = 256
    # exploration and the online loop
    tau: float = 5.0
    beta: float = 1.0
    batch_env_steps: int = 500
    total_steps: int = 50_000
    seed_steps: int = 1000
    refit_steps: int = 200
    online_eval_episodes: int = 5
    # exact engine
    num_states: int = 10
    num_actions: int = 4
    trials: int = 1000
    smoothing: float = 0.1

    def run_seeds(self):
        return list(self.seeds) if self.seeds else [self.seed]

    def to_json(self):
        return dataclasses.asdict(self)

    def key(self):
        """Everything that defines the measured configuration, minus replicate ids."""
        return {k: v for k, v in self.to_json().items() if k not in _RUN_LOCAL}


def _coerce(name, value, default):
    if value is None:
        return None
    if isinstance(default, bool):
        return bool(value)
    if isinstance(default, list) or name in ("seeds", "n_list", "hidden"):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        return [int(v) for v in value]
    if name in ("num_q", "batch_size", "num_bins") or isinstance(default, int):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigurationError(f"{name} must be an integer")
        return int(value)
    if name in ("lambda_mix", "alpha_ema", "gamma", "q_lr") or isinstance(default, float):
        return float(value)
    return value


def load_config(path=None, overrides=None, mode=None) -> ExperimentConfig:
    """Merge defaults, an optional JSON file and flag overrides (in that precedence order)."""
    values = {}
    if path is not None:
        try:
            values.update(json.loads(Path(path).read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} does not exist") from None
        except ValueError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from None
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if mode is not None:
        values["mode"] = mode
    defaults = ExperimentConfig()
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"unknown config fields: {', '.join(unknown)}")
    try:
        coerced = {k: _coerce(k, v, getattr(defaults, k)) for k, v in values.items()}
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad config value: {exc}") from None
    config = ExperimentConfig(**coerced)
    return resolve(config)


def resolve(config: ExperimentConfig) -> ExperimentConfig:
    """Fill profile- and environment-dependent defaults, then validate ranges."""
    if config.profile not in PROFILES:
        raise ConfigurationError(f"unknown profile {config.profile!r}; expected one of {sorted(PROFILES)}")
    updates = {k: v for k, v in PROFILES[config.profile].items() if getattr(config, k) is None}
    if config.num_bins is None:
        updates["num_bins"] = 4 if config.env == "gridworld" else 40
    if config.gamma is None:
        updates["gamma"] = GridWorldConfig().gamma if config.env == "gridworld" else 0.99
    config = dataclasses.replace(config, **updates)
    validate(config)
    return config


def validate(c: ExperimentConfig):
    problems = []
    if c.mode not in MODES:
        problems.append(f"mode must be one of {MODES}")
    if c.env not in ENVS:
        problems.append(f"env must be one of {ENVS}")
    if not 0.0 <= c.lambda_mix <= 1.0:
        problems.append("lambda_mix must lie in [0, 1]")
    if not 0.0 < c.alpha_ema < 1.0:
        problems.append("alpha_ema must lie in (0, 1)")
    if not 0.0 <= c.gamma < 1.0:
        problems.append("gamma must lie in [0, 1)")
    if c.n_samples < 1 or any(n < 1 for n in c.n_list):
        problems.append("N must be >= 1")
    if c.tau < 1.0:
        problems.append("tau must be >= 1")
    if c.beta < 0:
        problems.append("beta must be >= 0")
    for name in ("num_q", "batch_size", "mu_batch", "eval_episodes", "eval_interval", "size", "num_bins",
                 "batch_env_steps", "num_states", "num_actions", "trials"):
        if getattr(c, name) < 1:
            problems.append(f"{name} must be >= 1")
    for name in ("num_updates", "mu_steps", "total_steps", "seed_steps", "refit_steps"):
        if getattr(c, name) < 0:
            problems.append(f"{name} must be >= 0")
    for name in ("dataset", "behavior", "checkpoint", "mdp"):
        path = getattr(c, name)
        if path is not None and not Path(path).exists():
            problems.append(f"{name} path {path} does not exist")
    if problems:
        raise ConfigurationError("; ".join(problems))


def derive_seed(master: int, stream: str) -> int:
    return int(np.random.SeedSequence([int(master), STREAMS[stream]]).generate_state(1)[0])


def stream_rng(master: int, stream: str, *extra) -> np.random.Generator:
    return np.random.default_rng([derive_seed(master, stream), *extra])


# ------------------------------------------------------------------ run dirs


class RunDirectory:
    """Output directory guarded by a lockfile for the lifetime of one run."""

    LOCK = ".emaq.lock"

    def __init__(self, path):
        self.path = Path(path)
        self._locked = False

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path / self.LOCK, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigurationError(f"{self.path} is locked by another run "
                                     f"(remove {self.LOCK} if that run is gone)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        self._locked = True
        return self

    def __exit__(self, *exc):
        if self._locked:
            (self.path / self.LOCK).unlink(missing_ok=True)
            self._locked = False
        return False

    def file(self, name):
        return self.path / name

    def write_json(self, name, doc):
        self.file(name).write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n",
                                   encoding="utf-8")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else repr(float(v))
    return v


def error_report(exc: BaseException) -> dict:
    if isinstance(exc, EmaqError):
        return exc.to_dict()
    return {"kind": "internal", "message": f"{type(exc).__name__}: {exc}"}


# ------------------------------------------------------------------ building blocks


def make_env(config: ExperimentConfig):
    """``(env, mdp)``; ``mdp`` is None for environments without a tabular twin."""
    if config.env == "gridworld":
        return gridworld_env(GridWorldConfig(gamma=config.gamma))
    return pointmass_env(PointMassConfig()), None


def behavior_config(config: ExperimentConfig) -> BehaviorConfig:
    return BehaviorConfig(num_bins=config.num_bins)


def fit_behavior(env, dataset, config: ExperimentConfig, seed: int):
    model = AutoregressiveBehaviorModel(env.state_dim, env.action_low, env.action_high, behavior_config(config),
                                        rng=stream_rng(seed, "behavior", 0))
    _, trace = fit(model, dataset, FitConfig(steps=config.mu_steps, batch_size=config.mu_batch,
                                             learning_rate=config.mu_lr, seed=derive_seed(seed, "behavior")))
    return model, trace


def make_ensemble(env, config: ExperimentConfig, n_samples: int, seed: int) -> QEnsemble:
    return QEnsemble(env.state_dim, env.action_dim, num_q=config.num_q, hidden=tuple(config.hidden),
                     lambda_mix=config.lambda_mix, alpha_ema=config.alpha_ema, n_samples=n_samples,
                     gamma=config.gamma, rng=stream_rng(seed, "trainer", 0))


def trainer_config(config: ExperimentConfig, seed: int) -> TrainerConfig:
    return TrainerConfig(num_updates=config.num_updates, batch_size=config.batch_size, q_lr=config.q_lr,
                         eval_interval=config.eval_interval, eval_episodes=config.eval_episodes,
                         seed=derive_seed(seed, "trainer"))


class BehaviorPolicy:
    """Executes the behavior model directly (one sample per step)."""

    def __init__(self, model):
        self.model = model

    def __call__(self, state, rng):
        return self.model.sample(np.asarray(state, dtype=np.float64)[None], rng, n=1)[0, 0]


def evaluate(policy, env, config: ExperimentConfig, seed: int, episodes=None):
    """Rollouts on the eval stream; equal seeds give equal environment noise across policies."""
    return evaluate_policy_rollouts(policy, env, episodes or config.eval_episodes, stream_rng(seed, "eval"))


def online_config(config: ExperimentConfig, seed: int, total_steps=None, snapshot_at=()) -> OnlineConfig:
    return OnlineConfig(total_steps=config.total_steps if total_steps is None else total_steps,
                        seed_steps=config.seed_steps, batch_size=config.batch_size, q_lr=config.q_lr,
                        refit_steps=config.refit_steps, refit_batch=config.mu_batch, mu_lr=config.mu_lr,
                        eval_episodes=config.online_eval_episodes, seed=derive_seed(seed, "env"),
                        snapshot_at=tuple(snapshot_at))


def run_online(env, config: ExperimentConfig, seed: int, total_steps=None, snapshot_at=()):
    behavior = AutoregressiveBehaviorModel(env.state_dim, env.action_low, env.action_high, behavior_config(config),
                                           rng=stream_rng(seed, "behavior", 0))
    ensemble = make_ensemble(env, config, config.n_samples, seed)
    policy = ExplorePolicy(ensemble, behavior, config.n_samples, beta=config.beta, temp=TemperatureSpec(config.tau))
    result = online_loop(policy, env, config.batch_env_steps,
                         online_config(config, seed, total_steps, snapshot_at), behavior_config(config))
    return policy, result


REFERENCE_FRACTIONS = (0.1, 0.2, 0.3, 0.4, 0.5)


def reference_marks(budget: int):
    """Snapshot points (environment steps) used to derive the pointmass references."""
    return sorted({max(1, int(round(f * budget))) for f in REFERENCE_FRACTIONS} | {budget})


def pointmass_references(env, config: ExperimentConfig, seed: int) -> ReferencePolicies:
    """Train one online run of ``reference_steps`` steps and derive the references from it."""
    budget = config.reference_steps
    log.info("training pointmass reference policies for %d steps", budget)
    _, result = run_online(env, config, seed, total_steps=budget, snapshot_at=reference_marks(budget))
    return references_from_online(env, config, result, budget)


def references_from_online(env, config: ExperimentConfig, result, budget: int) -> ReferencePolicies:
    """medium: the test policy of the snapshot at half the budget.  expert: the
    final test policy.  mixed: the exploration policies of the snapshots at
    10%..50% of the budget, replayed in order with equal shares, standing in
    for the log of the medium policy's training.
    """
    marks = reference_marks(budget)
    k = len(REFERENCE_FRACTIONS)
    half, final = result.snapshots[marks[k - 1]], result.snapshots[budget]
    medium = TestPolicy(half[0], half[1], config.n_samples, config.lambda_mix)
    medium.description = f"test policy after {marks[k - 1]} of {budget} online steps"
    expert = TestPolicy(final[0], final[1], config.n_samples, config.lambda_mix)
    expert.description = f"test policy after {budget} online steps"
    explorers = [ExplorePolicy(result.snapshots[m][0], result.snapshots[m][1], config.n_samples,
                               beta=config.beta, temp=TemperatureSpec(config.tau)) for m in marks[:k]]

    def mixed(size, rng):
        share = -(-size // k)
        current = {"i": 0}

        def policy_at(state, r):
            return explorers[current["i"]](state, r)

        def on_step(i):
            current["i"] = min(i // share, k - 1)

        ds = collect(env, policy_at, size, rng, on_step=on_step)
        return ds, f"exploration policies of online snapshots at {marks[:k]}"

    return ReferencePolicies(medium, expert, mixed, notes={"reference_steps": budget})


def build_dataset(env, config: ExperimentConfig, seed: int, references=None):
    if config.dataset is not None:
        ds = load_dataset(config.dataset)
        if ds.metadata.get("env", env.name) != env.name:
            raise ConfigurationError(f"dataset was generated on {ds.metadata.get('env')}, not {env.name}")
        return ds
    if references is None and config.env == "pointmass" and config.regime != "random":
        references = pointmass_references(env, config, seed)
    return generate_dataset(env, config.regime, config.size, stream_rng(seed, "env"), references=references,
                            seed=seed)


def gridworld_reference_returns(env: GridWorld, mdp: TabularMDP, regime: str):
    """Exact undiscounted returns of the optimal and generating policies from the start cell."""
    q_star = q_learning_fixed_point(mdp).values

    def ret(pi):
        return finite_horizon_return(mdp, pi, env.start_distribution(), env.horizon, [env.goal_index])

    out = {"optimal_return": ret(greedy_policy(QTable(q_star))),
           "random_return": ret(DiscretePolicy.uniform(mdp.num_states, mdp.num_actions))}
    eps = {"medium": 0.5, "random": 1.0}.get(regime)
    if eps is not None:
        out["generating_policy_return"] = ret(TabularEpsilonGreedy(env, q_star, eps).tabular_policy())
    return out


# ------------------------------------------------------------------ modes


def run_verify_theorems(config: ExperimentConfig, run: RunDirectory):
    behavior = None
    if config.mdp is not None:
        doc = json.loads(Path(config.mdp).read_text(encoding="utf-8"))
        mdp = TabularMDP.from_json(doc)
        if "behavior" in doc:
            behavior = DiscretePolicy(np.asarray(doc["behavior"], dtype=np.float64))
    else:
        rng = stream_rng(config.seed, "env")
        mdp = random_mdp(config.num_states, config.num_actions, config.gamma, rng)
    if behavior is None:
        behavior = random_policy(mdp.num_states, mdp.num_actions, stream_rng(config.seed, "behavior"),
                                 smoothing=config.smoothing)
    report = verify_theorems(mdp, behavior, config.n_list, config.trials, derive_seed(config.seed, "eval"))
    run.write_json("theorems.json", report.to_json())
    rows = [(b["n_samples"], b["lhs"], b["rhs_expectation"], b["rhs_max"], b["bound_slack"]) for b in report.bounds]
    _write_csv(run.file("bounds.csv"), ["n_samples", "lhs", "rhs_expectation", "rhs_max", "bound_slack"], rows)
    from . import plotting
    plotting.plot_bounds(rows, run.file("bounds.png"))
    checks = {
        "contraction": report.contraction_ratio <= mdp.gamma + 1e-12,
        "monotonicity": report.monotonicity_violation <= 4e-10,
        "bound": report.bound_slack >= -1e-9,
    }
    summary = {"mode": config.mode, "config": config.key(), "seed": config.seed, "checks": checks,
               "metrics": {"contraction_ratio": report.contraction_ratio,
                           "monotonicity_violation": report.monotonicity_violation,
                           "bound_slack": report.bound_slack}}
    run.write_json("summary.json", summary)
    failed = {k: v for k, v in checks.items() if not v}
    if failed:
        raise VerificationError(f"checks failed: {', '.join(failed)}", failed=report.to_json())
    return summary


def run_gen_data(config: ExperimentConfig, out_file: Path):
    env, _ = make_env(config)
    ds = build_dataset(env, dataclasses.replace(config, dataset=None), config.seed)
    save_dataset(out_file, ds)
    return {"mode": config.mode, "transitions": len(ds), "metadata": ds.metadata}


def run_fit_behavior(config: ExperimentConfig, run: RunDirectory):
    env, _ = make_env(config)
    ds = build_dataset(env, config, config.seed)
    model, trace = fit_behavior(env, ds, config, config.seed)
    model.save(run.file("behavior"))
    _write_csv(run.file("fit_loss.csv"), ["step", "nll"], enumerate(trace.tolist(), start=1))
    from . import plotting
    plotting.plot_series(np.arange(1, len(trace) + 1), {"nll": trace}, run.file("fit_loss.png"),
                         xlabel="step", ylabel="negative log-likelihood")
    tail = float(np.mean(trace[-100:])) if len(trace) else float("nan")
    summary = {"mode": config.mode, "config": config.key(), "seed": config.seed,
               "metrics": {"final_nll": tail, "transitions": len(ds)}}
    run.write_json("summary.json", summary)
    return summary


def _load_or_fit_behavior(env, ds, config, run: RunDirectory | None, seed):
    if config.behavior is not None:
        return AutoregressiveBehaviorModel.load(config.behavior)
    model, trace = fit_behavior(env, ds, config, seed)
    if run is not None:
        model.save(run.file("behavior"))
        _write_csv(run.file("fit_loss.csv"), ["step", "nll"], enumerate(trace.tolist(), start=1))
    return model


def run_train_offline(config: ExperimentConfig, run: RunDirectory):
    env, mdp = make_env(config)
    ds = build_dataset(env, config, config.seed)
    behavior = _load_or_fit_behavior(env, ds, config, run, config.seed)
    ensemble = make_ensemble(env, config, config.n_samples, config.seed)

    def periodic(ens):
        stats = evaluate(TestPolicy(ens, behavior, config.n_samples, config.lambda_mix), env, config, config.seed)
        return stats.mean, stats.std

    ensemble, trace = train(ensemble, behavior, ds, trainer_config(config, config.seed), evaluate=periodic)
    ensemble.save(run.file("ensemble"), {"env": config.env})
    trace.write_csv(run.file("metrics.csv"), ensemble.num_q)
    from . import plotting
    plotting.plot_training(trace.rows, run.file("training.png"))
    final = trace.rows[-1]
    metrics = {"return_mean": final["eval_mean"], "return_std": final["eval_std"], "final_loss": final["mean_loss"]}
    if mdp is not None:
        metrics.update(gridworld_reference_returns(env, mdp, ds.metadata.get("regime", "")))
    summary = {"mode": config.mode, "config": config.key(), "seed": config.seed, "metrics": metrics}
    run.write_json("summary.json", summary)
    return summary


def run_eval(config: ExperimentConfig, run: RunDirectory):
    if config.behavior is None:
        raise ConfigurationError("eval needs a behavior checkpoint (behavior=...)")
    env, mdp = make_env(config)
    behavior = AutoregressiveBehaviorModel.load(config.behavior)
    rows, metrics = [], {}
    if config.checkpoint is not None:
        ensemble = QEnsemble.load(config.checkpoint)
        stats = evaluate(TestPolicy(ensemble, behavior, config.n_samples, ensemble.lambda_mix), env, config,
                         config.seed)
        metrics.update(return_mean=stats.mean, return_std=stats.std, return_min=stats.min, return_max=stats.max)
        rows += [("test", i, r, n) for i, (r, n) in enumerate(zip(stats.returns, stats.lengths))]
    elif config.n_samples != 1:
        raise ConfigurationError("eval with N > 1 needs an ensemble checkpoint (checkpoint=...)")
    base = evaluate(BehaviorPolicy(behavior), env, config, config.seed)
    metrics.update(behavior_return_mean=base.mean, behavior_return_std=base.std)
    rows += [("behavior", i, r, n) for i, (r, n) in enumerate(zip(base.returns, base.lengths))]
    if config.checkpoint is None:
        metrics.update(return_mean=base.mean, return_std=base.std, return_min=base.min, return_max=base.max)
    if mdp is not None:
        metrics.update(gridworld_reference_returns(env, mdp, ""))
    _write_csv(run.file("episodes.csv"), ["policy", "episode", "return", "length"], rows)
    summary = {"mode": config.mode, "config": config.key(), "seed": config.seed, "metrics": metrics}
    run.write_json("summary.json", summary)
    return summary


@dataclass
class SweepResult:
    """Per-N aggregate over seeds, sorted by N."""

    rows: list  # (N, mean_return, std_return, behavior_return)

    def write_csv(self, path):
        _write_csv(path, ["n_samples", "mean_return", "std_return", "behavior_return"], self.rows)


def run_sweep(config: ExperimentConfig, run: RunDirectory):
    env, mdp = make_env(config)
    ds = build_dataset(env, config, config.seed)
    n_list = sorted(set(config.n_list))
    per_run, behavior_returns = [], []
    traces = run.file("traces")
    traces.mkdir(exist_ok=True)
    for seed in config.run_seeds():
        behavior, _ = fit_behavior(env, ds, config, seed)
        behavior.save(run.file(f"checkpoints/seed{seed}/behavior"))
        base = evaluate(BehaviorPolicy(behavior), env, config, seed)
        behavior_returns.append(base.mean)
        for n in n_list:
            ensemble = make_ensemble(env, config, n, seed)

            def periodic(ens, n=n):
                s = evaluate(TestPolicy(ens, behavior, n, config.lambda_mix), env, config, seed)
                return s.mean, s.std

            ensemble, trace = train(ensemble, behavior, ds, trainer_config(config, seed), evaluate=periodic)
            ensemble.save(run.file(f"checkpoints/seed{seed}/n{n}"), {"env": config.env})
            trace.write_csv(traces / f"seed{seed}_n{n}.csv", ensemble.num_q)
            final = trace.rows[-1]
            per_run.append((seed, n, final["eval_mean"], final["eval_std"], base.mean))
            log.info("seed %d N %d return %.3f (behavior %.3f)", seed, n, final["eval_mean"], base.mean)
    _write_csv(run.file("runs.csv"), ["seed", "n_samples", "return_mean", "return_std", "behavior_return"],
               per_run)
    result = sweep_result(per_run, n_list, behavior_returns)
    result.write_csv(run.file("sweep.csv"))
    metrics = {f"return_n{n}": m for n, m, _, _ in result.rows}
    metrics["behavior_return"] = float(np.mean(behavior_returns))
    if mdp is not None:
        metrics.update(gridworld_reference_returns(env, mdp, ds.metadata.get("regime", "")))
    from . import plotting
    plotting.plot_sweep(result.rows, run.file("sweep.png"), optimal=metrics.get("optimal_return"))
    summary = {"mode": config.mode, "config": config.key(), "seed": config.seed, "seeds": config.run_seeds(),
               "metrics": metrics, "sweep": [list(r) for r in result.rows]}
    run.write_json("summary.json", summary)
    return summary


def sweep_result(per_run, n_list, behavior_returns) -> SweepResult:
    rows = []
    for n in sorted(n_list):
        vals = np.array([r[2] for r in per_run if r[1] == n])
        rows.append((n, float(vals.mean()), float(vals.std()), float(np.mean(behavior_returns))))
    return SweepResult(rows)


def run_online_mode(config: ExperimentConfig, run: RunDirectory):
    env, _ = make_env(config)
    policy, result = run_online(env, config, config.seed)
    result.write_csv(run.file("online.csv"))
    policy.ensemble.save(run.file("ensemble"), {"env": config.env})
    policy.behavior.save(run.file("behavior"))
    final = evaluate(TestPolicy(policy.ensemble, policy.behavior, config.n_samples, config.lambda_mix), env, config,
                     config.seed)
    rand = evaluate(RandomPolicy(env), env, config, config.seed)
    from . import plotting
    plotting.plot_online(result.rows, run.file("online.png"), random_return=rand.mean)
    metrics = {"return_mean": final.mean, "return_std": final.std, "random_return_mean": rand.mean,
               "random_return_std": rand.std, "phases": len(result.rows) - 1, "transitions": len(result.dataset)}
    summary = {"mode": config.mode, "config": config.key(), "seed": config.seed, "metrics": metrics}
    run.write_json("summary.json", summary)
    return summary


PIPELINES = {
    "verify-theorems": run_verify_theorems,
    "fit-behavior": run_fit_behavior,
    "train-offline": run_train_offline,
    "eval": run_eval,
    "sweep-n": run_sweep,
    "online": run_online_mode,
}


def run(config: ExperimentConfig, config_path=None) -> int:
    """Execute one experiment; returns the process exit status.

    On failure an ``error.json`` report is written (next to the output file
    for ``gen-data``) and the status is 1; on success any stale report from a
    previous attempt is removed, so a report exists exactly when the last run
    failed.
    """
    if config.mode == "gen-data":
        out_file = Path(config.out)
        out_file.parent.mkdir(parents=True, exist_ok=True)
        err = out_file.with_name(out_file.name + ".error.json")
        try:
            with RunDirectory(out_file.parent) as rd:
                if config_path is not None:
                    out_file.with_name(out_file.name + ".config.json").write_bytes(Path(config_path).read_bytes())
                run_gen_data(config, out_file)
        except Exception as exc:  # noqa: BLE001 - every failure becomes a report
            return _fail(err, exc)
        err.unlink(missing_ok=True)
        return 0
    err = Path(config.out) / "error.json"
    try:
        with RunDirectory(config.out) as rd:
            err.unlink(missing_ok=True)
            if config_path is not None:
                rd.file("config.json").write_bytes(Path(config_path).read_bytes())
            rd.write_json("resolved_config.json", config.to_json())
            PIPELINES[config.mode](config, rd)
    except Exception as exc:  # noqa: BLE001
        return _fail(err, exc)
    return 0


def _fail(path: Path, exc: BaseException) -> int:
    report = error_report(exc)
    log.error("%s: %s", report["kind"], report["message"])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
    return 1


# ------------------------------------------------------------------ summarize


def summarize(run_dirs, out_csv) -> list:
    """Mean and population std across runs of each scalar metric.

    Every run must carry a ``summary.json`` and all runs must share one
    configuration (seed aside).
    """
    missing = [str(d) for d in run_dirs if not (Path(d) / "summary.json").is_file()]
    if missing:
        raise ConfigurationError(f"no summary.json in: {', '.join(missing)}")
    docs = [(str(d), json.loads((Path(d) / "summary.json").read_text(encoding="utf-8"))) for d in run_dirs]
    if not docs:
        raise ConfigurationError("summarize needs at least one run directory")
    ref = (docs[0][1].get("mode"), docs[0][1].get("config"))
    odd = [d for d, doc in docs if (doc.get("mode"), doc.get("config")) != ref]
    if odd:
        raise ConfigurationError(f"runs with a different configuration than {docs[0][0]}: {', '.join(odd)}")
    names = sorted(set.intersection(*[set(k for k, v in doc["metrics"].items() if _is_number(v))
                                      for _, doc in docs]))
    rows = []
    for name in names:
        vals = np.array([float(doc["metrics"][name]) for _, doc in docs])
        rows.append((name, len(vals), float(vals.mean()), float(vals.std())))
    _write_csv(out_csv, ["metric", "runs", "mean", "std"], rows)
    return rows


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and v is not None
