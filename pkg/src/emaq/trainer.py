"""Ensemble Q-learning with expected-max targets drawn from a frozen behavior model."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import NonFiniteError, StructuralError, ValidationError
from .neural import AdamState, Mlp, adam_step, dumps_mlp, read_mlp

log = logging.getLogger(__name__)


@dataclass
class TrainerConfig:
    num_updates: int = 20_000
    batch_size: int = 256
    q_lr: float = 1e-4
    eval_interval: int = 1000
    eval_episodes: int = 10
    seed: int = 0


# full-scale defaults and a scaled-down profile for a laptop
FULL_PROFILE = {"num_q": 8, "batch_size": 256, "q_lr": 1e-4, "lambda_mix": 1.0, "alpha_ema": 0.995}
DESK_PROFILE = {"num_q": 4, "batch_size": 128, "q_lr": 1e-3, "lambda_mix": 1.0, "alpha_ema": 0.995}


def ensemble_value(values, lambda_mix: float) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise StructuralError("ensemble_value needs at least one value")
    return float(lambda_mix * values.min() + (1.0 - lambda_mix) * values.max())


def ensemble_mix(values: np.ndarray, lambda_mix: float) -> np.ndarray:
    """``ensemble_value`` over axis 0 of a [K, ...] array."""
    return lambda_mix * values.min(axis=0) + (1.0 - lambda_mix) * values.max(axis=0)


class QEnsemble:
    def __init__(self, state_dim, action_dim, num_q=4, hidden=(64, 64), lambda_mix=1.0,
                 alpha_ema=0.995, n_samples=10, gamma=0.99, rng=None, _nets=None):
        if not 0.0 <= lambda_mix <= 1.0:
            raise ValidationError("lambda_mix must lie in [0, 1]")
        if not 0.0 < alpha_ema < 1.0:
            raise ValidationError("alpha_ema must lie in (0, 1)")
        if n_samples < 1:
            raise ValidationError("n_samples must be >= 1")
        if not 0.0 <= gamma < 1.0:
            raise ValidationError("gamma must lie in [0, 1)")
        self.state_dim, self.action_dim = int(state_dim), int(action_dim)
        self.hidden = tuple(hidden)
        self.lambda_mix, self.alpha_ema = float(lambda_mix), float(alpha_ema)
        self.n_samples, self.gamma = int(n_samples), float(gamma)
        if _nets is not None:
            self.online_nets, self.target_nets = _nets
        else:
            if num_q < 1:
                raise ValidationError("need at least one Q network")
            dims = [self.state_dim + self.action_dim, *self.hidden, 1]
            acts = ["relu"] * len(self.hidden) + ["identity"]
            self.online_nets = [Mlp(dims, acts, rng=rng) for _ in range(num_q)]
            self.target_nets = [net.copy() for net in self.online_nets]
        self.check_shapes()

    @property
    def num_q(self):
        return len(self.online_nets)

    def check_shapes(self):
        if len(self.online_nets) != len(self.target_nets):
            raise StructuralError("online and target lists differ in length")
        for a, b in zip(self.online_nets, self.target_nets):
            if a.layer_dims != b.layer_dims or any(p.shape != q.shape for p, q in zip(a.params(), b.params())):
                raise StructuralError("online/target network shapes differ")

    def _inputs(self, states, actions):
        states = np.asarray(states, dtype=np.float32)
        actions = np.asarray(actions, dtype=np.float32)
        states = np.broadcast_to(states, actions.shape[:-1] + states.shape[-1:])
        return np.concatenate([states, actions], axis=-1)

    def q_values(self, states, actions, target=False) -> np.ndarray:
        """Per-member Q estimates, shape [K, ...] (float64)."""
        x = self._inputs(states, actions)
        nets = self.target_nets if target else self.online_nets
        return np.stack([net(x)[..., 0] for net in nets]).astype(np.float64)

    def ema_update(self):
        a = self.alpha_ema
        for tgt, net in zip(self.target_nets, self.online_nets):
            for t, w in zip(tgt.params(), net.params()):
                # exact no-op when the two already agree
                t += (1.0 - a) * (w - t)

    def copy(self):
        return QEnsemble(self.state_dim, self.action_dim, hidden=self.hidden, lambda_mix=self.lambda_mix,
                         alpha_ema=self.alpha_ema, n_samples=self.n_samples, gamma=self.gamma,
                         _nets=([n.copy() for n in self.online_nets], [n.copy() for n in self.target_nets]))

    def config_dict(self):
        return {"state_dim": self.state_dim, "action_dim": self.action_dim, "num_q": self.num_q,
                "hidden": list(self.hidden), "lambda_mix": self.lambda_mix, "alpha_ema": self.alpha_ema,
                "n_samples": self.n_samples, "gamma": self.gamma}

    def save(self, directory, extra_config=None):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "ensemble.bin", "wb") as fh:
            for net in self.online_nets + self.target_nets:
                fh.write(dumps_mlp(net))
        doc = {"ensemble": self.config_dict(), **(extra_config or {})}
        (directory / "ensemble.json").write_text(json.dumps(doc, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        cfg = json.loads((directory / "ensemble.json").read_text(encoding="utf-8"))["ensemble"]
        with open(directory / "ensemble.bin", "rb") as fh:
            nets = [read_mlp(fh) for _ in range(2 * cfg["num_q"])]
        k = cfg.pop("num_q")
        return cls(hidden=cfg.pop("hidden"), _nets=(nets[:k], nets[k:]), **cfg)


def make_optimizers(ensemble: QEnsemble, learning_rate):
    return [AdamState.for_params(net.params(), learning_rate=learning_rate) for net in ensemble.online_nets]


def step_stream(seed: int, step: int) -> np.random.Generator:
    """Counter-based generator keyed on ``(seed, step)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, step])))


def target_uniforms(stream: np.random.Generator, n_samples, batch, action_dim):
    """Uniforms laid out sample-major, so the first N draws never depend on N' > N."""
    return stream.random((n_samples, batch, action_dim, 2))


def y_targets(ensemble: QEnsemble, behavior, rewards, next_states, terminals, uniforms):
    """Batched target: ``r + (1 - t) * gamma * max_j Ensemble(Q_target(s', a'_j))``."""
    next_states = np.atleast_2d(next_states)
    actions = behavior.sample_from_uniforms(next_states, uniforms)  # [N, B, D]
    values = ensemble_mix(ensemble.q_values(next_states[None], actions, target=True),
                          ensemble.lambda_mix)  # [N, B]
    best = values.max(axis=0)
    rewards = np.asarray(rewards, dtype=np.float64)
    terminals = np.asarray(terminals, dtype=np.float64)
    return rewards + (1.0 - terminals) * ensemble.gamma * best


def y_target(ensemble: QEnsemble, behavior, tr, rng) -> float:
    """Target for a single transition, sampling ``n_samples`` actions from ``rng``."""
    if tr.terminal:
        return float(tr.reward)
    u = target_uniforms(rng, ensemble.n_samples, 1, ensemble.action_dim)
    return float(y_targets(ensemble, behavior, [tr.reward], [tr.next_state], [tr.terminal], u)[0])


def train_step(ensemble: QEnsemble, behavior, batch, optimizers, uniforms):
    """One Adam step per member on the squared error to shared targets, then EMA.

    ``batch`` is any object with ``states, actions, rewards, next_states,
    terminals`` columns (an :class:`OfflineDataset` slice works).
    """
    if len(batch.rewards) == 0:
        raise ValidationError("empty batch")
    targets = y_targets(ensemble, behavior, batch.rewards, batch.next_states, batch.terminals, uniforms)
    x = ensemble._inputs(batch.states, batch.actions)
    n = len(targets)
    losses = np.empty(ensemble.num_q)
    for i, (net, opt) in enumerate(zip(ensemble.online_nets, optimizers)):
        out, cache = net.forward_cached(x)
        err = out[:, 0].astype(np.float64) - targets
        losses[i] = float(np.mean(err * err))
        if not np.isfinite(losses[i]):
            raise NonFiniteError(f"non-finite loss in member {i}", {
                "member": i, "target_range": [float(np.nanmin(targets)), float(np.nanmax(targets))],
                "reward_range": [float(np.min(batch.rewards)), float(np.max(batch.rewards))]})
        grads, _ = net.backward(cache, (2.0 / n * err)[:, None].astype(out.dtype))
        adam_step(opt, net.params(), grads)
    ensemble.ema_update()
    return losses


@dataclass
class TrainTrace:
    rows: list

    def write_csv(self, path, num_q):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", *[f"loss_{i}" for i in range(num_q)], "mean_loss",
                        "eval_return_mean", "eval_return_std"])
            for r in self.rows:
                w.writerow([r["step"], *[_fmt(v) for v in r["losses"]], _fmt(r["mean_loss"]),
                            _fmt(r["eval_mean"]), _fmt(r["eval_std"])])


def _fmt(v):
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    return repr(float(v))


def train(ensemble: QEnsemble, behavior, dataset, config: TrainerConfig, evaluate=None, optimizers=None):
    """Run ``config.num_updates`` steps on uniform minibatches drawn with replacement.

    ``evaluate(ensemble) -> (mean, std)`` is called at step 0 and every
    ``eval_interval`` steps.  Returns ``(ensemble, TrainTrace)``.
    """
    if len(dataset) == 0:
        raise ValidationError("cannot train on an empty dataset")
    rng = np.random.default_rng([config.seed, 0])
    optimizers = optimizers or make_optimizers(ensemble, config.q_lr)
    rows = []
    pending = []

    def record(step):
        losses = np.mean(pending, axis=0) if pending else np.full(ensemble.num_q, np.nan)
        ev = evaluate(ensemble) if evaluate is not None else (np.nan, np.nan)
        rows.append({"step": step, "losses": list(losses), "mean_loss": float(np.mean(losses)),
                     "eval_mean": ev[0], "eval_std": ev[1]})
        pending.clear()

    record(0)
    for step in range(1, config.num_updates + 1):
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        u = target_uniforms(step_stream(config.seed, step), ensemble.n_samples, config.batch_size,
                            ensemble.action_dim)
        pending.append(train_step(ensemble, behavior, dataset.subset(idx), optimizers, u))
        if step % config.eval_interval == 0:
            record(step)
            log.info("step %d loss %.4f eval %.3f", step, rows[-1]["mean_loss"], rows[-1]["eval_mean"])
    return ensemble, TrainTrace(rows)


def config_dict(config: TrainerConfig):
    return asdict(config)
