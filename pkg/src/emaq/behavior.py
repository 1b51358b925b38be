"""Discretized autoregressive behavior model mu(a|s).

A state MLP produces an embedding ``h``.  Action dimension ``i`` gets its own
MLP that reads ``h`` and the continuous prefix ``a[:i]`` and emits logits over
``num_bins`` equal-width bins.  Sampling walks the dimensions in order,
drawing a bin and then a uniform point inside it.

Bin ``k`` covers ``[low + k*w, low + (k+1)*w)``; the last bin also contains
``high``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import NonFiniteError, StructuralError, ValidationError
from .neural import AdamState, Mlp, adam_step, dumps_mlp, read_mlp

log = logging.getLogger(__name__)

HEAD_MODES = ("plain", "linear")


@dataclass(frozen=True)
class TemperatureSpec:
    tau: float = 1.0

    def __post_init__(self):
        if not (self.tau >= 1.0 and np.isfinite(self.tau)):
            raise ValidationError(f"temperature must be finite and >= 1, got {self.tau}")


@dataclass
class BehaviorConfig:
    num_bins: int = 40
    embed_hidden: tuple = (64, 64)
    embed_dim: int = 64
    head_hidden: tuple = (64, 64, 64)
    head_mode: str = "plain"
    lin_dim: int = 16


@dataclass
class FitConfig:
    steps: int = 2000
    batch_size: int = 256
    learning_rate: float = 5e-4
    seed: int = 0
    log_every: int = 0


def _log_softmax(logits):
    logits = logits.astype(np.float64, copy=False)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits, tau=1.0):
    return np.exp(_log_softmax(np.asarray(logits, dtype=np.float64) / tau))


class AutoregressiveBehaviorModel:
    def __init__(self, state_dim, action_low, action_high, config: BehaviorConfig | None = None,
                 rng=None, dtype=np.float32, _nets=None):
        self.config = config = config or BehaviorConfig()
        self.action_low = np.asarray(action_low, dtype=np.float64).reshape(-1)
        self.action_high = np.asarray(action_high, dtype=np.float64).reshape(-1)
        if self.action_low.shape != self.action_high.shape:
            raise StructuralError("action bounds differ in length")
        if not (np.all(np.isfinite(self.action_low)) and np.all(np.isfinite(self.action_high))
                and np.all(self.action_low < self.action_high)):
            raise ValidationError("action bounds must be finite with low < high")
        if config.num_bins < 2:
            raise ValidationError("num_bins must be >= 2")
        if config.head_mode not in HEAD_MODES:
            raise ValidationError(f"head_mode must be one of {HEAD_MODES}")
        self.state_dim = int(state_dim)
        self.num_bins = int(config.num_bins)
        self.bin_width = (self.action_high - self.action_low) / self.num_bins
        d = config.embed_dim
        if _nets is not None:
            self.state_embedder, self.dim_heads, self.prefix_maps = _nets
            return
        if rng is None:
            raise ValidationError("rng is required to initialise a new model")
        emb_dims = [self.state_dim, *config.embed_hidden, d]
        self.state_embedder = Mlp(emb_dims, ["relu"] * len(config.embed_hidden) + ["identity"],
                                  rng=rng, dtype=dtype)
        self.dim_heads, self.prefix_maps = [], []
        for i in range(self.action_dim):
            prefix_width = i if (config.head_mode == "plain" or i == 0) else config.lin_dim
            dims = [d + prefix_width, *config.head_hidden, self.num_bins]
            self.dim_heads.append(Mlp(dims, ["relu"] * len(config.head_hidden) + ["identity"],
                                      rng=rng, dtype=dtype))
            if config.head_mode == "linear" and i > 0:
                self.prefix_maps.append(Mlp([i, config.lin_dim], ["identity"], rng=rng, dtype=dtype))
            else:
                self.prefix_maps.append(None)

    @property
    def action_dim(self):
        return self.action_low.size

    @property
    def embed_dim(self):
        return self.config.embed_dim

    def networks(self):
        nets = [self.state_embedder, *self.dim_heads]
        return nets + [m for m in self.prefix_maps if m is not None]

    def params(self):
        return [p for net in self.networks() for p in net.params()]

    def astype(self, dtype):
        return AutoregressiveBehaviorModel(
            self.state_dim, self.action_low, self.action_high, self.config,
            _nets=(self.state_embedder.astype(dtype), [h.astype(dtype) for h in self.dim_heads],
                   [m.astype(dtype) if m is not None else None for m in self.prefix_maps]))

    # ---------------------------------------------------------- discretization

    def bin_index(self, actions) -> np.ndarray:
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape[-1] != self.action_dim:
            raise StructuralError(f"action width {actions.shape[-1]} != {self.action_dim}")
        if np.any(~np.isfinite(actions)) or np.any(actions < self.action_low) \
                or np.any(actions > self.action_high):
            raise ValidationError("action outside declared bounds")
        idx = np.floor((actions - self.action_low) / self.bin_width).astype(np.int64)
        return np.minimum(idx, self.num_bins - 1)

    def bin_to_action(self, bins, within) -> np.ndarray:
        """Point at fraction ``within`` in [0, 1) of each bin, kept strictly inside the bounds."""
        a = self.action_low + (bins + within) * self.bin_width
        lo = np.nextafter(self.action_low, self.action_high)
        hi = np.nextafter(self.action_high, self.action_low)
        return np.clip(a, lo, hi)

    # ------------------------------------------------------------ forward pass

    def embed(self, states):
        states = np.asarray(states)
        if states.shape[-1] != self.state_dim:
            raise StructuralError(f"state width {states.shape[-1]} != {self.state_dim}")
        return self.state_embedder(states)

    def _head_input(self, i, h, prefix):
        if i == 0:
            return h
        if self.prefix_maps[i] is not None:
            prefix = self.prefix_maps[i](prefix)
        return np.concatenate([h, np.asarray(prefix, dtype=h.dtype)], axis=-1)

    def head_logits(self, i, h, prefix):
        return self.dim_heads[i](self._head_input(i, h, prefix))

    def bin_probs(self, state, prefix, i, tau=1.0):
        """Bin distribution of dimension ``i`` given ``state`` and continuous ``prefix``."""
        h = self.embed(np.atleast_2d(state))
        prefix = np.atleast_2d(np.asarray(prefix, dtype=np.float64))[:, :i]
        probs = softmax(self.head_logits(i, h, prefix), tau)
        return probs[0] if np.ndim(state) == 1 else probs

    def log_prob(self, states, actions) -> np.ndarray:
        """Per-row sum of bin log-probabilities (float64)."""
        states = np.atleast_2d(states)
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        bins = self.bin_index(actions)
        h = self.embed(states)
        total = np.zeros(len(states))
        rows = np.arange(len(states))
        for i in range(self.action_dim):
            logp = _log_softmax(self.head_logits(i, h, actions[:, :i]))
            total += logp[rows, bins[:, i]]
        return total

    def nll_and_grads(self, states, actions):
        """Mean negative log-likelihood over the batch and its parameter gradients."""
        states = np.atleast_2d(states)
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        bins = self.bin_index(actions)
        n = len(states)
        rows = np.arange(n)
        d = self.embed_dim
        h, emb_cache = self.state_embedder.forward_cached(states)
        dh = np.zeros_like(h)
        head_grads, map_grads = [], []
        nll = 0.0
        for i in range(self.action_dim):
            prefix = actions[:, :i].astype(h.dtype)
            pm = self.prefix_maps[i]
            if i > 0 and pm is not None:
                mapped, pm_cache = pm.forward_cached(prefix)
                x = np.concatenate([h, mapped], axis=-1)
            else:
                x = np.concatenate([h, prefix], axis=-1) if i > 0 else h
            logits, cache = self.dim_heads[i].forward_cached(x)
            logp = _log_softmax(logits)
            nll -= logp[rows, bins[:, i]].sum()
            g = np.exp(logp)
            g[rows, bins[:, i]] -= 1.0
            grads, gx = self.dim_heads[i].backward(cache, (g / n).astype(h.dtype))
            head_grads.append(grads)
            dh += gx[:, :d]
            if i > 0 and pm is not None:
                map_grads.append(pm.backward(pm_cache, gx[:, d:])[0])
        emb_grads, _ = self.state_embedder.backward(emb_cache, dh)
        flat = list(emb_grads)
        for grads in head_grads:
            flat.extend(grads)
        for grads in map_grads:
            flat.extend(grads)
        return nll / n, flat

    # ---------------------------------------------------------------- sampling

    def sample_from_uniforms(self, states, uniforms, tau=1.0):
        """Deterministic sampler driven by ``uniforms[..., B, D, 2]``.

        Leading axes of ``uniforms`` index independent draws per state, so
        ``states`` of shape [B, S] with uniforms [N, B, D, 2] give actions
        [N, B, D].  Slot 0 picks the bin by inverse CDF, slot 1 the offset
        inside the bin.
        """
        states = np.atleast_2d(states)
        uniforms = np.asarray(uniforms, dtype=np.float64)
        lead = uniforms.shape[:-3]
        B = states.shape[0]
        if uniforms.shape[-3:] != (B, self.action_dim, 2):
            raise StructuralError(f"uniforms shape {uniforms.shape} != (..., {B}, {self.action_dim}, 2)")
        reps = int(np.prod(lead)) if lead else 1
        u = uniforms.reshape(reps, B, self.action_dim, 2)
        h = self.embed(states)
        actions = np.empty((reps, B, self.action_dim))
        for i in range(self.action_dim):
            if i == 0:
                probs = softmax(self.head_logits(0, h, None), tau)
                cdf = np.broadcast_to(np.cumsum(probs, axis=-1), (reps, B, self.num_bins))
            else:
                hh = np.broadcast_to(h, (reps,) + h.shape).reshape(reps * B, -1)
                logits = self.head_logits(i, hh, actions[:, :, :i].reshape(reps * B, i))
                cdf = np.cumsum(softmax(logits, tau), axis=-1).reshape(reps, B, self.num_bins)
            bins = np.minimum((cdf <= u[:, :, i, 0:1]).sum(axis=-1), self.num_bins - 1)
            actions[:, :, i] = self.action_low[i] + (bins + u[:, :, i, 1]) * self.bin_width[i]
        lo = np.nextafter(self.action_low, self.action_high)
        hi = np.nextafter(self.action_high, self.action_low)
        actions = np.clip(actions, lo, hi)
        return actions.reshape(lead + (B, self.action_dim))

    def sample(self, states, rng, n=None, tau=1.0):
        """``n=None``: one action per state; else ``n`` actions per state, [n, B, D]."""
        states = np.atleast_2d(states)
        shape = (states.shape[0], self.action_dim, 2)
        if n is not None:
            shape = (n,) + shape
        return self.sample_from_uniforms(states, rng.random(shape), tau)

    # ------------------------------------------------------------- checkpoints

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "behavior.bin", "wb") as fh:
            for net in self.networks():
                fh.write(dumps_mlp(net))
        sidecar = {
            "state_dim": self.state_dim,
            "action_low": self.action_low.tolist(),
            "action_high": self.action_high.tolist(),
            "num_bins": self.num_bins,
            "head_mode": self.config.head_mode,
            "config": asdict(self.config),
        }
        (directory / "behavior.json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "AutoregressiveBehaviorModel":
        directory = Path(directory)
        meta = json.loads((directory / "behavior.json").read_text(encoding="utf-8"))
        cfg = dict(meta["config"])
        cfg["embed_hidden"] = tuple(cfg["embed_hidden"])
        cfg["head_hidden"] = tuple(cfg["head_hidden"])
        config = BehaviorConfig(**cfg)
        dim = len(meta["action_low"])
        with open(directory / "behavior.bin", "rb") as fh:
            embedder = read_mlp(fh)
            heads = [read_mlp(fh) for _ in range(dim)]
            maps = [None] + [read_mlp(fh) if config.head_mode == "linear" else None
                             for _ in range(dim - 1)]
        return cls(meta["state_dim"], meta["action_low"], meta["action_high"], config,
                   _nets=(embedder, heads, maps))


# ------------------------------------------------------------------ functional


def log_prob_bins(model: AutoregressiveBehaviorModel, state, action) -> float:
    return float(model.log_prob(np.atleast_2d(state), np.atleast_2d(action))[0])


def sample(model: AutoregressiveBehaviorModel, state, rng) -> np.ndarray:
    return model.sample(np.atleast_2d(state), rng)[0]


def sample_tempered(model: AutoregressiveBehaviorModel, state, temp: TemperatureSpec, rng) -> np.ndarray:
    return model.sample(np.atleast_2d(state), rng, tau=temp.tau)[0]


def bin_entropy(probs) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    nz = probs[probs > 0]
    return float(-(nz * np.log(nz)).sum())


def fit(model: AutoregressiveBehaviorModel, dataset, config: FitConfig):
    """Maximum-likelihood fit on the (state, action) pairs of ``dataset``.

    Returns ``(model, loss_trace)``; the model is updated in place.
    """
    states = np.asarray(dataset.states)
    actions = np.asarray(dataset.actions, dtype=np.float64)
    if len(states) == 0:
        raise ValidationError("cannot fit a behavior model on an empty dataset")
    rng = np.random.default_rng(config.seed)
    params = model.params()
    opt = AdamState.for_params(params, learning_rate=config.learning_rate)
    trace = []
    for step in range(config.steps):
        idx = rng.integers(0, len(states), size=config.batch_size)
        loss, grads = model.nll_and_grads(states[idx], actions[idx])
        if not np.isfinite(loss):
            raise NonFiniteError("behavior NLL is not finite",
                                 {"step": step, "batch_indices": idx[:16].tolist()})
        adam_step(opt, params, grads)
        trace.append(loss)
        if config.log_every and step % config.log_every == 0:
            log.info("behavior fit step %d nll %.4f", step, loss)
    return model, np.asarray(trace)
