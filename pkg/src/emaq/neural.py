"""Small fully-connected networks with hand-written backprop and Adam.

Parameters are stored in float32 by default; losses and other reductions
are accumulated in float64.  ``Mlp.astype(np.float64)`` gives a copy suitable
for finite-difference gradient checks.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ParseError, StructuralError, ValidationError

ACTIVATIONS = ("relu", "tanh", "identity")


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a, g):
    """Backprop ``g`` through the activation given pre-activation ``z`` and output ``a``."""
    if name == "relu":
        return g * (z > 0)
    if name == "tanh":
        return g * (1 - a * a)
    return g


class Mlp:
    """Dense feed-forward net: ``layer_dims[0] -> ... -> layer_dims[-1]``.

    ``activations[i]`` is applied after layer ``i``; use ``"identity"`` on the
    last layer for raw outputs such as logits or Q-values.
    """

    def __init__(self, layer_dims, activations, weights=None, biases=None, rng=None,
                 dtype=np.float32):
        layer_dims = [int(d) for d in layer_dims]
        if len(layer_dims) < 2 or any(d < 1 for d in layer_dims):
            raise StructuralError(f"bad layer dims {layer_dims}")
        if isinstance(activations, str):
            activations = [activations] * (len(layer_dims) - 1)
        activations = list(activations)
        if len(activations) != len(layer_dims) - 1 or any(a not in ACTIVATIONS for a in activations):
            raise StructuralError(f"need {len(layer_dims) - 1} activations from {ACTIVATIONS}")
        self.layer_dims = layer_dims
        self.activations = activations
        self.dtype = np.dtype(dtype)
        if weights is None:
            if rng is None:
                raise ValidationError("either weights or rng is required")
            weights, biases = [], []
            for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
                biases.append(np.zeros(fan_out))
        self.weights = [np.ascontiguousarray(w, dtype=self.dtype) for w in weights]
        self.biases = [np.ascontiguousarray(b, dtype=self.dtype) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (layer_dims[i], layer_dims[i + 1]) or b.shape != (layer_dims[i + 1],):
                raise StructuralError(f"layer {i} parameter shapes {w.shape}, {b.shape} "
                                      f"inconsistent with dims {layer_dims}")

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    def params(self):
        """Flat list ``[W0, b0, W1, b1, ...]`` of the live parameter arrays."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self):
        return Mlp(self.layer_dims, self.activations, [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases], dtype=self.dtype)

    def astype(self, dtype):
        return Mlp(self.layer_dims, self.activations, self.weights, self.biases, dtype=dtype)

    def assign(self, other: "Mlp"):
        for dst, src in zip(self.params(), other.params()):
            dst[...] = src

    def is_finite(self):
        return all(np.all(np.isfinite(p)) for p in self.params())

    def _check_input(self, x):
        x = np.asarray(x)
        if x.shape[-1] != self.in_dim:
            raise StructuralError(f"input width {x.shape[-1]} != {self.in_dim}")
        return x.astype(self.dtype, copy=False)

    def __call__(self, x):
        x = self._check_input(x)
        for w, b, act in zip(self.weights, self.biases, self.activations):
            x = x @ w
            x += b
            if act == "relu":
                np.maximum(x, 0, out=x)
            elif act == "tanh":
                np.tanh(x, out=x)
        return x

    def forward_cached(self, x):
        x = self._check_input(x)
        cache = [x]
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = x @ w + b
            x = _act(act, z)
            cache.append((z, x))
        return x, cache

    def backward(self, cache, output_grad):
        """Return ``(grads, input_grad)``; ``grads`` aligns with :meth:`params`.

        Gradients are summed over any leading batch axis.
        """
        g = np.asarray(output_grad, dtype=self.dtype)
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            z, a = cache[i + 1]
            g = _act_grad(self.activations[i], z, a, g)
            inp = cache[0] if i == 0 else cache[i][1]
            if g.ndim == 1:
                grads[2 * i] = np.outer(inp, g)
                grads[2 * i + 1] = g.copy()
            else:
                grads[2 * i] = inp.reshape(-1, inp.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                grads[2 * i + 1] = g.reshape(-1, g.shape[-1]).sum(axis=0)
            g = g @ self.weights[i].T
        return grads, g


def forward(net: Mlp, x) -> np.ndarray:
    return net(x)


def backward(net: Mlp, x, output_grad):
    """Parameter gradients of ``sum(output * output_grad)`` at input ``x``."""
    _, cache = net.forward_cached(x)
    grads, _ = net.backward(cache, output_grad)
    return grads


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kwargs):
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params],
                   **kwargs)


def adam_step(state: AdamState, params, grads):
    """Bias-corrected Adam update of ``params`` in place.

    Non-finite gradients are rejected before anything is modified.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise StructuralError("params, grads and optimizer state disagree in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient; update rejected")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    lr_t = state.learning_rate * np.sqrt(1 - b2 ** t) / (1 - b1 ** t)
    eps_t = state.epsilon * np.sqrt(1 - b2 ** t)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise StructuralError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        # algebraically identical to lr * m_hat / (sqrt(v_hat) + eps)
        p -= (lr_t * m / (np.sqrt(v) + eps_t)).astype(p.dtype, copy=False)
    return params, state


def finite_difference_check(loss_fn, params, grads, h=1e-5, max_checks=None, rng=None):
    """Largest relative disagreement between ``grads`` and central differences.

    ``loss_fn()`` must read ``params`` in place (float64 arrays).  Relative
    error is ``|g - fd| / max(|g|, |fd|, 1e-6)``.  ``max_checks`` samples a
    random subset of coordinates per parameter array.
    """
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        idx = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_checks, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = loss_fn()
            flat[i] = old - h
            down = loss_fn()
            flat[i] = old
            fd = (up - down) / (2 * h)
            err = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), 1e-6)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- checkpoints


def dumps_mlp(net: Mlp) -> bytes:
    """JSON header line followed by little-endian float32 parameters."""
    header = {"layer_dims": net.layer_dims, "activations": net.activations,
              "dtype": "<f4", "count": int(sum(p.size for p in net.params()))}
    blob = b"".join(np.asarray(p, dtype="<f4").tobytes() for p in net.params())
    return json.dumps(header).encode("utf-8") + b"\n" + blob


def read_mlp(stream) -> Mlp:
    line = stream.readline()
    try:
        header = json.loads(line.decode("utf-8"))
        dims, acts, count = header["layer_dims"], header["activations"], int(header["count"])
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise ParseError(f"bad network header: {exc}", offset=0) from None
    blob = stream.read(4 * count)
    if len(blob) != 4 * count:
        raise ParseError(f"truncated network body: expected {4 * count} bytes, got {len(blob)}",
                         offset=len(line) + len(blob))
    flat = np.frombuffer(blob, dtype="<f4")
    weights, biases, pos = [], [], 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out))
        pos += fan_in * fan_out
        biases.append(flat[pos:pos + fan_out])
        pos += fan_out
    if pos != count:
        raise ParseError("parameter count does not match layer dims")
    return Mlp(dims, acts, weights, biases)


def loads_mlp(data: bytes) -> Mlp:
    return read_mlp(io.BytesIO(data))


def save_mlp(path, net: Mlp) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_mlp(net))


def load_mlp(path) -> Mlp:
    with open(path, "rb") as fh:
        return read_mlp(fh)
