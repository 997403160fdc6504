"""Small feedforward softmax classifier with hand-written backpropagation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1
ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class GradientBundle:
    """Per-parameter gradients, shaped like the model they belong to."""

    weights: tuple
    biases: tuple

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        return GradientBundle(
            tuple(a + b for a, b in zip(self.weights, other.weights)),
            tuple(a + b for a, b in zip(self.biases, other.biases)),
        )

    def scale(self, c: float) -> "GradientBundle":
        return GradientBundle(tuple(c * w for w in self.weights), tuple(c * b for b in self.biases))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    @classmethod
    def zeros_like(cls, model: "MlpModel") -> "GradientBundle":
        return cls(
            tuple(np.zeros_like(w) for w in model.weights),
            tuple(np.zeros_like(b) for b in model.biases),
        )


@dataclass(frozen=True)
class MlpModel:
    layer_dims: tuple
    weights: tuple
    biases: tuple
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or min(dims) < 1:
            raise ValueError("layer_dims needs at least input and output sizes")
        object.__setattr__(self, "layer_dims", dims)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ValueError(f"layer {i} parameter shapes do not match layer_dims")
        if len(self.weights) != len(dims) - 1:
            raise ValueError("wrong number of layers")

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @classmethod
    def init(cls, layer_dims, rng: np.random.Generator, activation: str = "relu") -> "MlpModel":
        """Symmetric uniform init with bound sqrt(6 / (fan_in + fan_out)), zero biases."""
        dims = tuple(int(d) for d in layer_dims)
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            a = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(dims, tuple(weights), tuple(biases), activation)

    @classmethod
    def zeros(cls, layer_dims, activation: str = "relu") -> "MlpModel":
        dims = tuple(layer_dims)
        return cls(
            dims,
            tuple(np.zeros((i, o)) for i, o in zip(dims[:-1], dims[1:])),
            tuple(np.zeros(o) for o in dims[1:]),
            activation,
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def with_flat(self, theta) -> "MlpModel":
        theta = np.asarray(theta, dtype=np.float64)
        ws, bs, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(theta[pos:pos + w.size].reshape(w.shape))
            pos += w.size
            bs.append(theta[pos:pos + b.size].copy())
            pos += b.size
        if pos != theta.size:
            raise ValueError("flat parameter vector has the wrong length")
        return MlpModel(self.layer_dims, tuple(ws), tuple(bs), self.activation)


@dataclass
class ForwardCache:
    inputs: list = field(default_factory=list)  # input to each layer
    pre: list = field(default_factory=list)  # pre-activations of hidden layers
    probs: np.ndarray | None = None


def _act(model, z):
    return np.maximum(z, 0.0) if model.activation == "relu" else np.tanh(z)


def _act_grad(model, z, a):
    return (z > 0).astype(np.float64) if model.activation == "relu" else 1.0 - a * a


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def forward_logits(model: MlpModel, x, cache: ForwardCache | None = None):
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != model.layer_dims[0]:
        raise ValueError(f"expected {model.layer_dims[0]} features, got {h.shape[-1]}")
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        if cache is not None:
            cache.inputs.append(h)
        z = h @ w + b
        if i == last:
            return z
        h = _act(model, z)
        if cache is not None:
            cache.pre.append(z)


def forward(model: MlpModel, x):
    """Softmax probabilities for one feature vector or a batch of them."""
    return softmax(forward_logits(model, x))


def forward_with_cache(model: MlpModel, x):
    cache = ForwardCache()
    probs = softmax(forward_logits(model, np.atleast_2d(x), cache))
    cache.probs = probs
    return probs, cache


def softmax_vjp(probs, grad_probs):
    """Adjoint on the logits given an adjoint on the softmax output."""
    return probs * (grad_probs - np.sum(grad_probs * probs, axis=-1, keepdims=True))


def backward_logits(model: MlpModel, cache: ForwardCache, grad_logits) -> GradientBundle:
    """Reverse pass given d(loss)/d(logits) for every example in the cached batch."""
    delta = np.asarray(grad_logits, dtype=np.float64)
    n_layers = len(model.weights)
    gw, gb = [None] * n_layers, [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        gw[i] = cache.inputs[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            z = cache.pre[i - 1]
            delta = (delta @ model.weights[i].T) * _act_grad(model, z, cache.inputs[i])
    return GradientBundle(tuple(gw), tuple(gb))


def backward_scalar_loss(model: MlpModel, x, loss_adjoint) -> GradientBundle:
    """Gradient of a scalar loss given its adjoint with respect to the probabilities.

    ``loss_adjoint[i]`` is d(loss)/d(probs[i]); the result is linear in it.
    """
    probs, cache = forward_with_cache(model, x)
    adj = np.atleast_2d(np.asarray(loss_adjoint, dtype=np.float64))
    if adj.shape != probs.shape:
        raise ValueError(f"adjoint shape {adj.shape} does not match probs {probs.shape}")
    return backward_logits(model, cache, softmax_vjp(probs, adj))


def sgd_step(model: MlpModel, grads: GradientBundle, rate: float) -> MlpModel:
    if rate < 0:
        raise ValueError("rate must be non-negative")
    return MlpModel(
        model.layer_dims,
        tuple(w - rate * g for w, g in zip(model.weights, grads.weights)),
        tuple(b - rate * g for b, g in zip(model.biases, grads.biases)),
        model.activation,
    )


def save_checkpoint(model: MlpModel, path, extra: dict | None = None) -> None:
    """JSON checkpoint; floats are written with repr so they round-trip exactly."""
    record = {
        "version": CHECKPOINT_VERSION,
        "layer_dims": list(model.layer_dims),
        "activation": model.activation,
        "params": model.flat().tolist(),
    }
    if extra:
        record["extra"] = extra
    Path(path).write_text(json.dumps(record))


def load_checkpoint(path):
    """Returns ``(model, extra)``."""
    record = json.loads(Path(path).read_text())
    if record.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {record.get('version')}")
    template = MlpModel.zeros(record["layer_dims"], record["activation"])
    return template.with_flat(np.array(record["params"], dtype=np.float64)), record.get("extra", {})
