"""Shared oracles and fixtures for the test suite."""

from __future__ import annotations

import numpy as np

from dpsm.losses import Batch
from dpsm.model import MlpModel

ACCEPTANCE_LINES: list[str] = []


def report(criterion: str, passed: bool, detail: str) -> bool:
    line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def central_difference(fn, theta: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a flat vector."""
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (fn(theta + e) - fn(theta - e)) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def random_problem(rng, n=12, d=4, k=4, hidden=(6,), activation="tanh"):
    model = MlpModel.init([d, *hidden, k], rng, activation)
    # larger weights and non-zero biases so probabilities spread away from uniform
    theta = model.flat()
    model = model.with_flat(2.0 * theta + 0.1 * rng.standard_normal(theta.size))
    x = rng.standard_normal((n, d))
    y = rng.integers(0, k, size=n)
    return model, Batch(x, y)


def random_probs(rng, n, k, concentration=1.0):
    return rng.dirichlet(np.full(k, concentration), size=n)


def logit_model(k: int) -> MlpModel:
    """Single identity layer: feeding ``x = log p`` reproduces the probabilities p."""
    m = MlpModel.zeros([k, k])
    return MlpModel(m.layer_dims, (np.eye(k),), m.biases, m.activation)


def batch_from_probs(probs, labels) -> tuple[MlpModel, Batch]:
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    return logit_model(p.shape[1]), Batch(np.log(p), np.asarray(labels))
