"""Training objectives and their gradients.

Every loss takes a model and a batch and returns a :class:`LossValue`. Model
gradients are exact (hand-derived) and flow through the softmax and the
chosen training score; the quantile-threshold gradient is returned separately.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core_math import (
    InsufficientDataError,
    _alpha,
    _temperature,
    conformal_rank,
    kth_order_statistic,
    pinball_loss,
    pinball_subgradient_q,
    sigmoid,
    sigmoid_derivative,
)
from .model import (
    GradientBundle,
    MlpModel,
    backward_logits,
    forward_with_cache,
    log_softmax,
    softmax_vjp,
)
from .scores import TRAINING_SCORE, ScoreKind, ScoreSpec, score_all_classes, score_vjp

CUT_ALPHA_GRID = tuple(round(i / 100, 2) for i in range(1, 100))


class Batch(NamedTuple):
    x: np.ndarray
    y: np.ndarray


@dataclass
class LossValue:
    value: float
    grad_model: GradientBundle | None = None
    grad_q: float | None = None
    aux: dict = field(default_factory=dict)


def _fwd(model, batch, forward):
    if forward is not None:
        return forward
    return forward_with_cache(model, batch.x)


def _training_spec(spec: ScoreSpec) -> ScoreSpec:
    # sampled U has no gradient path; differentiable losses always see a fixed U
    return spec if spec.randomization == "fixed" else spec.fixed(1.0)


def _true_scores(probs, y, spec):
    s = score_all_classes(probs, spec)
    return s[np.arange(len(y)), y]


def cross_entropy(model: MlpModel, batch: Batch, need_grad: bool = True, forward=None) -> LossValue:
    """Mean negative log-likelihood of the true labels."""
    y = np.asarray(batch.y, dtype=np.int64)
    n = len(y)
    probs, cache = _fwd(model, batch, forward)
    logits = cache.inputs[-1] @ model.weights[-1] + model.biases[-1]
    logp = log_softmax(logits)
    value = float(-np.mean(logp[np.arange(n), y]))
    if not need_grad:
        return LossValue(value)
    g = probs.copy()
    g[np.arange(n), y] -= 1.0
    return LossValue(value, backward_logits(model, cache, g / n))


def _dm_pieces(probs, q, tau, spec):
    scores = score_all_classes(probs, spec)
    u = (q - scores) / tau
    return sigmoid(u), sigmoid_derivative(u) / tau


def dm_conformal_loss(
    model: MlpModel,
    q: float,
    batch: Batch,
    tau=0.1,
    spec: ScoreSpec = TRAINING_SCORE,
    need_grad: bool = True,
    forward=None,
) -> LossValue:
    """Mean soft set size ``sum_y sigmoid((q - S(x, y)) / tau)`` at threshold q."""
    tau = _temperature(tau)
    spec = _training_spec(spec)
    probs, cache = _fwd(model, batch, forward)
    n = probs.shape[0]
    soft, dsoft = _dm_pieces(probs, float(q), tau, spec)
    value = float(soft.sum(axis=1).mean())
    grad_q = float(dsoft.sum(axis=1).mean())
    if not need_grad:
        return LossValue(value, grad_q=grad_q)
    grad_scores = -dsoft / n
    grad_probs = score_vjp(probs, spec, grad_scores)
    grad = backward_logits(model, cache, softmax_vjp(probs, grad_probs))
    return LossValue(value, grad, grad_q)


def qr_loss(
    model: MlpModel,
    q: float,
    batch: Batch,
    level,
    spec: ScoreSpec = TRAINING_SCORE,
    forward=None,
) -> LossValue:
    """Mean pinball loss of threshold q against the true-label scores.

    Only the q-subgradient is returned; the model is not updated through this
    loss.
    """
    y = np.asarray(batch.y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("qr_loss needs a non-empty batch")
    spec = _training_spec(spec)
    probs, _ = _fwd(model, batch, forward)
    s = _true_scores(probs, y, spec)
    value = float(np.mean(pinball_loss(q, s, level)))
    grad_q = float(np.mean(pinball_subgradient_q(q, s, level)))
    return LossValue(value, grad_q=grad_q)


def sa_conftr_loss(
    model: MlpModel,
    batch: Batch,
    level,
    tau=0.1,
    spec: ScoreSpec = TRAINING_SCORE,
    need_grad: bool = True,
) -> LossValue:
    """Soft set size at a threshold estimated from half of the batch.

    The first ``len(batch) // 2`` examples estimate the threshold (conformal
    quantile of their true-label scores); the rest are scored. The threshold
    is held constant when differentiating. ``aux["q_hat"]`` reports it.
    """
    alpha = _alpha(level)
    spec = _training_spec(spec)
    y = np.asarray(batch.y, dtype=np.int64)
    half = len(y) // 2
    if half == 0 or conformal_rank(half, alpha) > half:
        raise InsufficientDataError(f"batch too small for alpha={alpha}: {len(y)} examples")
    x = np.asarray(batch.x)
    probs_q, _ = forward_with_cache(model, x[:half])
    q_hat = kth_order_statistic(_true_scores(probs_q, y[:half], spec), conformal_rank(half, alpha))
    out = dm_conformal_loss(model, q_hat, Batch(x[half:], y[half:]), tau, spec, need_grad)
    out.grad_q = None
    out.aux["q_hat"] = q_hat
    return out


def cut_loss(
    model: MlpModel,
    batch: Batch,
    alpha_grid=CUT_ALPHA_GRID,
    spec: ScoreSpec = TRAINING_SCORE,
    need_grad: bool = True,
) -> LossValue:
    """Largest gap ``|(1 - a) - q_hat(a)|`` over the alpha grid.

    ``q_hat(a)`` is the batch order statistic of rank ``ceil((1-a)(s+1))``,
    clipped to ``[1, s]``. The subgradient flows through the single score that
    attains the maximum.
    """
    grid = np.asarray(alpha_grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("alpha grid is empty")
    if np.any((grid <= 0) | (grid >= 1)):
        raise ValueError("alpha grid must lie inside (0, 1)")
    spec = _training_spec(spec)
    if spec.kind is ScoreKind.RAPS:
        raise ValueError("CUT compares scores with probabilities; use HPS or APS")
    y = np.asarray(batch.y, dtype=np.int64)
    s_count = len(y)
    if s_count == 0:
        raise ValueError("cut_loss needs a non-empty batch")
    probs, cache = forward_with_cache(model, batch.x)
    scores = _true_scores(probs, y, spec)
    order = np.argsort(scores, kind="stable")
    ranks = np.array([min(conformal_rank(s_count, a), s_count) for a in grid])
    idx = order[ranks - 1]
    dev = (1.0 - grid) - scores[idx]
    best = int(np.argmax(np.abs(dev)))
    value = float(abs(dev[best]))
    aux = {"alpha": float(grid[best]), "index": int(idx[best])}
    if not need_grad:
        return LossValue(value, aux=aux)
    grad_scores = np.zeros_like(probs)
    grad_scores[idx[best], y[idx[best]]] = -np.sign(dev[best])
    grad_probs = score_vjp(probs, spec, grad_scores)
    return LossValue(value, backward_logits(model, cache, softmax_vjp(probs, grad_probs)), aux=aux)


def upper_objective(
    model: MlpModel,
    q: float,
    batch1: Batch,
    batch2: Batch,
    lam: float,
    tau=0.1,
    spec: ScoreSpec = TRAINING_SCORE,
    need_grad: bool = True,
) -> LossValue:
    """Cross-entropy on ``batch1`` plus ``lam`` times the soft set size on ``batch2``."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    ce = cross_entropy(model, batch1, need_grad)
    if lam == 0:
        return LossValue(ce.value, ce.grad_model, 0.0)
    dm = dm_conformal_loss(model, q, batch2, tau, spec, need_grad)
    grad = ce.grad_model + dm.grad_model.scale(lam) if need_grad else None
    return LossValue(ce.value + lam * dm.value, grad, lam * dm.grad_q)
