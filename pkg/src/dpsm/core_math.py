"""Scalar and vector primitives shared across the package.

Everything here works on plain floats or numpy arrays and is pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_TEMPERATURE = 0.1


class InsufficientDataError(ValueError):
    """Raised when there are too few scores for the requested quantile level."""


@dataclass(frozen=True)
class SmoothedIndicatorParams:
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if not (math.isfinite(self.temperature) and self.temperature > 0):
            raise ValueError(f"temperature must be positive, got {self.temperature}")


@dataclass(frozen=True)
class QuantileLevel:
    """Target mis-coverage level alpha in (0, 1)."""

    alpha: float

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")


def _alpha(level) -> float:
    return level.alpha if isinstance(level, QuantileLevel) else QuantileLevel(float(level)).alpha


def _temperature(params) -> float:
    if isinstance(params, SmoothedIndicatorParams):
        return params.temperature
    return SmoothedIndicatorParams(float(params)).temperature


def sigmoid(u):
    """Logistic function in branch form; never exponentiates a positive argument."""
    u = np.asarray(u, dtype=np.float64)
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out if out.ndim else float(out)


def sigmoid_derivative(u):
    """d sigmoid / du = exp(-|u|) / (1 + exp(-|u|))^2, symmetric in u."""
    e = np.exp(-np.abs(np.asarray(u, dtype=np.float64)))
    out = e / (1.0 + e) ** 2
    return out if np.ndim(out) else float(out)


def _check_finite(*values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite input to smoothed indicator")


def smoothed_indicator(score, threshold, params=DEFAULT_TEMPERATURE):
    """Soft version of ``1[score <= threshold]``: sigmoid((threshold - score) / tau)."""
    tau = _temperature(params)
    _check_finite(score, threshold)
    return sigmoid((np.asarray(threshold, dtype=np.float64) - score) / tau)


def smoothed_indicator_grad_q(score, threshold, params=DEFAULT_TEMPERATURE):
    """Derivative of :func:`smoothed_indicator` with respect to the threshold.

    Bounded above by ``1 / (4 * tau)``, attained when ``score == threshold``.
    The derivative with respect to ``score`` is the negative of this value.
    """
    tau = _temperature(params)
    _check_finite(score, threshold)
    u = (np.asarray(threshold, dtype=np.float64) - score) / tau
    return sigmoid_derivative(u) / tau


def pinball_loss(q, s, level):
    """Pinball loss of quantile prediction ``q`` at observation ``s``.

    ``(1 - alpha) * (s - q)`` when ``s >= q`` and ``alpha * (q - s)`` otherwise,
    so its minimizer over q is the (1 - alpha)-quantile of s.
    """
    alpha = _alpha(level)
    diff = np.asarray(s, dtype=np.float64) - q
    out = np.where(diff >= 0, (1.0 - alpha) * diff, -alpha * diff)
    return out if out.ndim else float(out)


def pinball_subgradient_q(q, s, level):
    """Subgradient of :func:`pinball_loss` in q; returns ``+alpha`` at the kink."""
    alpha = _alpha(level)
    out = np.where(np.asarray(s, dtype=np.float64) > q, -(1.0 - alpha), alpha)
    return out if out.ndim else float(out)


def conformal_rank(m: int, alpha: float) -> int:
    """1-based rank ``ceil((1 - alpha) * (m + 1))`` of the conformal quantile."""
    # guard against (1 - alpha) * (m + 1) landing a hair above an integer
    x = (1.0 - alpha) * (m + 1)
    k = math.ceil(x - 1e-9 * max(1.0, abs(x)))
    return max(k, 1)


def kth_order_statistic(scores, k: int) -> float:
    """k-th smallest value (1-based) via linear-time selection."""
    a = np.asarray(scores, dtype=np.float64).ravel()
    if not 1 <= k <= a.size:
        raise IndexError(f"order statistic k={k} out of range for {a.size} values")
    return float(np.partition(a, k - 1)[k - 1])


def empirical_quantile(scores, level) -> float:
    """Conformal empirical quantile: the ``ceil((1-alpha)(m+1))``-th smallest score."""
    alpha = _alpha(level)
    a = np.asarray(scores, dtype=np.float64).ravel()
    m = a.size
    if m == 0:
        raise InsufficientDataError("insufficient calibration data: no scores")
    k = conformal_rank(m, alpha)
    if k > m:
        raise InsufficientDataError(
            f"insufficient calibration data: need rank {k} of {m} scores at alpha={alpha}"
        )
    return kth_order_statistic(a, k)
