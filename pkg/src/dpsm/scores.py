"""Non-conformity scores HPS, APS and RAPS.

All functions accept either a single probability vector of shape ``(K,)`` or
a batch of shape ``(n, K)``. Classes are ranked by descending probability;
ties are broken by ascending class index.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

PROB_ATOL = 1e-6


class ScoreKind(str, enum.Enum):
    HPS = "HPS"
    APS = "APS"
    RAPS = "RAPS"


@dataclass(frozen=True)
class ScoreSpec:
    """Which score to use, its RAPS parameters, and how U is drawn.

    ``randomization="sampled"`` draws one U per example from a caller-supplied
    generator; ``"fixed"`` uses the constant ``u`` everywhere.
    """

    kind: ScoreKind = ScoreKind.HPS
    raps_lambda: float = 0.01
    raps_kreg: int = 5
    randomization: str = "sampled"
    u: float = 1.0

    def __post_init__(self):
        kind = self.kind.upper() if isinstance(self.kind, str) and not isinstance(self.kind, ScoreKind) else self.kind
        object.__setattr__(self, "kind", ScoreKind(kind))
        if self.raps_lambda < 0:
            raise ValueError("raps_lambda must be non-negative")
        if self.raps_kreg < 1:
            raise ValueError("raps_kreg must be a positive integer")
        if self.randomization not in ("sampled", "fixed"):
            raise ValueError(f"unknown randomization policy {self.randomization!r}")
        if not 0.0 <= self.u <= 1.0:
            raise ValueError("fixed u must lie in [0, 1]")

    def fixed(self, u: float = 1.0) -> "ScoreSpec":
        return ScoreSpec(self.kind, self.raps_lambda, self.raps_kreg, "fixed", u)

    def max_score(self, k: int) -> float:
        if self.kind is ScoreKind.RAPS:
            return 1.0 + self.raps_lambda * max(0, k - self.raps_kreg)
        return 1.0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "raps_lambda": self.raps_lambda,
            "raps_kreg": self.raps_kreg,
            "randomization": self.randomization,
            "u": self.u,
        }


TRAINING_SCORE = ScoreSpec(ScoreKind.HPS, randomization="fixed", u=1.0)


def _as_batch(probs):
    p = np.asarray(probs, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if p.ndim != 2:
        raise ValueError("probs must be a vector or a 2-d batch")
    if not np.allclose(p.sum(axis=1), 1.0, atol=PROB_ATOL) or np.any(p < 0):
        raise ValueError("probability vectors must be non-negative and sum to 1")
    return p, single


def _check_labels(labels, n, k):
    y = np.broadcast_to(np.asarray(labels), (n,)).astype(np.int64)
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"label out of range for {k} classes")
    return y


def ranks(probs):
    """1-based descending-probability rank of every class, shape ``(n, K)``."""
    p = np.atleast_2d(probs)
    order = np.argsort(-p, axis=1, kind="stable")
    r = np.empty_like(order)
    np.put_along_axis(r, order, np.arange(1, p.shape[1] + 1)[None, :], axis=1)
    return r


def _u_vector(n, spec: ScoreSpec, u=None, rng=None):
    if u is not None:
        u = np.broadcast_to(np.asarray(u, dtype=np.float64), (n,))
        if np.any((u < 0) | (u > 1)):
            raise ValueError("u must lie in [0, 1]")
        return u
    if spec.randomization == "fixed":
        return np.full(n, spec.u)
    if rng is None:
        raise ValueError("sampled randomization needs an explicit random generator")
    return rng.random(n)


def _aps_all(p, u):
    """APS scores for every class: mass ranked strictly above plus u times own mass."""
    order = np.argsort(-p, axis=1, kind="stable")
    sorted_p = np.take_along_axis(p, order, axis=1)
    before = np.cumsum(sorted_p, axis=1) - sorted_p
    s_sorted = before + u[:, None] * sorted_p
    out = np.empty_like(p)
    np.put_along_axis(out, order, s_sorted, axis=1)
    return out


def _raps_penalty(p, spec: ScoreSpec):
    # k_reg >= K leaves the penalty identically zero
    return spec.raps_lambda * np.maximum(0, ranks(p) - spec.raps_kreg)


def score_all_classes(probs, spec: ScoreSpec = TRAINING_SCORE, u=None, rng=None):
    """Score of every candidate label.

    One U per example is shared by all K classes. ``u`` overrides the policy;
    otherwise a sampled spec draws from ``rng``.
    """
    p, single = _as_batch(probs)
    n = p.shape[0]
    if spec.kind is ScoreKind.HPS:
        out = 1.0 - p
    else:
        out = _aps_all(p, _u_vector(n, spec, u, rng))
        if spec.kind is ScoreKind.RAPS:
            out = out + _raps_penalty(p, spec)
    return out[0] if single else out


def true_label_scores(probs, labels, spec: ScoreSpec = TRAINING_SCORE, u=None, rng=None):
    p, single = _as_batch(probs)
    y = _check_labels(labels, p.shape[0], p.shape[1])
    s = score_all_classes(p, spec, u=u, rng=rng)
    out = s[np.arange(p.shape[0]), y]
    return float(out[0]) if single else out


def hps_score(probs, label) -> float:
    return true_label_scores(probs, label, ScoreSpec(ScoreKind.HPS))


def aps_score(probs, label, u: float) -> float:
    return true_label_scores(probs, label, ScoreSpec(ScoreKind.APS), u=u)


def raps_score(probs, label, u: float, spec: ScoreSpec) -> float:
    if spec.kind is not ScoreKind.RAPS:
        spec = ScoreSpec(ScoreKind.RAPS, spec.raps_lambda, spec.raps_kreg)
    return true_label_scores(probs, label, spec, u=u)


def score_vjp(probs, spec: ScoreSpec, grad_scores, u=None):
    """Pull an adjoint on the ``(n, K)`` score matrix back to the probabilities.

    Ranks are held fixed (scores are piecewise linear in probs), so RAPS has
    the same derivative as APS. Sampled specs must pass ``u`` explicitly.
    """
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    g = np.atleast_2d(np.asarray(grad_scores, dtype=np.float64))
    if spec.kind is ScoreKind.HPS:
        return -g
    n = p.shape[0]
    if u is None:
        if spec.randomization != "fixed":
            raise ValueError("score_vjp needs the u values used in the forward pass")
        u = np.full(n, spec.u)
    u = np.broadcast_to(np.asarray(u, dtype=np.float64), (n,))
    order = np.argsort(-p, axis=1, kind="stable")
    g_sorted = np.take_along_axis(g, order, axis=1)
    # S_(r) depends on p_(l) with weight 1 for l < r and u for l = r
    after = np.cumsum(g_sorted[:, ::-1], axis=1)[:, ::-1] - g_sorted
    gp_sorted = after + u[:, None] * g_sorted
    out = np.empty_like(p)
    np.put_along_axis(out, order, gp_sorted, axis=1)
    return out
