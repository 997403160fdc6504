"""Numerical checks of the distributional and optimization claims behind DPSM.

Covers the sampling distribution of mini-batch quantiles (exact and its
Beta-shaped large-n form), the bias and error scaling of batch quantiles
versus pinball-loss descent, the sharpness of the pinball objective, the
penalized objective, and the diagnostics for the score-spacing and soft-size
modelling assumptions.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .core_math import (
    QuantileLevel,
    _alpha,
    conformal_rank,
    empirical_quantile,
    kth_order_statistic,
    pinball_loss,
)
from .data import Split
from .losses import Batch, upper_objective
from .metrics import avg_soft_size
from .model import MlpModel, forward
from .scores import TRAINING_SCORE, score_all_classes
from .seeding import derive_rng


class InfeasibleError(ValueError):
    pass


class TieError(ValueError):
    pass


@dataclass(frozen=True)
class QuantilePmf:
    n: int
    s: int
    alpha: float
    k: int
    pmf: np.ndarray  # entry j - 1 is the probability of the j-th smallest score
    kind: str = "exact"

    @property
    def total(self) -> float:
        return float(np.sum(self.pmf))

    @property
    def support(self) -> np.ndarray:
        return np.arange(1, self.n + 1)

    def mean_index(self) -> float:
        return float(np.dot(self.support, self.pmf) / self.total)


def _batch_rank(n: int, s: int, alpha) -> int:
    a = _alpha(alpha)
    if not 1 <= s <= n:
        raise InfeasibleError(f"batch size s={s} must lie in [1, n={n}]")
    k = conformal_rank(s, a)
    if k > s:
        raise InfeasibleError(f"alpha infeasible for batch size: rank {k} > s={s}")
    return k


def batch_quantile_pmf_exact(n: int, s: int, alpha) -> QuantilePmf:
    """P(the j-th smallest of n scores is the batch quantile of a random s-subset).

    The batch quantile is the rank-``k = ceil((1-alpha)(s+1))`` order statistic
    of the subset, so the probability is ``C(j-1, k-1) C(n-j, s-k) / C(n, s)``.
    Computed with exact integers; each entry is the correctly rounded float.
    """
    k = _batch_rank(n, s, alpha)
    total = math.comb(n, s)
    pmf = np.zeros(n)
    for j in range(k, n - (s - k) + 1):
        pmf[j - 1] = math.comb(j - 1, k - 1) * math.comb(n - j, s - k) / total
    return QuantilePmf(n, s, _alpha(alpha), k, pmf, "exact")


def batch_quantile_pmf_beta(n: int, s: int, alpha) -> QuantilePmf:
    """Large-n form ``(e / n) * BetaPDF(j / n; k + 1, s - k)`` evaluated at every j.

    Not renormalized: ``QuantilePmf.total`` reports the mass it actually
    carries (about e for large n).
    """
    k = _batch_rank(n, s, alpha)
    a, b = k + 1, s - k
    if b < 1:
        raise InfeasibleError(f"degenerate Beta shape b = s - k = {b}")
    x = np.arange(1, n + 1) / n
    pmf = math.e / n * stats.beta.pdf(x, a, b)
    return QuantilePmf(n, s, _alpha(alpha), k, pmf, "beta")


def tv_distance(p, q, normalize: bool = True) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if normalize:
        p, q = p / p.sum(), q / q.sum()
    return 0.5 * float(np.abs(p - q).sum())


def monte_carlo_batch_pmf(n: int, s: int, alpha, draws: int, seed: int = 0, chunk: int = 20_000) -> np.ndarray:
    """Empirical frequency of each global rank being the batch quantile."""
    k = _batch_rank(n, s, alpha)
    rng = derive_rng(seed, "theory/mc_pmf")
    counts = np.zeros(n, dtype=np.int64)
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        # a uniformly random s-subset: the first s columns of argsort of iid keys
        keys = rng.random((m, n))
        subset = np.argpartition(keys, s - 1, axis=1)[:, :s]
        kth = np.partition(subset, k - 1, axis=1)[:, k - 1]
        counts += np.bincount(kth, minlength=n)
        done += m
    return counts / draws


def uniform_grid_scores(n: int) -> np.ndarray:
    return np.arange(1, n + 1) / n


def expected_batch_quantile_bias(n: int, s: int, alpha, score_model=uniform_grid_scores) -> float:
    """``E[batch quantile] - S_(ceil((1-alpha)(n+1)))`` under the exact pmf.

    ``score_model`` is either a callable returning n sorted scores or the
    sorted scores themselves.
    """
    sorted_scores = np.asarray(score_model(n) if callable(score_model) else score_model, dtype=np.float64)
    if sorted_scores.shape != (n,):
        raise ValueError("score model must provide n scores")
    if np.any(np.diff(sorted_scores) < 0):
        raise ValueError("scores must be sorted ascending")
    pmf = batch_quantile_pmf_exact(n, s, alpha)
    ref = sorted_scores[conformal_rank(n, _alpha(alpha)) - 1]
    return float(np.dot(pmf.pmf, sorted_scores) - ref)


def loglog_slope(x, y) -> float:
    """Least-squares slope of log|y| against log x."""
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.abs(np.asarray(y, float))), 1)[0])


# --- sharpness of the pinball objective -----------------------------------


@dataclass(frozen=True)
class HebReport:
    c_hat: float
    nu: int
    optimal_set: tuple
    min_loss: float
    n_probes: int
    violations: int


def _check_ties(scores):
    s = np.sort(np.asarray(scores, dtype=np.float64))
    if np.any(np.diff(s) == 0):
        raise TieError("scores contain ties")
    return s


def pinball_minimizers(scores, alpha) -> tuple:
    """Interval of minimizers of the mean pinball loss (tie-free scores).

    When ``(1-alpha) n`` is an integer r the loss is flat on
    ``[S_(r), S_(r+1)]``; otherwise the minimizer is ``S_(ceil((1-alpha) n))``.
    """
    s = _check_ties(scores)
    n = s.size
    target = (1.0 - _alpha(alpha)) * n
    r = round(target)
    if abs(target - r) < 1e-9 and 1 <= r < n:
        return float(s[r - 1]), float(s[r])
    k = min(max(math.ceil(target - 1e-9), 1), n)
    return float(s[k - 1]), float(s[k - 1])


def mean_pinball(q, scores, alpha) -> np.ndarray:
    q = np.atleast_1d(np.asarray(q, dtype=np.float64))
    s = np.asarray(scores, dtype=np.float64)
    return pinball_loss(q[:, None], s[None, :], alpha).mean(axis=1)


def heb_verify(scores, alpha, probe_grid=None) -> HebReport:
    """Empirical error-bound constant with exponent 1 for the mean pinball loss.

    ``c_hat`` is the smallest c with ``dist(q, U) <= c (F(q) - min F)`` on
    every probe, where U is the minimizing interval.
    """
    s = _check_ties(scores)
    lo, hi = pinball_minimizers(s, alpha)
    if probe_grid is None:
        probe_grid = np.linspace(s[0] - 1.0, s[-1] + 1.0, 2001)
    probes = np.asarray(probe_grid, dtype=np.float64)
    f_min = float(mean_pinball(lo, s, alpha)[0])
    gap = mean_pinball(probes, s, alpha) - f_min
    dist = np.maximum(lo - probes, 0.0) + np.maximum(probes - hi, 0.0)
    outside = dist > 0
    if np.any(gap[outside] <= 0):
        c_hat = math.inf
    else:
        c_hat = float(np.max(dist[outside] / gap[outside])) if outside.any() else 0.0
    # relative slack absorbs rounding in the ratio itself
    violations = int(np.sum(dist > c_hat * gap * (1 + 1e-12) + 1e-15))
    return HebReport(c_hat, 1, (lo, hi), f_min, probes.size, violations)


# --- penalized objective ----------------------------------------------------


def qr_minimizer(scores, alpha) -> float:
    """The ``ceil((1-alpha) n)``-th smallest score, always a pinball minimizer."""
    a = np.asarray(scores, dtype=np.float64)
    k = min(max(math.ceil((1.0 - _alpha(alpha)) * a.size - 1e-9), 1), a.size)
    return kth_order_statistic(a, k)


def penalty_gap(model: MlpModel, q: float, batch: Batch, alpha, spec=TRAINING_SCORE) -> float:
    """``QR(q) - QR(q*)`` on the batch, with q* an exact pinball minimizer."""
    probs = forward(model, batch.x)
    y = np.asarray(batch.y, dtype=np.int64)
    s = score_all_classes(probs, spec)[np.arange(len(y)), y]
    q_star = qr_minimizer(s, alpha)
    return float(np.mean(pinball_loss(q, s, alpha)) - np.mean(pinball_loss(q_star, s, alpha)))


def penalty_objective(
    model: MlpModel,
    q: float,
    batch: Batch,
    lam: float,
    sigma: float,
    alpha=0.1,
    tau=0.1,
    spec=TRAINING_SCORE,
) -> float:
    """Cross-entropy + lam * soft set size + sigma * pinball suboptimality of q.

    ``batch`` may be a :class:`~dpsm.data.Dataset`, in which case its training
    split is used.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if hasattr(batch, "indices"):  # a Dataset: use its training split
        batch = batch.batch(Split.TRAIN)
    upper = upper_objective(model, q, batch, batch, lam, tau, spec, need_grad=False).value
    return upper + sigma * penalty_gap(model, q, batch, alpha, spec)


# --- quantile error scaling -------------------------------------------------


@dataclass(frozen=True)
class ScoreGenerator:
    """Continuous score distribution with a known population quantile."""

    dist: object = field(default_factory=lambda: stats.uniform(0.0, 1.0))
    name: str = "uniform(0,1)"

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return self.dist.ppf(rng.random(size))

    def population_quantile(self, alpha) -> float:
        return float(self.dist.ppf(1.0 - _alpha(alpha)))


@dataclass(frozen=True)
class ScalingSetting:
    n: int
    s: int
    trials: int = 200
    alpha: float = 0.1
    epochs: int = 20
    step: float = 0.5


@dataclass
class ScalingRow:
    n: int
    s: int
    alpha: float
    trials: int
    sa_error: float
    sa_se: float
    dpsm_error: float
    dpsm_se: float


@dataclass
class ScalingReport:
    rows: list = field(default_factory=list)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows], dtype=np.float64)


def pinball_descent(scores: np.ndarray, alpha, s: int, epochs: int, step: float, rng) -> np.ndarray:
    """Mini-batch pinball subgradient descent on fixed scores, one run per row.

    Step ``step / sqrt(t + 1)``, batches drawn with replacement, ``epochs * n / s``
    steps, and the returned estimate is the average of the second half of the
    iterates. Starts from the midpoint of the score range.
    """
    a = _alpha(alpha)
    rows, n = scores.shape
    steps = max(1, epochs * n // s)
    q = 0.5 * (scores.min(axis=1) + scores.max(axis=1))
    avg = np.zeros(rows)
    burn = steps // 2
    ar = np.arange(rows)[:, None]
    for t in range(steps):
        b = scores[ar, rng.integers(0, n, size=(rows, s))]
        g = np.where(b > q[:, None], -(1.0 - a), a).mean(axis=1)
        q = q - step / math.sqrt(t + 1) * g
        if t >= burn:
            avg += q
    return avg / (steps - burn)


def quantile_error_scaling(config_grid, dataset_generator: ScoreGenerator | None = None, seed: int = 0) -> ScalingReport:
    """Mean absolute error to the population quantile, batch quantile vs descent.

    For each setting and trial, n scores are drawn; the batch (SA) estimate is
    the conformal quantile of one random s-subset, the descent estimate is
    :func:`pinball_descent` over all n scores with batch size s (skipped, and
    reported as NaN, when the setting has ``epochs=0``).
    """
    gen = dataset_generator or ScoreGenerator()
    report = ScalingReport()
    for i, st in enumerate(config_grid):
        try:
            k = _batch_rank(st.n, st.s, st.alpha)
        except InfeasibleError as exc:
            warnings.warn(f"skipping (n={st.n}, s={st.s}, alpha={st.alpha}): {exc}")
            continue
        target = gen.population_quantile(st.alpha)
        rng = derive_rng(seed, "theory/scaling", i)
        sa_err, dp_err = [], []
        chunk = max(1, min(st.trials, 4_000_000 // st.n))
        done = 0
        while done < st.trials:
            m = min(chunk, st.trials - done)
            scores = gen.sample(rng, (m, st.n))
            # a random s-subset of iid scores is itself iid: take the first s
            sa = np.partition(scores[:, : st.s], k - 1, axis=1)[:, k - 1]
            sa_err.append(np.abs(sa - target))
            if st.epochs > 0:
                dp_err.append(np.abs(pinball_descent(scores, st.alpha, st.s, st.epochs, st.step, rng) - target))
            done += m
        sa_err = np.concatenate(sa_err)
        dp_err = np.concatenate(dp_err) if dp_err else np.full(1, math.nan)
        se = lambda e: float(e.std(ddof=1) / math.sqrt(e.size)) if e.size > 1 else math.nan  # noqa: E731
        report.rows.append(
            ScalingRow(st.n, st.s, st.alpha, st.trials, float(sa_err.mean()), se(sa_err), float(dp_err.mean()), se(dp_err))
        )
    return report


# --- assumption diagnostics -------------------------------------------------


def bilipschitz_diagnostic(scores, trim: float = 0.01) -> tuple[float, float]:
    """Min and max of ``n * (S_(j+1) - S_(j))`` over the interior order statistics.

    The lowest and highest ``trim`` fraction of ranks are dropped.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size < 10:
        raise ValueError("need at least 10 scores")
    s = _check_ties(s)
    n = s.size
    j = np.arange(1, n)  # spacing between ranks j and j + 1
    keep = (j >= trim * n) & (j <= (1.0 - trim) * n)
    spacing = np.diff(s)[keep] * n
    return float(spacing.min()), float(spacing.max())


def soft_size_curve(model: MlpModel, batch: Batch, tau=0.1, coverage_grid=None, spec=TRAINING_SCORE):
    """``(coverage, threshold, soft size)`` rows; threshold is the coverage-level empirical quantile."""
    if coverage_grid is None:
        coverage_grid = np.round(np.arange(1, 50) * 0.02, 2)
    grid = np.asarray(coverage_grid, dtype=np.float64)
    if np.any((grid <= 0) | (grid >= 1)):
        raise ValueError("coverage grid must lie inside (0, 1)")
    probs = forward(model, batch.x)
    y = np.asarray(batch.y, dtype=np.int64)
    s = score_all_classes(probs, spec)[np.arange(len(y)), y]
    rows = []
    for c in grid:
        q = empirical_quantile(s, QuantileLevel(1.0 - c))
        rows.append((float(c), q, avg_soft_size(model, q, batch, tau, spec)))
    return rows
