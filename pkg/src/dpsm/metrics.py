"""Evaluation metrics for prediction sets.

Sets are passed as boolean membership matrices of shape ``(n, K)``; lists of
:class:`~dpsm.conformal.PredictionSet` or label iterables are converted.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .losses import Batch, dm_conformal_loss
from .scores import TRAINING_SCORE
from .seeding import derive_rng

SSCV_STRATA = ((0, 0), (1, 1), (2, 3), (4, 6), (7, 10), (11, None))


def as_mask(sets, k: int | None = None) -> np.ndarray:
    if isinstance(sets, np.ndarray) and sets.dtype == bool and sets.ndim == 2:
        return sets
    members = [getattr(s, "labels", s) for s in sets]
    if k is None:
        k = 1 + max((max(m) for m in members if len(m)), default=0)
    mask = np.zeros((len(members), k), dtype=bool)
    for i, m in enumerate(members):
        mask[i, list(m)] = True
    return mask


def _covered(mask, labels):
    y = np.asarray(labels, dtype=np.int64)
    if len(y) != mask.shape[0]:
        raise ValueError("sets and labels differ in length")
    if len(y) == 0:
        raise ValueError("empty input")
    return mask[np.arange(len(y)), y]


def marginal_coverage(sets, labels) -> float:
    if isinstance(sets, np.ndarray):
        mask = as_mask(sets)
    else:
        members = [getattr(s, "labels", s) for s in sets]
        k = 1 + max([int(np.max(labels, initial=0)), *(max(m) for m in members if len(m))])
        mask = as_mask(members, k)
    return float(_covered(mask, labels).mean())


def avg_set_size(sets) -> float:
    mask = as_mask(sets)
    if mask.shape[0] == 0:
        raise ValueError("empty input")
    return float(mask.sum(axis=1).mean())


def avg_soft_size(model, q: float, batch: Batch, tau=0.1, spec=TRAINING_SCORE) -> float:
    return dm_conformal_loss(model, q, batch, tau, spec, need_grad=False).value


def per_class_coverage(sets, labels, k: int) -> np.ndarray:
    """Coverage per class; NaN for classes absent from ``labels``."""
    mask = as_mask(sets, k)
    cov = _covered(mask, labels)
    y = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(y, minlength=k)
    hits = np.bincount(y, weights=cov, minlength=k)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, hits / np.maximum(counts, 1), np.nan)


def per_class_size(sets, labels, k: int) -> np.ndarray:
    mask = as_mask(sets, k)
    y = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(y, minlength=k)
    sizes = np.bincount(y, weights=mask.sum(axis=1), minlength=k)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sizes / np.maximum(counts, 1), np.nan)


def cov_gap(sets, labels, alpha: float, k: int | None = None) -> float:
    """100 x mean over classes of |class coverage - (1 - alpha)|."""
    if k is None:
        k = sets.shape[1] if isinstance(sets, np.ndarray) else 1 + int(np.max(labels))
    cov = per_class_coverage(sets, labels, k)
    missing = np.isnan(cov)
    if missing.any():
        warnings.warn(f"cov_gap: classes {np.flatnonzero(missing).tolist()} absent; excluded")
    # cov - 1 + alpha rather than cov - (1 - alpha): exact when cov is 1
    return float(100.0 * np.mean(np.abs(cov[~missing] - 1.0 + alpha)))


def clip_strata(strata, k: int):
    out = []
    for lo, hi in strata:
        if lo > k:
            continue
        out.append((lo, k if hi is None else min(hi, k)))
    return tuple(out)


def sscv(sets, labels, alpha: float, bins=SSCV_STRATA) -> float:
    """Largest |stratum coverage - (1 - alpha)| over non-empty set-size strata."""
    mask = as_mask(sets)
    cov = _covered(mask, labels)
    size = mask.sum(axis=1)
    worst = 0.0
    for lo, hi in clip_strata(bins, mask.shape[1]):
        sel = (size >= lo) & (size <= hi)
        if sel.any():
            worst = max(worst, abs(float(cov[sel].mean()) - 1.0 + alpha))
    return worst


def _min_window_mean(values, min_len: int, hi: np.ndarray, iters: int = 60) -> np.ndarray:
    """Smallest mean over contiguous windows of length >= min_len, per row.

    Bisection on the answer c: a window (i, j] has mean <= c iff
    ``P[j] - c j <= P[i] - c i`` for the prefix sums P. ``hi`` is an upper
    bound (a window mean already known).
    """
    n = values.shape[1]
    prefix = np.concatenate([np.zeros((values.shape[0], 1)), np.cumsum(values, axis=1)], axis=1)
    idx = np.arange(n + 1)
    lo = np.full(values.shape[0], -1e-12)
    hi = hi.astype(np.float64).copy()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        b = prefix - mid[:, None] * idx
        best_start = np.maximum.accumulate(b[:, : n + 1 - min_len], axis=1)
        ok = np.any(b[:, min_len:] <= best_start + 1e-12, axis=1)
        hi = np.where(ok, mid, hi)
        lo = np.where(ok, lo, mid)
    # snap to the exact mean of an actual window: for each end j take the
    # start maximizing P[i] - hi * i, which is optimal once hi is tight
    b = (prefix - hi[:, None] * idx)[:, : n + 1 - min_len]
    run = np.maximum.accumulate(b, axis=1)
    start = np.maximum.accumulate(np.where(b == run, idx[: n + 1 - min_len], 0), axis=1)
    ends = idx[min_len:]
    means = (prefix[:, min_len:] - np.take_along_axis(prefix, start, axis=1)) / (ends - start)
    return means.min(axis=1)


def wsc(features, sets, labels, delta: float = 0.1, n_directions: int = 1000, seed: int = 0) -> float:
    """Worst coverage over slabs ``{a <= v'x <= b}`` holding at least ``delta`` of the data.

    Directions are uniform on the unit sphere; for each one the slab endpoints
    range over the sorted projections.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if n_directions < 1:
        raise ValueError("n_directions must be >= 1")
    x = np.asarray(features, dtype=np.float64)
    mask = as_mask(sets)
    cov = _covered(mask, labels).astype(np.float64)
    marg = float(cov.mean())
    if np.all(np.std(x, axis=0) == 0):
        warnings.warn("wsc: features have zero variance; returning marginal coverage")
        return marg
    n = len(cov)
    min_len = max(1, int(np.ceil(delta * n)))
    rng = derive_rng(seed, "metrics/wsc")
    worst = marg
    for start in range(0, n_directions, 256):
        v = rng.standard_normal((min(256, n_directions - start), x.shape[1]))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        order = np.argsort(x @ v.T, axis=0, kind="stable").T
        vals = cov[order]
        worst = min(worst, float(_min_window_mean(vals, min_len, np.full(len(v), marg)).min()))
    return worst


@dataclass
class MetricsReport:
    marg_cov: float
    avg_set_size: float
    avg_soft_size: float
    cov_gap: float
    sscv: float
    wsc: float
    per_class_coverage: list = field(default_factory=list)
    per_class_size: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)


def evaluate_sets(
    mask,
    labels,
    features,
    alpha: float,
    soft_size: float = float("nan"),
    wsc_delta: float = 0.1,
    wsc_directions: int = 1000,
    seed: int = 0,
) -> MetricsReport:
    mask = as_mask(mask)
    k = mask.shape[1]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pcc = per_class_coverage(mask, labels, k)
        pcs = per_class_size(mask, labels, k)
        gap = cov_gap(mask, labels, alpha, k)
    return MetricsReport(
        marg_cov=marginal_coverage(mask, labels),
        avg_set_size=avg_set_size(mask),
        avg_soft_size=float(soft_size),
        cov_gap=gap,
        sscv=sscv(mask, labels, alpha),
        wsc=wsc(features, mask, labels, wsc_delta, wsc_directions, seed),
        per_class_coverage=[None if np.isnan(c) else float(c) for c in pcc],
        per_class_size=[None if np.isnan(c) else float(c) for c in pcs],
    )
