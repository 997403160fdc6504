"""Split conformal calibration and prediction-set construction."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core_math import QuantileLevel, empirical_quantile
from .losses import Batch
from .model import MlpModel, forward
from .scores import ScoreSpec, score_all_classes
from .seeding import derive_rng


@dataclass(frozen=True)
class CalibratedPredictor:
    model: MlpModel
    score: ScoreSpec
    threshold: float
    alpha: float
    calibration_size: int


@dataclass(frozen=True)
class PredictionSet:
    labels: frozenset
    size: int

    @classmethod
    def from_mask(cls, mask) -> "PredictionSet":
        labels = frozenset(int(i) for i in np.flatnonzero(mask))
        return cls(labels, len(labels))


def calibration_scores(model: MlpModel, cal: Batch, score: ScoreSpec, rng=None) -> np.ndarray:
    probs = forward(model, np.atleast_2d(cal.x))
    y = np.asarray(cal.y, dtype=np.int64)
    return score_all_classes(probs, score, rng=rng)[np.arange(len(y)), y]


def calibrate(model: MlpModel, cal: Batch, score: ScoreSpec, alpha, rng=None) -> CalibratedPredictor:
    """Threshold at the ``ceil((1-alpha)(m+1))``-th smallest calibration score."""
    level = alpha if isinstance(alpha, QuantileLevel) else QuantileLevel(float(alpha))
    s = calibration_scores(model, cal, score, rng)
    return CalibratedPredictor(model, score, empirical_quantile(s, level), level.alpha, len(s))


def predict_mask(predictor: CalibratedPredictor, x, rng=None, u=None) -> np.ndarray:
    """Boolean ``(n, K)`` membership matrix ``S(x, y) <= threshold``."""
    probs = forward(predictor.model, np.atleast_2d(x))
    scores = score_all_classes(probs, predictor.score, u=u, rng=rng)
    return scores <= predictor.threshold


def predict_set(predictor: CalibratedPredictor, x, rng=None, u=None) -> PredictionSet:
    return PredictionSet.from_mask(predict_mask(predictor, x, rng, u)[0])


def coverage_trial(
    model: MlpModel, cal: Batch, test: Batch, score: ScoreSpec, alpha, seed: int = 0
) -> tuple[float, float]:
    """Calibrate on ``cal``, evaluate on ``test``; returns (coverage, mean set size)."""
    pred = calibrate(model, cal, score, alpha, rng=derive_rng(seed, "conformal/cal"))
    mask = predict_mask(pred, test.x, rng=derive_rng(seed, "conformal/test"))
    y = np.asarray(test.y, dtype=np.int64)
    return float(mask[np.arange(len(y)), y].mean()), float(mask.sum(axis=1).mean())


def write_prediction_dump(path, mask, labels, example_ids=None) -> None:
    """CSV: example_id, true_label, set_size, covered, labels (semicolon-joined)."""
    mask = np.asarray(mask, dtype=bool)
    y = np.asarray(labels, dtype=np.int64)
    ids = np.arange(len(y)) if example_ids is None else np.asarray(example_ids)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["example_id", "true_label", "set_size", "covered", "labels"])
        for i in range(len(y)):
            members = np.flatnonzero(mask[i])
            w.writerow([
                int(ids[i]),
                int(y[i]),
                len(members),
                int(mask[i, y[i]]),
                ";".join(str(int(c)) for c in members),
            ])
