import numpy as np
import pytest

from dpsm.conformal import (
    PredictionSet,
    calibrate,
    calibration_scores,
    coverage_trial,
    predict_mask,
    predict_set,
    write_prediction_dump,
)
from dpsm.core_math import InsufficientDataError, conformal_rank
from dpsm.losses import Batch
from dpsm.model import MlpModel, forward
from dpsm.scores import ScoreKind, ScoreSpec, score_all_classes
from helpers import batch_from_probs, random_problem

HPS = ScoreSpec()


def test_threshold_examples():
    hps = np.arange(1, 10) / 10
    m, cal = batch_from_probs(np.column_stack([1 - hps, hps]), np.zeros(9, dtype=int))
    assert calibrate(m, cal, HPS, 0.1).threshold == pytest.approx(0.9)
    zero = MlpModel.zeros([2, 4])
    pred = calibrate(zero, Batch(np.ones((30, 2)), np.arange(30) % 4), HPS, 0.1)
    assert pred.threshold == 0.75
    with pytest.raises(InsufficientDataError):
        calibrate(zero, Batch(np.ones((5, 2)), np.arange(5) % 4), HPS, 0.1)


def test_threshold_matches_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        m, cal = random_problem(rng, n=200)
        s = np.sort(calibration_scores(m, cal, HPS))
        assert calibrate(m, cal, HPS, 0.1).threshold == s[conformal_rank(200, 0.1) - 1]


def test_predict_set_examples():
    m, b = batch_from_probs([[0.7, 0.2, 0.1]], [0])
    pred = calibrate(m, Batch(np.repeat(b.x, 20, 0), np.zeros(20, dtype=int)), HPS, 0.1)
    from dataclasses import replace

    assert predict_set(replace(pred, threshold=0.5), b.x).labels == frozenset({0})
    assert predict_set(replace(pred, threshold=1.0), b.x).size == 3
    assert predict_set(replace(pred, threshold=0.1), b.x).size == 0
    # boundary score is included
    assert predict_set(replace(pred, threshold=0.8), b.x).labels == frozenset({0, 1})


def test_two_path_equivalence():
    rng = np.random.default_rng(1)
    m, b = random_problem(rng, n=50, k=5)
    spec = ScoreSpec(ScoreKind.APS)
    pred = calibrate(m, b, spec, 0.2, rng=np.random.default_rng(2))
    u = np.random.default_rng(3).random(50)
    mask = predict_mask(pred, b.x, u=u)
    probs = forward(m, b.x)
    for i in range(50):
        for y in range(5):
            one_hot_label = score_all_classes(probs[i], spec, u=u[i])[y]
            assert mask[i, y] == (one_hot_label <= pred.threshold)


def test_monotone_in_alpha():
    rng = np.random.default_rng(4)
    m, b = random_problem(rng, n=300, k=6)
    alphas = [0.02, 0.05, 0.1, 0.2, 0.4]
    preds = [calibrate(m, b, HPS, a) for a in alphas]
    masks = [predict_mask(p, b.x) for p in preds]
    for a, c in zip(preds, preds[1:]):
        assert a.threshold >= c.threshold
    for a, c in zip(masks, masks[1:]):
        assert np.all(a >= c)


def test_self_calibration_covers():
    rng = np.random.default_rng(5)
    m, b = random_problem(rng, n=500)
    cov, _ = coverage_trial(m, b, b, HPS, 0.1)
    assert cov >= 0.9


def test_small_alpha_gives_full_sets():
    rng = np.random.default_rng(6)
    m, b = random_problem(rng, n=2000, k=4)
    cov, apss = coverage_trial(m, b, b, ScoreSpec(ScoreKind.APS), 0.001)
    assert cov == 1.0 and apss > 3.0


def test_exchangeable_coverage_band():
    """Repeated random cal/test splits of iid data: mean coverage in the CP band."""
    rng = np.random.default_rng(7)
    m, _ = random_problem(rng, n=1, d=4, k=5)
    x = rng.standard_normal((3000, 4))
    probs = forward(m, x)
    y = np.array([rng.choice(5, p=p) for p in probs])
    covs = []
    for r in range(200):
        perm = np.random.default_rng(100 + r).permutation(3000)
        cal, test = perm[:1000], perm[1000:]
        cov, _ = coverage_trial(m, Batch(x[cal], y[cal]), Batch(x[test], y[test]), HPS, 0.1, seed=r)
        covs.append(cov)
    covs = np.array(covs)
    se = covs.std(ddof=1) / np.sqrt(covs.size)
    assert covs.mean() >= 0.9 - 3 * se
    assert covs.mean() <= 0.9 + 0.01 + 3 * se


def test_prediction_set_from_mask():
    s = PredictionSet.from_mask(np.array([True, False, True]))
    assert s.labels == frozenset({0, 2}) and s.size == 2


def test_prediction_dump(tmp_path):
    mask = np.array([[True, False, True], [False, False, False]])
    write_prediction_dump(tmp_path / "p.csv", mask, [2, 1], [10, 11])
    assert (tmp_path / "p.csv").read_text() == (
        "example_id,true_label,set_size,covered,labels\n10,2,2,1,0;2\n11,1,0,0,\n"
    )
