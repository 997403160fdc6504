import math

import numpy as np
import pytest

from dpsm.core_math import QuantileLevel, empirical_quantile, pinball_loss
from dpsm.data import Dataset, Split, gen_gaussian_mixture, split
from dpsm.losses import Batch, dm_conformal_loss, sa_conftr_loss
from dpsm.model import forward, sgd_step
from dpsm.scores import TRAINING_SCORE, score_all_classes
from dpsm.trainer import (
    TRACE_COLUMNS,
    Method,
    NumericalError,
    TrainConfig,
    accuracy,
    compute_epoch_diagnostics,
    init_model,
    split_halves,
    train,
    train_ce,
    train_dpsm,
    train_sa,
)


@pytest.fixture(scope="module")
def small():
    return split(gen_gaussian_mixture(k=4, d=5, n=2000, class_separation=2.0, seed=0), seed=0)


def _hps(model, batch):
    s = score_all_classes(forward(model, batch.x), TRAINING_SCORE)
    return s[np.arange(len(batch.y)), batch.y]


def test_config_validation_and_round_trip():
    cfg = TrainConfig(method="ConfTr", lam=0.5)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.to_dict()["lambda"] == 0.5
    for bad in (dict(lam=-1), dict(tau_sigmoid=0), dict(batch_size=0), dict(momentum=1.0), dict(alpha=1.0), dict(method="SGD")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"learning_rate": 0.1})


def test_lr_schedule_applies_once():
    cfg = TrainConfig(eta=1.0, lr_schedule=((2, 0.1), (4, 0.5)))
    assert [cfg.lr_at(e) for e in range(6)] == pytest.approx([1, 1, 0.1, 0.1, 0.05, 0.05])


def test_split_halves_disjoint_and_balanced():
    for n in (10, 11, 1201):
        d1, d2 = split_halves(n, 3)
        assert len(set(d1) & set(d2)) == 0
        assert abs(d1.size - d2.size) <= 1 and d1.size + d2.size == n


def test_dpsm_degenerates_to_ce_on_first_half(small):
    cfg = TrainConfig(method="DPSM", lam=0.0, gamma=0.0, epochs=3, seed=5)
    m_dpsm, q, _ = train_dpsm(cfg, small)
    d1, _ = split_halves(small.indices(Split.TRAIN).size, 5)
    d1_only = small.restricted(small.indices(Split.TRAIN)[d1])
    m_ce, _ = train_ce(TrainConfig(method="CE", epochs=3, seed=5), d1_only)
    np.testing.assert_array_equal(m_dpsm.flat(), m_ce.flat())
    assert q == cfg.q_init


def test_conftr_with_zero_lambda_is_ce(small):
    m_sa, _ = train_sa(TrainConfig(method="ConfTr", lam=0.0, epochs=2, seed=1), small)
    m_ce, _ = train_ce(TrainConfig(method="CE", epochs=2, seed=1), small)
    np.testing.assert_array_equal(m_sa.flat(), m_ce.flat())


def test_frozen_model_q_converges_to_quantile(small):
    cfg = TrainConfig(method="DPSM", eta=0.0, lam=0.0, gamma=0.01, epochs=1200, seed=2)
    model, q, trace = train_dpsm(cfg, small)
    assert len(trace) * 9 >= 10_000  # 600-row D1 gives 9 full batches per epoch
    d1, _ = split_halves(small.indices(Split.TRAIN).size, 2)
    b = small.batch(idx=small.indices(Split.TRAIN)[d1])
    target = empirical_quantile(_hps(model, b), QuantileLevel(0.1))
    assert abs(q - target) <= 2 * cfg.gamma


def test_frozen_model_qr_loss_non_increasing(small):
    cfg = TrainConfig(method="DPSM", eta=0.0, lam=0.0, gamma=0.001, epochs=40, seed=3)
    _, _, trace = train_dpsm(cfg, small)
    assert np.all(np.diff(trace.column("qr_gap")) <= 1e-12)


@pytest.mark.parametrize("method", list(Method))
def test_training_is_deterministic(small, method, tmp_path):
    cfg = TrainConfig(method=method, epochs=2, seed=4)
    a_model, a_q, a_trace = train(cfg, small)
    b_model, b_q, b_trace = train(cfg, small)
    np.testing.assert_array_equal(a_model.flat(), b_model.flat())
    a_trace.to_csv(tmp_path / "a.csv")
    b_trace.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert len(a_trace) == 2 and (a_q == b_q or (math.isnan(a_q) and math.isnan(b_q)))


def test_trace_columns(small, tmp_path):
    _, _, trace = train(TrainConfig(method="DPSM", epochs=1), small)
    trace.to_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == ",".join(TRACE_COLUMNS)


def test_zero_epochs_returns_initial_model(small):
    cfg = TrainConfig(method="CE", epochs=0, seed=9)
    model, trace = train_ce(cfg, small)
    np.testing.assert_array_equal(model.flat(), init_model(cfg, small.d, small.k).flat())
    assert len(trace) == 0


def test_ce_fits_separable_data():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((400, 2))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(int)
    ds = Dataset(x, y, 2, split_assignment=np.zeros(400, dtype=np.int8))
    model, _ = train_ce(TrainConfig(method="CE", epochs=200, hidden=(16,), lr_schedule=()), ds)
    assert accuracy(model, ds.batch(Split.TRAIN)) >= 0.99


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_reports_epoch(small):
    with pytest.raises(NumericalError) as err:
        train(TrainConfig(method="CE", eta=1e6, momentum=0.0, epochs=30), small)
    assert err.value.epoch >= 0 and f"epoch {err.value.epoch}" in str(err.value)


def test_diagnostics_gaps(small):
    cfg = TrainConfig(method="DPSM", seed=1)
    model = init_model(cfg, small.d, small.k)
    ref = small.batch(Split.TRAIN)
    s = _hps(model, ref)
    q_ref = empirical_quantile(s, cfg.level)
    rec = compute_epoch_diagnostics(model, q_ref, ref, cfg, 0)
    assert rec.q_ref == q_ref and rec.dm_gap == 0 and rec.qr_gap == 0 and rec.q_error == 0
    low = compute_epoch_diagnostics(model, float(s.min()) - 0.1, ref, cfg, 0)
    assert low.dm_gap < 0
    # second code path: full sort and direct loss sums
    q = 0.37
    rec = compute_epoch_diagnostics(model, q, ref, cfg, 0)
    q_sorted = np.sort(s)[math.ceil(0.9 * (s.size + 1)) - 1]
    assert rec.q_ref == q_sorted
    probs = forward(model, ref.x)
    sig = lambda t: 1 / (1 + np.exp(-(t - (1 - probs)) / cfg.tau_sigmoid))  # noqa: E731
    assert rec.dm_gap == pytest.approx(sig(q).sum(1).mean() - sig(q_sorted).sum(1).mean(), rel=1e-10)
    qr = lambda t: np.mean(np.where(s >= t, 0.9 * (s - t), 0.1 * (t - s)))  # noqa: E731
    assert rec.qr_gap == pytest.approx(qr(q) - qr(q_sorted), rel=1e-10)
    assert rec.soft_size == pytest.approx(sig(q).sum(1).mean(), rel=1e-12)


def test_conftr_step_pushes_boundary_scores_up():
    # every example identical; the quantile half is labelled with the least likely
    # class, so q_hat equals the largest class score and the whole set is (softly) in
    rng = np.random.default_rng(0)
    from helpers import random_problem

    model, _ = random_problem(rng, n=1, d=3, k=3)
    x = np.tile(rng.standard_normal(3), (40, 1))
    p = forward(model, x[:1])[0]
    worst = int(np.argmin(p))
    y = np.full(40, worst)
    batch = Batch(x, y)
    out = sa_conftr_loss(model, batch, 0.1, 0.05)
    assert out.aux["q_hat"] == pytest.approx(1 - p[worst])
    assert 2.0 < out.value < 3.0  # all but the boundary class softly included, K = 3
    stepped = sgd_step(model, out.grad_model, 0.5)
    rest = Batch(x[20:], y[20:])
    after = dm_conformal_loss(stepped, out.aux["q_hat"], rest, 0.05, need_grad=False).value
    assert after < out.value
    assert 1 - forward(stepped, x[:1])[0][worst] > 1 - p[worst]


def test_train_dispatch_q(small):
    _, q, trace = train(TrainConfig(method="CE", epochs=1), small)
    assert q == trace.records[-1].q_ref
    with pytest.raises(ValueError):
        train_dpsm(TrainConfig(method="CE"), small)
    with pytest.raises(ValueError):
        train_sa(TrainConfig(method="DPSM"), small)
