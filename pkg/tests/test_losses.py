import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpsm.core_math import InsufficientDataError, conformal_rank, pinball_loss
from dpsm.losses import (
    CUT_ALPHA_GRID,
    Batch,
    cross_entropy,
    cut_loss,
    dm_conformal_loss,
    qr_loss,
    sa_conftr_loss,
    upper_objective,
)
from dpsm.model import MlpModel, forward
from dpsm.scores import ScoreKind, ScoreSpec, score_all_classes
from helpers import batch_from_probs, central_difference, random_problem, rel_err

APS1 = ScoreSpec(ScoreKind.APS, randomization="fixed", u=1.0)


def true_scores(model, batch, spec=ScoreSpec(randomization="fixed")):
    s = score_all_classes(forward(model, batch.x), spec)
    return s[np.arange(len(batch.y)), batch.y]


# --- cross-entropy -----------------------------------------------------------


def test_ce_examples():
    m, b = batch_from_probs([[1 - 1e-15, 1e-15 / 2, 1e-15 / 2]], [0])
    assert cross_entropy(m, b).value == pytest.approx(0.0, abs=1e-12)
    zero = MlpModel.zeros([3, 10])
    assert cross_entropy(zero, Batch(np.ones((4, 3)), np.arange(4))).value == pytest.approx(math.log(10))


def test_ce_stable_for_extreme_logits():
    m = MlpModel.zeros([1, 2])
    m = MlpModel(m.layer_dims, (np.array([[1000.0, -1000.0]]),), m.biases, m.activation)
    out = cross_entropy(m, Batch(np.ones((1, 1)), np.array([1])))
    assert out.value == pytest.approx(2000.0)
    assert np.all(np.isfinite(out.grad_model.flat()))


def test_ce_gradient_finite_difference():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m, b = random_problem(rng)
        g = cross_entropy(m, b).grad_model.flat()
        fd = central_difference(lambda t: cross_entropy(m.with_flat(t), b, False).value, m.flat())
        assert rel_err(g, fd) < 1e-5


# --- soft set size -------------------------------------------------------------


def test_dm_limits_and_midpoint():
    rng = np.random.default_rng(1)
    m, b = random_problem(rng, k=5)
    assert dm_conformal_loss(m, -1e3, b, 0.1, need_grad=False).value == pytest.approx(0.0, abs=1e-12)
    assert dm_conformal_loss(m, 1e3, b, 0.1, need_grad=False).value == pytest.approx(5.0)
    m2, b2 = batch_from_probs([[0.5, 0.5]], [0])
    assert dm_conformal_loss(m2, 0.5, b2, 0.1).value == pytest.approx(1.0)


@pytest.mark.parametrize("spec", [ScoreSpec(randomization="fixed"), APS1], ids=["hps", "aps"])
def test_dm_gradients_finite_difference(spec):
    rng = np.random.default_rng(2)
    for _ in range(20):
        m, b = random_problem(rng)
        q = float(rng.uniform(0.2, 0.9))
        out = dm_conformal_loss(m, q, b, 0.3, spec)
        fd = central_difference(lambda t: dm_conformal_loss(m.with_flat(t), q, b, 0.3, spec, False).value, m.flat())
        assert rel_err(out.grad_model.flat(), fd) < 1e-5
        h = 1e-4
        fq = (dm_conformal_loss(m, q + h, b, 0.3, spec, False).value - dm_conformal_loss(m, q - h, b, 0.3, spec, False).value) / (2 * h)
        assert out.grad_q == pytest.approx(fq, rel=1e-5)


def test_dm_q_gradient_positive_and_bounded():
    rng = np.random.default_rng(3)
    for _ in range(200):
        k = int(rng.integers(2, 12))
        tau = float(rng.uniform(0.01, 1.0))
        m, b = random_problem(rng, k=k)
        g = dm_conformal_loss(m, float(rng.uniform(-0.5, 1.5)), b, tau, need_grad=False).grad_q
        assert 0 < g <= k / (4 * tau)


def test_dm_sampled_spec_trains_with_u_one():
    rng = np.random.default_rng(4)
    m, b = random_problem(rng)
    a = dm_conformal_loss(m, 0.5, b, 0.1, ScoreSpec(ScoreKind.APS))
    c = dm_conformal_loss(m, 0.5, b, 0.1, APS1)
    assert a.value == c.value


# --- pinball ---------------------------------------------------------------------


def test_qr_examples():
    m, b = batch_from_probs([[0.5, 0.5], [0.5, 0.5]], [0, 1])
    assert qr_loss(m, 0.5, b, 0.1).value == 0.0
    # HPS scores {0, 1} from probabilities {1, 0} up to rounding
    m2, b2 = batch_from_probs([[1 - 1e-16, 1e-16], [1e-16, 1 - 1e-16]], [0, 0])
    assert qr_loss(m2, 0.0, b2, 0.1).value == pytest.approx(0.45)
    with pytest.raises(ValueError):
        qr_loss(m, 0.5, Batch(np.zeros((0, 2)), np.zeros(0, dtype=int)), 0.1)


def test_qr_grad_matches_finite_difference_off_kinks():
    rng = np.random.default_rng(5)
    done = 0
    while done < 20:
        m, b = random_problem(rng, n=30)
        s = true_scores(m, b)
        q = float(rng.uniform(s.min(), s.max()))
        if np.min(np.abs(s - q)) < 1e-3:
            continue
        h = 1e-4
        fd = (qr_loss(m, q + h, b, 0.1).value - qr_loss(m, q - h, b, 0.1).value) / (2 * h)
        assert qr_loss(m, q, b, 0.1).grad_q == pytest.approx(fd, rel=1e-8)
        done += 1


def test_qr_convex_minimizer_at_batch_order_statistic():
    rng = np.random.default_rng(6)
    for _ in range(10):
        m, b = random_problem(rng, n=40)
        s = np.sort(true_scores(m, b))
        grid = np.linspace(0, 1, 2001)
        vals = np.array([qr_loss(m, q, b, 0.1).value for q in grid])
        # convexity on the grid
        assert np.all(np.diff(vals, 2) >= -1e-12)
        target = s[math.ceil(0.9 * len(s)) - 1]
        assert abs(grid[np.argmin(vals)] - target) <= (grid[1] - grid[0]) + 1e-12 or np.isclose(
            vals.min(), np.mean(pinball_loss(target, s, 0.1)), atol=1e-9
        )


# --- ConfTr ------------------------------------------------------------------------


def test_sa_conftr_examples():
    zero = MlpModel.zeros([2, 4])
    b = Batch(np.ones((20, 2)), np.arange(20) % 4)
    out = sa_conftr_loss(zero, b, 0.1, 0.1)
    assert out.value == pytest.approx(2.0)  # every score equals q_hat: K / 2
    with pytest.raises(InsufficientDataError, match="batch too small"):
        sa_conftr_loss(zero, Batch(np.ones((16, 2)), np.arange(16) % 4), 0.1)


def test_sa_conftr_saturates_to_zero():
    # quantile half: confident and correct; loss half: every class scores 1 - 1e-9
    p_top = np.array([1 - 3e-9, 1e-9, 1e-9, 1e-9])
    p_flat = np.full(4, 0.25)
    probs = np.vstack([np.tile(p_top, (10, 1)), np.tile(p_flat, (10, 1))])
    m, b = batch_from_probs(probs, np.zeros(20, dtype=int))
    out = sa_conftr_loss(m, b, 0.1, 0.01)
    assert out.aux["q_hat"] < 1e-8
    assert out.value < 1e-20


def test_sa_conftr_equals_dm_at_half_quantile():
    rng = np.random.default_rng(7)
    for _ in range(10):
        m, b = random_problem(rng, n=40)
        out = sa_conftr_loss(m, b, 0.1, 0.2)
        s = true_scores(m, Batch(b.x[:20], b.y[:20]))
        q_hat = np.sort(s)[conformal_rank(20, 0.1) - 1]
        assert out.aux["q_hat"] == q_hat
        assert out.value == dm_conformal_loss(m, q_hat, Batch(b.x[20:], b.y[20:]), 0.2).value
        assert 0 < out.value < m.num_classes


def test_sa_conftr_gradient_with_frozen_threshold():
    rng = np.random.default_rng(8)
    for _ in range(20):
        m, b = random_problem(rng, n=40)
        out = sa_conftr_loss(m, b, 0.1, 0.3)
        rest = Batch(b.x[20:], b.y[20:])
        q = out.aux["q_hat"]
        fd = central_difference(lambda t: dm_conformal_loss(m.with_flat(t), q, rest, 0.3, need_grad=False).value, m.flat())
        assert rel_err(out.grad_model.flat(), fd) < 1e-5


# --- CUT -----------------------------------------------------------------------------


@pytest.mark.parametrize("s", [9, 19, 63])
def test_cut_uniform_grid_scores(s):
    i = np.arange(1, s + 1)
    hps = i / (s + 1)
    m, b = batch_from_probs(np.column_stack([1 - hps, hps]), np.zeros(s, dtype=int))
    assert cut_loss(m, b).value <= 1 / (s + 1) + 1e-12


def test_cut_extreme_scores():
    eps = 1e-12
    m, b = batch_from_probs(np.tile([1 - eps, eps], (10, 1)), np.zeros(10, dtype=int))
    assert cut_loss(m, b).value == pytest.approx(1 - min(CUT_ALPHA_GRID), abs=1e-9)
    m, b = batch_from_probs(np.tile([eps, 1 - eps], (10, 1)), np.zeros(10, dtype=int))
    assert cut_loss(m, b).value == pytest.approx(max(CUT_ALPHA_GRID), abs=1e-9)


def test_cut_matches_brute_force():
    rng = np.random.default_rng(9)
    for _ in range(20):
        m, b = random_problem(rng, n=25)
        s = np.sort(true_scores(m, b))
        best = max(abs((1 - a) - s[min(conformal_rank(25, a), 25) - 1]) for a in CUT_ALPHA_GRID)
        assert cut_loss(m, b).value == pytest.approx(best, abs=1e-15)


def test_cut_errors():
    m, b = batch_from_probs([[0.5, 0.5]], [0])
    with pytest.raises(ValueError):
        cut_loss(m, b, alpha_grid=())
    with pytest.raises(ValueError):
        cut_loss(m, b, spec=ScoreSpec(ScoreKind.RAPS))


@pytest.mark.parametrize("spec", [ScoreSpec(randomization="fixed"), APS1], ids=["hps", "aps"])
def test_cut_gradient_finite_difference(spec):
    rng = np.random.default_rng(10)
    done = 0
    while done < 20:
        m, b = random_problem(rng, n=16)
        out = cut_loss(m, b, spec=spec)
        fd = central_difference(lambda t: cut_loss(m.with_flat(t), b, spec=spec, need_grad=False).value, m.flat())
        # skip draws where a step flips the maximizing alpha or the score order
        flips = any(
            cut_loss(m.with_flat(m.flat() + d), b, spec=spec, need_grad=False).aux != out.aux
            for d in (1e-4 * np.eye(m.flat().size))
        )
        if flips:
            continue
        assert rel_err(out.grad_model.flat(), fd) < 1e-5
        done += 1


# --- upper objective ---------------------------------------------------------------


def test_upper_objective_examples():
    rng = np.random.default_rng(11)
    m, b1 = random_problem(rng)
    _, b2 = random_problem(rng)
    assert upper_objective(m, 0.5, b1, b2, 0.0).value == cross_entropy(m, b1).value
    ce = cross_entropy(m, b1).value
    dm = dm_conformal_loss(m, 0.5, b2, 0.1).value
    assert upper_objective(m, 0.5, b1, b2, 1.0).value == ce + dm
    with pytest.raises(ValueError):
        upper_objective(m, 0.5, b1, b2, -1.0)


def test_upper_objective_gradient_finite_difference():
    rng = np.random.default_rng(12)
    for _ in range(20):
        m, b1 = random_problem(rng)
        _, b2 = random_problem(rng)
        lam, q = float(rng.uniform(0, 2)), float(rng.uniform(0.2, 0.9))
        g = upper_objective(m, q, b1, b2, lam, 0.3).grad_model.flat()
        fd = central_difference(lambda t: upper_objective(m.with_flat(t), q, b1, b2, lam, 0.3, need_grad=False).value, m.flat())
        assert rel_err(g, fd) < 1e-5
