"""Training loops: cross-entropy, ConfTr, CUT and the bilevel DPSM algorithm.

All randomness comes from streams derived from ``TrainConfig.seed``:

* ``train/init``      model initialization
* ``train/split``     the D1 / D2 split used by DPSM
* ``train/shuffle1``  per-epoch permutation of D1 (or of the whole train split)
* ``train/shuffle2``  per-epoch permutation of D2

so CE on D1 and DPSM with ``lam = gamma = 0`` see identical batches.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .core_math import QuantileLevel, empirical_quantile, pinball_loss
from .data import Dataset, Split
from .losses import (
    CUT_ALPHA_GRID,
    Batch,
    LossValue,
    cross_entropy,
    cut_loss,
    dm_conformal_loss,
    qr_loss,
    sa_conftr_loss,
)
from .model import GradientBundle, MlpModel, forward, forward_with_cache
from .scores import TRAINING_SCORE, ScoreSpec, score_all_classes
from .seeding import derive_rng


class Method(str, enum.Enum):
    CE = "CE"
    CONFTR = "ConfTr"
    CUT = "CUT"
    DPSM = "DPSM"


class NumericalError(RuntimeError):
    def __init__(self, epoch: int, what: str = "loss"):
        super().__init__(f"non-finite {what} in epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    method: Method = Method.DPSM
    alpha: float = 0.1
    lam: float = 0.05
    eta: float = 0.1
    gamma: float = 0.01
    tau_sigmoid: float = 0.1
    batch_size: int = 64
    epochs: int = 60
    seed: int = 0
    lr_schedule: tuple = ((30, 0.1), (45, 0.1))
    momentum: float = 0.9
    weight_decay: float = 0.0
    q_init: float = 0.5
    score: ScoreSpec = TRAINING_SCORE
    hidden: tuple = (64, 64)
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        QuantileLevel(self.alpha)
        if isinstance(self.score, dict):
            object.__setattr__(self, "score", ScoreSpec(**self.score))
        sched = tuple((int(e), float(m)) for e, m in self.lr_schedule)
        object.__setattr__(self, "lr_schedule", sched)
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        checks = [
            (self.lam >= 0, "lambda must be >= 0"),
            (self.eta >= 0, "eta must be >= 0"),
            (self.gamma >= 0, "gamma must be >= 0"),
            (self.tau_sigmoid > 0, "tau_sigmoid must be > 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (0 <= self.momentum < 1, "momentum must lie in [0, 1)"),
            (self.weight_decay >= 0, "weight_decay must be >= 0"),
            (math.isfinite(self.q_init), "q_init must be finite"),
            (all(m > 0 for _, m in sched), "lr_schedule multipliers must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    @property
    def level(self) -> QuantileLevel:
        return QuantileLevel(self.alpha)

    def lr_at(self, epoch: int) -> float:
        lr = self.eta
        for start, mult in self.lr_schedule:
            if epoch >= start:
                lr *= mult
        return lr

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "score":
                v = v.to_dict()
            elif f.name == "method":
                v = v.value
            elif f.name == "lr_schedule":
                v = [list(p) for p in v]
            elif f.name == "hidden":
                v = list(v)
            out["lambda" if f.name == "lam" else f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


TRACE_COLUMNS = (
    "epoch",
    "lr",
    "upper_loss",
    "lower_loss",
    "ce_loss",
    "q",
    "q_ref",
    "q_error",
    "batch_q_error",
    "dm_gap",
    "qr_gap",
    "soft_size",
    "train_acc",
)


@dataclass
class TraceRecord:
    epoch: int
    lr: float = math.nan
    upper_loss: float = math.nan
    lower_loss: float = math.nan
    ce_loss: float = math.nan
    q: float = math.nan
    q_ref: float = math.nan
    q_error: float = math.nan
    batch_q_error: float = math.nan
    dm_gap: float = math.nan
    qr_gap: float = math.nan
    soft_size: float = math.nan
    train_acc: float = math.nan


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def __len__(self):
        return len(self.records)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for r in self.records:
                w.writerow([repr(getattr(r, c)) if c != "epoch" else r.epoch for c in TRACE_COLUMNS])


class _Sgd:
    """SGD with heavy-ball momentum and L2 weight decay on model parameters only."""

    def __init__(self, model: MlpModel, config: TrainConfig):
        self.model = model
        self.momentum = config.momentum
        self.weight_decay = config.weight_decay
        self.buf = None

    def step(self, grads: GradientBundle, rate: float) -> MlpModel:
        m = self.model
        if self.weight_decay:
            grads = GradientBundle(
                tuple(g + self.weight_decay * w for g, w in zip(grads.weights, m.weights)),
                tuple(g + self.weight_decay * b for g, b in zip(grads.biases, m.biases)),
            )
        if self.momentum:
            if self.buf is None:
                self.buf = grads
            else:
                self.buf = self.buf.scale(self.momentum) + grads
            grads = self.buf
        self.model = MlpModel(
            m.layer_dims,
            tuple(w - rate * g for w, g in zip(m.weights, grads.weights)),
            tuple(b - rate * g for b, g in zip(m.biases, grads.biases)),
            m.activation,
        )
        return self.model


def init_model(config: TrainConfig, d: int, k: int) -> MlpModel:
    dims = (d, *config.hidden, k)
    return MlpModel.init(dims, derive_rng(config.seed, "train/init"), config.activation)


def split_halves(n_train: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Random disjoint positions (D1, D2) with ``|D1| = n // 2`` and ``|D2| = n - |D1|``."""
    perm = derive_rng(seed, "train/split").permutation(n_train)
    half = n_train // 2
    d1, d2 = np.sort(perm[:half]), np.sort(perm[half:])
    assert len(np.intersect1d(d1, d2)) == 0 and abs(len(d1) - len(d2)) <= 1
    return d1, d2


def _batches(n: int, batch_size: int) -> list:
    if n == 0:
        raise ValueError("empty training split")
    bs = min(batch_size, n)
    return [slice(i * bs, (i + 1) * bs) for i in range(n // bs)]


def _true_scores(probs, y, spec):
    return score_all_classes(probs, spec)[np.arange(len(y)), y]


def compute_epoch_diagnostics(
    model: MlpModel, q: float, reference: Batch, config: TrainConfig, epoch: int = 0
) -> TraceRecord:
    """Dataset-level quantile and the optimization gaps of the learned threshold.

    ``reference`` is D1 for DPSM (the rows the lower level sees) and the full
    training split otherwise. A NaN ``q`` is replaced by the dataset-level
    quantile, so the gaps are zero for methods without a learned threshold.
    """
    spec = config.score if config.score.randomization == "fixed" else config.score.fixed(1.0)
    probs, cache = forward_with_cache(model, reference.x)
    y = np.asarray(reference.y, dtype=np.int64)
    s = _true_scores(probs, y, spec)
    q_ref = empirical_quantile(s, config.level)
    q_eff = q_ref if math.isnan(q) else q
    fwd = (probs, cache)
    dm_q = dm_conformal_loss(model, q_eff, reference, config.tau_sigmoid, spec, False, fwd).value
    dm_ref = dm_conformal_loss(model, q_ref, reference, config.tau_sigmoid, spec, False, fwd).value
    qr_q = float(np.mean(pinball_loss(q_eff, s, config.level)))
    qr_ref = float(np.mean(pinball_loss(q_ref, s, config.level)))
    return TraceRecord(
        epoch=epoch,
        ce_loss=cross_entropy(model, reference, False, fwd).value,
        q=q,
        q_ref=q_ref,
        q_error=abs(q_eff - q_ref),
        dm_gap=dm_q - dm_ref,
        qr_gap=qr_q - qr_ref,
        soft_size=dm_q,
        train_acc=float(np.mean(np.argmax(probs, axis=1) == y)),
    )


def _check_finite(value: float, epoch: int):
    if not math.isfinite(value):
        raise NumericalError(epoch)


def _train_rows(dataset: Dataset):
    idx = dataset.indices(Split.TRAIN)
    if idx.size == 0:
        raise ValueError("empty training split")
    return dataset.features[idx], dataset.labels[idx]


def train_dpsm(config: TrainConfig, dataset: Dataset):
    """Bilevel training with a learned threshold.

    Each step draws B1 from D1 and B2 from D2, takes the cross-entropy gradient
    and the pinball subgradient in q on B1, the soft-set-size gradient on B2,
    then updates the model with ``eta * (grad_ce + lam * grad_dm)`` and q with
    ``gamma * grad_qr``. Returns ``(model, q, trace)``.
    """
    if config.method is not Method.DPSM:
        raise ValueError("train_dpsm needs method=DPSM")
    x, y = _train_rows(dataset)
    d1, d2 = split_halves(len(y), config.seed)
    if d1.size == 0 or d2.size == 0:
        raise ValueError("training split too small to halve")
    x1, y1, x2, y2 = x[d1], y[d1], x[d2], y[d2]
    ref = Batch(x1, y1)
    spec = config.score if config.score.randomization == "fixed" else config.score.fixed(1.0)
    opt = _Sgd(init_model(config, x.shape[1], dataset.k), config)
    q = float(config.q_init)
    rng1 = derive_rng(config.seed, "train/shuffle1")
    rng2 = derive_rng(config.seed, "train/shuffle2")
    trace = TrainTrace()
    slices = _batches(len(y1), config.batch_size)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        p1, p2 = rng1.permutation(len(y1)), rng2.permutation(len(y2))
        upper_sum = lower_sum = 0.0
        for sl in slices:
            b1 = Batch(x1[p1[sl]], y1[p1[sl]])
            i2 = p2[np.arange(sl.start, sl.stop) % len(y2)]
            b2 = Batch(x2[i2], y2[i2])
            fwd1 = forward_with_cache(opt.model, b1.x)
            ce = cross_entropy(opt.model, b1, True, fwd1)
            qr = qr_loss(opt.model, q, b1, config.level, spec, fwd1)
            grad = ce.grad_model
            upper = ce.value
            if config.lam != 0:
                dm = dm_conformal_loss(opt.model, q, b2, config.tau_sigmoid, spec)
                grad = grad + dm.grad_model.scale(config.lam)
                upper += config.lam * dm.value
            _check_finite(upper, epoch)
            opt.step(grad, lr)
            q = q - config.gamma * qr.grad_q
            upper_sum += upper
            lower_sum += qr.value
        rec = compute_epoch_diagnostics(opt.model, q, ref, config, epoch)
        rec.lr, rec.upper_loss, rec.lower_loss = lr, upper_sum / len(slices), lower_sum / len(slices)
        _check_finite(rec.ce_loss, epoch)
        trace.records.append(rec)
    return opt.model, q, trace


def _train_single_stream(config: TrainConfig, dataset: Dataset, conformal_term):
    x, y = _train_rows(dataset)
    ref = Batch(x, y)
    opt = _Sgd(init_model(config, x.shape[1], dataset.k), config)
    rng = derive_rng(config.seed, "train/shuffle1")
    trace = TrainTrace()
    slices = _batches(len(y), config.batch_size)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        perm = rng.permutation(len(y))
        upper_sum, q_hats = 0.0, []
        for sl in slices:
            b = Batch(x[perm[sl]], y[perm[sl]])
            ce = cross_entropy(opt.model, b)
            grad, upper = ce.grad_model, ce.value
            if conformal_term is not None and config.lam != 0:
                extra: LossValue = conformal_term(opt.model, b)
                grad = grad + extra.grad_model.scale(config.lam)
                upper += config.lam * extra.value
                if "q_hat" in extra.aux:
                    q_hats.append(extra.aux["q_hat"])
            _check_finite(upper, epoch)
            opt.step(grad, lr)
            upper_sum += upper
        rec = compute_epoch_diagnostics(opt.model, math.nan, ref, config, epoch)
        rec.lr, rec.upper_loss = lr, upper_sum / len(slices)
        if q_hats:
            rec.batch_q_error = float(np.mean(np.abs(np.array(q_hats) - rec.q_ref)))
        _check_finite(rec.ce_loss, epoch)
        trace.records.append(rec)
    return opt.model, trace


def train_ce(config: TrainConfig, dataset: Dataset):
    """Mini-batch SGD on cross-entropy alone. Returns ``(model, trace)``."""
    return _train_single_stream(config, dataset, None)


def train_sa(config: TrainConfig, dataset: Dataset):
    """Cross-entropy plus ``lam`` times the ConfTr or CUT batch loss.

    Returns ``(model, trace)``. For ConfTr the trace's ``batch_q_error`` is the
    epoch mean of ``|q_hat_batch - Q_n|`` against the end-of-epoch dataset
    quantile.
    """
    spec = config.score if config.score.randomization == "fixed" else config.score.fixed(1.0)
    if config.method is Method.CONFTR:
        def term(model, b):
            return sa_conftr_loss(model, b, config.level, config.tau_sigmoid, spec)
    elif config.method is Method.CUT:
        def term(model, b):
            return cut_loss(model, b, CUT_ALPHA_GRID, spec)
    else:
        raise ValueError("train_sa needs method ConfTr or CUT")
    return _train_single_stream(config, dataset, term)


def train(config: TrainConfig, dataset: Dataset):
    """Dispatch on ``config.method``; always returns ``(model, q, trace)``.

    Methods without a learned threshold return the final dataset-level
    quantile as q.
    """
    if config.method is Method.DPSM:
        return train_dpsm(config, dataset)
    if config.method is Method.CE:
        model, trace = train_ce(config, dataset)
    else:
        model, trace = train_sa(config, dataset)
    q = trace.records[-1].q_ref if trace.records else math.nan
    return model, q, trace


def accuracy(model: MlpModel, batch: Batch) -> float:
    return float(np.mean(np.argmax(forward(model, batch.x), axis=1) == np.asarray(batch.y)))


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
