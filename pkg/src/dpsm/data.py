"""Datasets: synthetic generation, CSV input/output and stratified splitting."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .losses import Batch
from .seeding import derive_rng


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    CAL = "cal"
    TEST = "test"


SPLIT_ORDER = (Split.TRAIN, Split.VAL, Split.CAL, Split.TEST)
_SPLIT_CODES = {s: i for i, s in enumerate(SPLIT_ORDER)}

DESK_BENCHMARK = dict(k=10, d=20, n=20_000, class_separation=2.5, within_class_scale=1.0)
DESK_FRACTIONS = (0.6, 0.05, 0.15, 0.2)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    k: int
    split_assignment: np.ndarray | None = None  # int codes into SPLIT_ORDER
    label_names: tuple = ()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise DataError("features must be n x d and labels length n")
        if y.size and (y.min() < 0 or y.max() >= self.k):
            raise DataError(f"labels must lie in [0, {self.k})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        if self.split_assignment is not None:
            a = np.asarray(self.split_assignment, dtype=np.int8)
            if a.shape != y.shape or a.min(initial=0) < 0 or a.max(initial=0) >= len(SPLIT_ORDER):
                raise DataError("split assignment must give one valid split per row")
            object.__setattr__(self, "split_assignment", a)
        if not self.label_names:
            object.__setattr__(self, "label_names", tuple(str(i) for i in range(self.k)))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def indices(self, split) -> np.ndarray:
        if self.split_assignment is None:
            raise DataError("dataset has no split assignment")
        return np.flatnonzero(self.split_assignment == _SPLIT_CODES[Split(split)])

    def batch(self, split=None, idx=None) -> Batch:
        if idx is None:
            idx = self.indices(split)
        return Batch(self.features[idx], self.labels[idx])

    def restricted(self, idx, split=Split.TRAIN) -> "Dataset":
        """New dataset holding only rows ``idx`` (in that order), all in one split."""
        idx = np.asarray(idx)
        return replace(
            self,
            features=self.features[idx],
            labels=self.labels[idx],
            split_assignment=np.full(idx.size, _SPLIT_CODES[Split(split)], dtype=np.int8),
        )


def gen_gaussian_mixture(
    k: int = 10,
    d: int = 20,
    n: int = 20_000,
    class_separation: float = 1.5,
    within_class_scale: float = 1.0,
    seed: int = 0,
) -> Dataset:
    """Balanced isotropic Gaussian mixture.

    Class means sit at radius ``class_separation * within_class_scale`` along
    random orthonormal directions (random unit directions when k > d).
    """
    if k < 2 or d < 1 or n < k:
        raise DataError(f"invalid dimensions k={k}, d={d}, n={n}")
    if class_separation < 0 or within_class_scale <= 0:
        raise DataError("class_separation must be >= 0 and within_class_scale > 0")
    rng = derive_rng(seed, "data/gaussian_mixture")
    g = rng.standard_normal((d, k))
    if k <= d:
        dirs, _ = np.linalg.qr(g)
        dirs = dirs.T
    else:
        dirs = (g / np.linalg.norm(g, axis=0)).T
    means = class_separation * within_class_scale * dirs
    labels = rng.permutation(np.arange(n) % k)
    x = means[labels] + within_class_scale * rng.standard_normal((n, d))
    meta = dict(
        name="gaussian_mixture",
        seed=int(seed),
        k=k,
        d=d,
        n=n,
        class_separation=class_separation,
        within_class_scale=within_class_scale,
    )
    return Dataset(x, labels, k, metadata=meta)


def split(dataset: Dataset, fractions=DESK_FRACTIONS, seed: int = 0) -> Dataset:
    """Stratified random train/val/cal/test assignment.

    Per-class counts use largest-remainder rounding so each class is within
    one row of its proportional share in every split.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (4,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise DataError(f"fractions must be four non-negative numbers summing to 1, got {fractions}")
    rng = derive_rng(seed, "data/split")
    active = int(np.count_nonzero(fr))
    assign = np.empty(dataset.n, dtype=np.int8)
    for c in range(dataset.k):
        rows = np.flatnonzero(dataset.labels == c)
        if 0 < rows.size < active:
            raise DataError(f"class {c} has {rows.size} rows, fewer than {active} splits")
        raw = fr * rows.size
        counts = np.floor(raw).astype(int)
        short = rows.size - counts.sum()
        # largest remainders first; ties go to the earlier split
        for i in np.argsort(-(raw - counts), kind="stable")[:short]:
            counts[i] += 1
        perm = rng.permutation(rows)
        assign[perm] = np.repeat(np.arange(4, dtype=np.int8), counts)
    meta = dict(dataset.metadata, split_seed=int(seed), fractions=[float(f) for f in fr])
    return replace(dataset, split_assignment=assign, metadata=meta)


def save_csv(dataset: Dataset, path) -> None:
    """Header ``f0..f{d-1},label[,split]``; floats with 17 significant digits."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = [f"f{j}" for j in range(dataset.d)] + ["label"]
        has_split = dataset.split_assignment is not None
        if has_split:
            header.append("split")
        w.writerow(header)
        for i in range(dataset.n):
            row = [format(v, ".17g") for v in dataset.features[i]]
            row.append(dataset.label_names[dataset.labels[i]])
            if has_split:
                row.append(SPLIT_ORDER[dataset.split_assignment[i]].value)
            w.writerow(row)


def _label_sort_key(v: str):
    try:
        return (0, float(v), v)
    except ValueError:
        return (1, 0.0, v)


def load_csv(path, schema: dict | None = None) -> Dataset:
    """Read a dataset CSV.

    ``schema`` keys (all optional): ``feature_columns`` (default: every column
    named ``f<j>``), ``label_column`` (default ``"label"``), ``split_column``
    (default ``"split"`` if present) and ``label_names`` (a known class list;
    labels outside it are rejected). Labels are re-indexed densely.
    """
    schema = dict(schema or {})
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or not any(cell.strip() for cell in rows[0]):
        raise DataError(f"{path}: empty dataset")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    if not body:
        raise DataError(f"{path}: empty dataset (header only)")
    label_col = schema.get("label_column", "label")
    feat_cols = schema.get("feature_columns") or [h for h in header if h.startswith("f") and h[1:].isdigit()]
    split_col = schema.get("split_column", "split" if "split" in header else None)
    for col in [label_col, *feat_cols] + ([split_col] if split_col else []):
        if col not in header:
            raise DataError(f"{path}: missing column {col!r}")
    fi = [header.index(c) for c in feat_cols]
    li = header.index(label_col)
    si = header.index(split_col) if split_col else None
    x = np.empty((len(body), len(fi)))
    raw_labels, splits = [], []
    for r, row in enumerate(body):
        line = r + 2
        if len(row) != len(header):
            raise DataError(f"{path}: line {line}: expected {len(header)} fields, got {len(row)}")
        for j, c in enumerate(fi):
            try:
                x[r, j] = float(row[c])
            except ValueError:
                raise DataError(
                    f"{path}: line {line}, column {header[c]!r}: non-numeric value {row[c]!r}"
                ) from None
        raw_labels.append(row[li].strip())
        if si is not None:
            try:
                splits.append(_SPLIT_CODES[Split(row[si].strip())])
            except ValueError:
                raise DataError(f"{path}: line {line}: unknown split {row[si]!r}") from None
    known = schema.get("label_names")
    if known is not None:
        names = tuple(str(v) for v in known)
        unknown = sorted(set(raw_labels) - set(names))
        if unknown:
            raise DataError(f"{path}: unknown labels {unknown}")
    else:
        names = tuple(sorted(set(raw_labels), key=_label_sort_key))
    lookup = {v: i for i, v in enumerate(names)}
    y = np.array([lookup[v] for v in raw_labels], dtype=np.int64)
    assign = np.array(splits, dtype=np.int8) if si is not None else None
    return Dataset(x, y, len(names), assign, names, metadata={"name": path.stem, "source": str(path)})


def split_counts(dataset: Dataset) -> dict:
    return {s.value: int(dataset.indices(s).size) for s in SPLIT_ORDER}

