"""Feature preprocessing and mutual-information feature importance.

Pipeline order: categorical columns are target-encoded with ordered target
statistics, then every column is mapped through a quantile transform to a
standard-normal marginal, then importance is scored on the transformed
training rows.  Everything is fitted on training rows only.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

logger = logging.getLogger(__name__)

TASKS = ("binary", "multiclass", "regression")
SPLITS = ("train", "val", "test")
QUANTILE_CLIP = 1e-3


class DataError(ValueError):
    """Malformed or inconsistent tabular input."""


@dataclass
class TabularDataset:
    numeric: np.ndarray  # (n, f_num) float
    categorical: np.ndarray  # (n, f_cat) str
    labels: np.ndarray  # (n,) class index or real value
    task: str
    numeric_names: list[str] = field(default_factory=list)
    categorical_names: list[str] = field(default_factory=list)
    split: np.ndarray | None = None  # (n,) of "train" / "val" / "test"
    classes: list[str] | None = None  # original label values for classification

    def __post_init__(self):
        self.numeric = np.asarray(self.numeric, dtype=np.float64)
        n = len(self.labels)
        if self.numeric.ndim == 1:
            self.numeric = self.numeric.reshape(n, -1)
        self.categorical = np.asarray(self.categorical, dtype=object)
        if self.categorical.size == 0:
            self.categorical = np.empty((n, 0), dtype=object)
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.numeric.shape[0] != n or self.categorical.shape[0] != n:
            raise DataError(
                f"column lengths disagree: {self.numeric.shape[0]} numeric rows, "
                f"{self.categorical.shape[0]} categorical rows, {n} labels"
            )
        if not self.numeric_names:
            self.numeric_names = [f"num_{i}" for i in range(self.numeric.shape[1])]
        if not self.categorical_names:
            self.categorical_names = [f"cat_{i}" for i in range(self.categorical.shape[1])]
        if self.task == "regression":
            self.labels = np.asarray(self.labels, dtype=np.float64)
        else:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
                raise DataError(f"class labels must lie in [0, {self.n_classes})")
        if self.split is not None:
            self.split = np.asarray(self.split)
            bad = set(np.unique(self.split)) - set(SPLITS)
            if bad:
                raise DataError(f"unknown split tags {sorted(bad)}")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.numeric.shape[1] + self.categorical.shape[1]

    @property
    def feature_names(self) -> list[str]:
        return list(self.numeric_names) + list(self.categorical_names)

    @property
    def n_classes(self) -> int:
        if self.task == "regression":
            return 1
        if self.classes is not None:
            return len(self.classes)
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def rows(self, which: str) -> np.ndarray:
        if self.split is None:
            raise DataError("dataset has no split assignment")
        return np.flatnonzero(self.split == which)


# ---------------------------------------------------------------- quantile transform


class QuantileTransformer:
    """Map a column to standard-normal scores through its training empirical CDF."""

    def __init__(self, clip: float = QUANTILE_CLIP):
        self.clip = clip
        self.support: np.ndarray | None = None
        self.quantiles: np.ndarray | None = None
        self.constant = False

    def fit(self, column) -> "QuantileTransformer":
        col = np.asarray(column, dtype=np.float64).ravel()
        if col.size == 0:
            raise DataError("cannot fit a quantile transform on an empty column")
        if not np.all(np.isfinite(col)):
            raise DataError("quantile transform needs finite training values")
        n = col.size
        # midpoint quantile of each unique value, ties sharing their average rank
        ranks = rankdata(col, method="average")
        support, inverse = np.unique(col, return_inverse=True)
        q = np.zeros(len(support))
        q[inverse] = (ranks - 0.5) / n
        self.support, self.quantiles = support, q
        self.constant = len(support) == 1
        if self.constant:
            warnings.warn("constant column: quantile transform maps it to zeros", stacklevel=2)
        return self

    def transform(self, column) -> np.ndarray:
        if self.support is None:
            raise RuntimeError("QuantileTransformer is not fitted")
        col = np.asarray(column, dtype=np.float64)
        if self.constant:
            return np.zeros_like(col)
        q = np.interp(col, self.support, self.quantiles)
        return ndtri(np.clip(q, self.clip, 1.0 - self.clip))

    def state(self) -> dict:
        return {"support": self.support.tolist(), "quantiles": self.quantiles.tolist(), "clip": self.clip}

    @classmethod
    def from_state(cls, state: dict) -> "QuantileTransformer":
        qt = cls(state["clip"])
        qt.support = np.asarray(state["support"], dtype=np.float64)
        qt.quantiles = np.asarray(state["quantiles"], dtype=np.float64)
        qt.constant = len(qt.support) == 1
        return qt


def fit_quantile(column) -> QuantileTransformer:
    return QuantileTransformer().fit(column)


# ---------------------------------------------------------------- categorical encoding


class CategoricalEncoder:
    """Ordered target statistics with prior smoothing.

    Training row i of category c is encoded from the rows before it only:
    ``(S_c(i) + a*p) / (N_c(i) + a)``.  New rows use the full training totals.
    """

    def __init__(self, smoothing: float = 1.0):
        self.smoothing = smoothing
        self.prior = 0.0
        self.sums: dict[str, float] = {}
        self.counts: dict[str, int] = {}
        self.train_encoding: np.ndarray | None = None

    def fit(self, categories, targets) -> "CategoricalEncoder":
        cats = [str(c) for c in np.asarray(categories, dtype=object).ravel()]
        y = np.asarray(targets, dtype=np.float64).ravel()
        if len(cats) != len(y):
            raise DataError(f"{len(cats)} categories but {len(y)} targets")
        if not cats:
            raise DataError("cannot fit a categorical encoder on an empty column")
        a = self.smoothing
        self.prior = float(y.mean())
        sums: dict[str, float] = {}
        counts: dict[str, int] = {}
        enc = np.empty(len(cats))
        for i, (c, t) in enumerate(zip(cats, y)):
            s, k = sums.get(c, 0.0), counts.get(c, 0)
            enc[i] = (s + a * self.prior) / (k + a)
            sums[c] = s + t
            counts[c] = k + 1
        self.sums, self.counts, self.train_encoding = sums, counts, enc
        return self

    def transform(self, categories) -> np.ndarray:
        a = self.smoothing
        out = []
        for c in np.asarray(categories, dtype=object).ravel():
            c = str(c)
            if c in self.counts:
                out.append((self.sums[c] + a * self.prior) / (self.counts[c] + a))
            else:
                out.append(self.prior)
        return np.asarray(out, dtype=np.float64)

    def state(self) -> dict:
        return {"smoothing": self.smoothing, "prior": self.prior, "sums": self.sums, "counts": self.counts}

    @classmethod
    def from_state(cls, state: dict) -> "CategoricalEncoder":
        enc = cls(state["smoothing"])
        enc.prior = float(state["prior"])
        enc.sums = {k: float(v) for k, v in state["sums"].items()}
        enc.counts = {k: int(v) for k, v in state["counts"].items()}
        return enc


def fit_cat_encoder(categories, targets) -> CategoricalEncoder:
    return CategoricalEncoder().fit(categories, targets)


# ---------------------------------------------------------------- importance


def _equal_frequency_bins(x: np.ndarray, n_bins: int) -> np.ndarray:
    """Bin codes from training quantile edges; tied values always share a bin."""
    edges = np.quantile(x, np.linspace(0.0, 1.0, n_bins + 1)[1:-1])
    return np.searchsorted(edges, x, side="right")


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(x_codes, y_codes) -> float:
    """Plug-in mutual information of two discrete codings, normalised by sqrt(H(X) H(Y))."""
    x_codes = np.unique(np.asarray(x_codes), return_inverse=True)[1]
    y_codes = np.unique(np.asarray(y_codes), return_inverse=True)[1]
    n = len(x_codes)
    joint = np.zeros((x_codes.max() + 1, y_codes.max() + 1))
    np.add.at(joint, (x_codes, y_codes), 1.0)
    px, py = joint.sum(axis=1), joint.sum(axis=0)
    hx, hy = _entropy(px, n), _entropy(py, n)
    if hx == 0.0 or hy == 0.0:
        return 0.0
    nz = joint > 0
    pxy = joint[nz] / n
    outer = np.outer(px, py)[nz] / (n * n)
    mi = float((pxy * np.log(pxy / outer)).sum())
    return float(np.clip(mi / np.sqrt(hx * hy), 0.0, 1.0))


def importance(features, targets, task: str) -> np.ndarray:
    """Normalised mutual information between each column and the target."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(targets)
    n = X.shape[0]
    if n < 10:
        raise DataError(f"importance needs at least 10 rows, got {n}")
    if task not in TASKS:
        raise DataError(f"unknown task {task!r}")
    n_bins = min(10, n // 5)
    y_codes = _equal_frequency_bins(y.astype(np.float64), n_bins) if task == "regression" else y
    return np.array([nmi(_equal_frequency_bins(X[:, j], n_bins), y_codes) for j in range(X.shape[1])])


# ---------------------------------------------------------------- pipeline


@dataclass
class Preprocessor:
    """Fitted transforms for one dataset, applied column by column."""

    task: str
    numeric_names: list[str]
    categorical_names: list[str]
    encoders: list[CategoricalEncoder]
    quantiles: list[QuantileTransformer]

    @property
    def feature_names(self) -> list[str]:
        return list(self.numeric_names) + list(self.categorical_names)

    def encode(self, numeric, categorical, train_order: bool = False) -> np.ndarray:
        numeric = np.asarray(numeric, dtype=np.float64).reshape(len(numeric), -1)
        cols = [numeric[:, j] for j in range(numeric.shape[1])]
        categorical = np.asarray(categorical, dtype=object).reshape(len(numeric), -1)
        for j, enc in enumerate(self.encoders):
            cols.append(enc.train_encoding if train_order else enc.transform(categorical[:, j]))
        raw = np.column_stack(cols) if cols else np.empty((len(numeric), 0))
        return np.column_stack([qt.transform(raw[:, j]) for j, qt in enumerate(self.quantiles)])

    def transform(self, dataset: TabularDataset, rows=None) -> np.ndarray:
        rows = np.arange(dataset.n) if rows is None else rows
        return self.encode(dataset.numeric[rows], dataset.categorical[rows])

    def state(self) -> dict:
        return {
            "task": self.task,
            "numeric_names": self.numeric_names,
            "categorical_names": self.categorical_names,
            "encoders": [e.state() for e in self.encoders],
            "quantiles": [q.state() for q in self.quantiles],
        }

    @classmethod
    def from_state(cls, state: dict) -> "Preprocessor":
        return cls(
            task=state["task"],
            numeric_names=list(state["numeric_names"]),
            categorical_names=list(state["categorical_names"]),
            encoders=[CategoricalEncoder.from_state(s) for s in state["encoders"]],
            quantiles=[QuantileTransformer.from_state(s) for s in state["quantiles"]],
        )


def preprocess_pipeline(dataset: TabularDataset):
    """Fit on training rows and transform every row.

    Returns ``(features, importance, preprocessor)`` where ``features`` is the
    full n x f matrix (training rows use their ordered categorical encoding) and
    importance is scored on the transformed training rows only.
    """
    train = dataset.rows("train")
    if len(train) == 0:
        raise DataError("no training rows")
    y_train = dataset.labels[train].astype(np.float64)
    encoders = [fit_cat_encoder(dataset.categorical[train, j], y_train) for j in range(dataset.categorical.shape[1])]

    raw_train = [dataset.numeric[train, j] for j in range(dataset.numeric.shape[1])]
    raw_train += [enc.train_encoding for enc in encoders]
    quantiles = []
    for name, col in zip(dataset.feature_names, raw_train):
        with warnings.catch_warnings(record=True):
            warnings.simplefilter("always")
            qt = fit_quantile(col)
        if qt.constant:
            logger.warning("column %s is constant on training rows; mapped to zeros", name)
        quantiles.append(qt)
    prep = Preprocessor(dataset.task, list(dataset.numeric_names), list(dataset.categorical_names), encoders, quantiles)

    X = prep.transform(dataset)
    X[train] = prep.encode(dataset.numeric[train], dataset.categorical[train], train_order=True)
    imp = importance(X[train], dataset.labels[train], dataset.task)
    return X, imp, prep


# ---------------------------------------------------------------- CSV ingestion


def read_csv(
    path,
    target: str,
    task: str,
    categorical: list[str] | None = None,
    classes: list[str] | None = None,
) -> TabularDataset:
    """Load a headed CSV.  Columns that parse entirely as floats are numeric.

    Missing cells are an error.  ``classes`` fixes the label vocabulary (used
    when re-reading data for a trained model).
    """
    if task not in TASKS:
        raise DataError(f"unknown task {task!r}; expected one of {TASKS}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if target not in header:
        raise DataError(f"target column {target!r} not in header; columns are {header}")
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise DataError(f"row {i + 2}: expected {len(header)} cells, found {len(r)}")
        for j, cell in enumerate(r):
            if cell.strip() == "":
                raise DataError(f"missing cell at row {i + 2}, column {header[j]!r}")
    cols = {h: [r[j].strip() for r in rows] for j, h in enumerate(header)}
    forced = set(categorical or [])
    unknown = forced - set(header)
    if unknown:
        raise DataError(f"--categorical names unknown columns {sorted(unknown)}")

    num_names, cat_names = [], []
    for h in header:
        if h == target:
            continue
        if h in forced:
            cat_names.append(h)
            continue
        try:
            [float(v) for v in cols[h]]
            num_names.append(h)
        except ValueError:
            cat_names.append(h)

    numeric = np.array([[float(v) for v in cols[h]] for h in num_names], dtype=np.float64).T.reshape(len(rows), -1)
    cat = np.array([cols[h] for h in cat_names], dtype=object).T.reshape(len(rows), -1)

    raw_y = cols[target]
    if task == "regression":
        try:
            labels = np.array([float(v) for v in raw_y])
        except ValueError:
            raise DataError(f"regression target {target!r} has non-numeric values") from None
        classes_out = None
    else:
        if classes is None:
            try:
                classes = [str(v) for v in sorted({float(v) for v in raw_y})]
                canon = {v: str(float(v)) for v in raw_y}
            except ValueError:
                classes = sorted(set(raw_y))
                canon = {v: v for v in raw_y}
        else:
            try:
                canon = {v: str(float(v)) for v in raw_y}
                if not set(canon.values()) <= set(classes):
                    canon = {v: v for v in raw_y}
            except ValueError:
                canon = {v: v for v in raw_y}
        lookup = {c: i for i, c in enumerate(classes)}
        unseen = {canon[v] for v in raw_y} - set(lookup)
        if unseen:
            raise DataError(f"labels {sorted(unseen)} are not among known classes {classes}")
        labels = np.array([lookup[canon[v]] for v in raw_y], dtype=np.int64)
        if task == "binary" and len(classes) != 2:
            raise DataError(f"binary task needs exactly 2 classes, found {len(classes)}: {classes}")
        classes_out = list(classes)
    return TabularDataset(numeric, cat, labels, task, num_names, cat_names, classes=classes_out)
