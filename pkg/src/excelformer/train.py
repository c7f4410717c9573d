"""Supervised training: splits, task losses, AdamW, and the early-stopped epoch loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .augment import MixConfig, MixedBatch, apply_scheme, mix_embeddings
from .autodiff import Tensor
from .metrics import task_metric
from .model import ExcelFormer, ModelConfig
from .preprocess import DataError, TabularDataset, preprocess_pipeline

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = 128
    max_epochs: int = 500
    patience: int = 32
    seed: int = 0
    mix: MixConfig = field(default_factory=MixConfig)

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if isinstance(self.mix, dict):
            self.mix = MixConfig(**self.mix)


# ---------------------------------------------------------------- splits


def _quota(total: int, sizes: np.ndarray) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` rows across groups of ``sizes``."""
    share = total * sizes / sizes.sum()
    base = np.floor(share).astype(int)
    left = total - base.sum()
    order = np.argsort(-(share - base), kind="stable")
    base[order[:left]] += 1
    return np.minimum(base, sizes)


def split(dataset: TabularDataset, seed: int) -> TabularDataset:
    """Tag rows 64/16/20 train/val/test; stratified by class for classification."""
    n = dataset.n
    if n < 25:
        raise DataError(f"need at least 25 rows to split, got {n}")
    rng = np.random.default_rng(seed)
    n_test = int(round(0.2 * n))
    n_val = int(round(0.2 * (n - n_test)))
    tags = np.empty(n, dtype=object)

    groups: list[np.ndarray]
    if dataset.task != "regression":
        classes, counts = np.unique(dataset.labels, return_counts=True)
        if counts.min() < 3:
            logger.warning("a class has fewer than 3 rows; falling back to an unstratified split")
            groups = [np.arange(n)]
        else:
            groups = [np.flatnonzero(dataset.labels == c) for c in classes]
    else:
        groups = [np.arange(n)]

    sizes = np.array([len(g) for g in groups])
    test_q = _quota(n_test, sizes)
    val_q = _quota(n_val, sizes - test_q)
    for g, t, v in zip(groups, test_q, val_q):
        g = rng.permutation(g)
        tags[g[:t]] = "test"
        tags[g[t : t + v]] = "val"
        tags[g[t + v :]] = "train"
    return replace(dataset, split=tags.astype(str))


# ---------------------------------------------------------------- losses


def loss(pred: Tensor, y, task: str, batch: MixedBatch | None = None) -> Tensor:
    """Mean task loss; with ``batch`` the per-row loss is the weighted sum over mixed sources.

    Cross-entropy for classification (two-term form on the sigmoid output for
    binary), squared error for regression.  Probabilities are clamped at 1e-12.
    """
    y = np.asarray(y)
    B = pred.shape[0]
    idx = np.arange(B)[:, None] if batch is None else batch.target_index
    w = np.ones((B, 1)) if batch is None else batch.target_weight
    if pred.shape[0] != len(idx):
        raise ValueError(f"{pred.shape[0]} predictions for {len(idx)} targets")

    if task == "binary":
        t = (w * y[idx].astype(np.float64)).sum(axis=1)
        p = ad.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
        per_row = -(ad.log(p) * t + ad.log(1.0 - p) * (1.0 - t))
    elif task == "multiclass":
        C = pred.shape[1]
        T = np.zeros((B, C))
        np.add.at(T, (np.repeat(np.arange(B), idx.shape[1]), y[idx].ravel().astype(int)), w.ravel())
        per_row = -(ad.log(ad.clip(pred, PROB_CLAMP, 1.0)) * T).sum(axis=1)
    elif task == "regression":
        targets = y[idx].astype(np.float64)
        diff = pred.reshape(B, 1) - targets
        per_row = (diff * diff * w).sum(axis=1)
    else:
        raise ValueError(f"unknown task {task!r}")
    return per_row.mean()


# ---------------------------------------------------------------- optimiser


class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.weight_decay, self.eps = lr, weight_decay, eps
        self.beta1, self.beta2 = betas
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**t, 1.0 - b2**t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            data = p.data * (1.0 - self.lr * self.weight_decay) if self.weight_decay else p.data
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            p.data = data - (self.lr / c1) * m / denom

    def state(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}


def adamw_step(params: dict[str, Tensor], opt: AdamW) -> None:
    opt.step()


# ---------------------------------------------------------------- fit


@dataclass
class FitResult:
    model: ExcelFormer
    log: list[dict]
    best_epoch: int
    best_score: float


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return np.array_split(order, max(1, int(np.ceil(n / batch_size))))


def fit(
    model: ExcelFormer,
    X_train,
    y_train,
    X_val,
    y_val,
    config: TrainConfig,
    val_score: Callable[[ExcelFormer], float] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> FitResult:
    """Train with early stopping on the validation headline metric.

    Returns the best-validation parameters loaded into ``model``.  Regression
    targets are standardised with training statistics; the model's
    ``target_loc`` / ``target_scale`` undo it in :meth:`ExcelFormer.predict`.
    """
    task = model.config.task
    X_train = np.asarray(X_train, dtype=np.float64)
    X_val = np.asarray(X_val, dtype=np.float64)
    y_train, y_val = np.asarray(y_train), np.asarray(y_val)
    if task == "regression":
        loc, scale = float(y_train.mean()), float(y_train.std())
        model.target_loc, model.target_scale = loc, scale if scale > 0 else 1.0
        y_fit = (y_train - model.target_loc) / model.target_scale
    else:
        y_fit = y_train

    if val_score is None:
        def val_score(m: ExcelFormer) -> float:
            return task_metric(task, m.predict(X_val), y_val)

    rng = np.random.default_rng(config.seed)
    opt = AdamW(model.params, lr=config.lr, weight_decay=config.weight_decay)
    mix = config.mix
    best, best_state, best_epoch, since = -np.inf, model.state_dict(), 0, 0
    log: list[dict] = []
    t0 = time.perf_counter()

    for epoch in range(1, config.max_epochs + 1):
        total, count = 0.0, 0
        for b, rows in enumerate(_batches(len(X_train), config.batch_size, rng)):
            xb, yb = X_train[rows], y_fit[rows]
            plan = apply_scheme(xb, mix.scheme, rng, d=model.config.d, importance=model.importance,
                                alpha_h=mix.alpha_h, alpha_f=mix.alpha_f)
            z = mix_embeddings(model.embed(Tensor(plan.x)), plan)
            pred = model.head(model.encode(z, rng, training=True))
            batch_loss = loss(pred, yb, task, plan)
            value = batch_loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            model.zero_grad()
            batch_loss.backward()
            opt.step()
            total += value * len(rows)
            count += len(rows)

        score = float(val_score(model))
        if not np.isfinite(score):
            raise TrainingError(f"non-finite validation score at epoch {epoch}")
        entry = {"epoch": epoch, "train_loss": total / count, "val_metric": score,
                 "wall_seconds": time.perf_counter() - t0}
        log.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        if score > best:
            best, best_state, best_epoch, since = score, model.state_dict(), epoch, 0
        else:
            since += 1
            if since >= config.patience:
                break

    model.load_state_dict(best_state)
    return FitResult(model, log, best_epoch, best)


# ---------------------------------------------------------------- end-to-end


@dataclass
class RunResult:
    model: ExcelFormer
    preprocessor: object
    importance: np.ndarray
    features: np.ndarray
    test_metric: float
    fit: FitResult


def train_and_evaluate(
    X: np.ndarray,
    labels: np.ndarray,
    split_tags: np.ndarray,
    task: str,
    importance: np.ndarray,
    model_config: ModelConfig,
    train_config: TrainConfig,
    on_epoch=None,
) -> tuple[ExcelFormer, FitResult, float]:
    """Build a model on preprocessed features, fit on train/val, score on test."""
    tr, va, te = (np.flatnonzero(split_tags == s) for s in ("train", "val", "test"))
    model = ExcelFormer(model_config, X.shape[1], importance, seed=train_config.seed)
    result = fit(model, X[tr], labels[tr], X[va], labels[va], train_config, on_epoch=on_epoch)
    test = task_metric(task, model.predict(X[te]), labels[te]) if len(te) else float("nan")
    return model, result, test


def run(dataset: TabularDataset, model_config: ModelConfig | None = None, train_config: TrainConfig | None = None,
        on_epoch=None) -> RunResult:
    """Split (if needed), preprocess, train and test on one dataset."""
    train_config = train_config or TrainConfig()
    if dataset.split is None:
        dataset = split(dataset, train_config.seed)
    model_config = model_config or ModelConfig()
    model_config = replace(model_config, task=dataset.task, n_classes=max(dataset.n_classes, 2))
    X, imp, prep = preprocess_pipeline(dataset)
    model, result, test = train_and_evaluate(X, dataset.labels, dataset.split, dataset.task, imp,
                                             model_config, train_config, on_epoch)
    return RunResult(model, prep, imp, X, test, result)
