"""Experiment machinery: synthetic datasets, noise-column injection, random
rotations and the multi-seed comparison grids (rotation and augmentation).

Rotation happens after preprocessing, so the quantile transform cannot undo
it column by column; importance and the attention mask are re-estimated on
the rotated features.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, replace

import numpy as np

from .metrics import METRIC_NAMES, normalized_scores, rank_matrix
from .model import ModelConfig
from .preprocess import TabularDataset, importance, preprocess_pipeline
from .train import TrainConfig, split, train_and_evaluate

logger = logging.getLogger(__name__)

SYNTHETIC_KINDS = ("linear", "xor", "piecewise")

# ablation variants of the backbone
VARIANTS = {
    "full": {},
    "no-spa": {"use_spa": False},
    "no-iai": {"use_iai": False},
    "vanilla": {"use_spa": False, "use_iai": False},
}
VARIANT_ALIASES = {"vanilla-attention": "vanilla", "no_spa": "no-spa", "no_iai": "no-iai"}


def random_orthogonal(f: int, seed: int) -> np.ndarray:
    """Haar-distributed f x f orthogonal matrix (QR of a Gaussian with sign-fixed R)."""
    if f < 2:
        raise ValueError(f"rotation needs f >= 2, got {f}")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((f, f)))
    return q * np.sign(np.diag(r))


def add_noise_features(dataset: TabularDataset, seed: int) -> TabularDataset:
    """Append one standard-Gaussian column per existing numeric column."""
    if dataset.categorical.shape[1]:
        raise ValueError("noise injection expects an all-numeric dataset")
    rng = np.random.default_rng(seed)
    f = dataset.numeric.shape[1]
    noise = rng.standard_normal((dataset.n, f))
    start = sum(is_noise_column(n) for n in dataset.numeric_names)
    names = list(dataset.numeric_names) + [f"noise_{start + i}" for i in range(f)]
    return replace(dataset, numeric=np.hstack([dataset.numeric, noise]), numeric_names=names)


def is_noise_column(name: str) -> bool:
    return name.startswith("noise_")


def gen_synthetic(kind: str, n: int, f_informative: int = 2, f_noise: int = 4, task: str = "binary",
                  seed: int = 0, weights=None) -> TabularDataset:
    """Synthetic tables with known informative columns followed by Gaussian noise columns.

    ``linear``: thresholded (or raw) random linear score.  ``xor``: sign of the
    product of the first two features.  ``piecewise``: sum of axis-aligned
    step functions, one per informative feature.  ``weights`` fixes the
    linear score instead of drawing it.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
    if n < 50:
        raise ValueError(f"need n >= 50, got {n}")
    if task not in ("binary", "regression"):
        raise ValueError("synthetic data supports binary and regression tasks")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, f_informative + f_noise))
    inf = X[:, :f_informative]
    if kind == "linear":
        w = rng.standard_normal(f_informative) if weights is None else np.asarray(weights, dtype=np.float64)
        w = w / np.linalg.norm(w)
        score = inf @ w
    elif kind == "xor":
        if f_informative < 2:
            raise ValueError("xor needs at least 2 informative features")
        score = inf[:, 0] * inf[:, 1]
    else:
        cuts = rng.uniform(-1.0, 1.0, size=(f_informative, 2))
        lo, hi = cuts.min(axis=1), cuts.max(axis=1)
        score = np.sum((inf > lo) & (inf < hi), axis=1) - 0.5 * f_informative + rng.normal(0, 0.25, n)
    if task == "binary":
        labels = (score > 0).astype(np.int64)
    else:
        labels = score + 0.1 * rng.standard_normal(n)
    names = [f"x{i}" for i in range(f_informative)] + [f"noise_{i}" for i in range(f_noise)]
    return TabularDataset(X, np.empty((n, 0)), labels, task, names)


# ---------------------------------------------------------------- rotation grid


@dataclass
class ExperimentGrid:
    variants: list[str]
    seeds: list[int]
    rotated: tuple[bool, ...] = (False, True)

    def cells(self):
        for variant in self.variants:
            for rot in self.rotated:
                for seed in self.seeds:
                    yield variant, rot, seed

    def __len__(self) -> int:
        return len(self.variants) * len(self.rotated) * len(self.seeds)


def resolve_variant(name: str) -> str:
    name = VARIANT_ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
    return name


def variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    return replace(base, **VARIANTS[resolve_variant(variant)])


def run_rotation_experiment(
    dataset: TabularDataset,
    variants=("full", "vanilla"),
    n_seeds: int = 5,
    model_config: ModelConfig | None = None,
    train_config: TrainConfig | None = None,
    rotation: np.ndarray | None = None,
) -> list[dict]:
    """Train every (variant, rotated?, seed) cell and record its test metric.

    Each seed fixes the split, the rotation and the model initialisation, so
    the rotated and unrotated arms of a seed differ only in the rotation.
    ``rotation`` overrides the random rotation (e.g. the identity).
    """
    base = model_config or ModelConfig()
    tcfg = train_config or TrainConfig()
    base = replace(base, task=dataset.task, n_classes=max(dataset.n_classes, 2))
    grid = ExperimentGrid([resolve_variant(v) for v in variants], list(range(n_seeds)))
    prepared: dict[tuple[int, bool], tuple] = {}
    records = []
    for variant, rot, seed in grid.cells():
        key = (seed, rot)
        if key not in prepared:
            ds = split(dataset, seed) if dataset.split is None else dataset
            X, imp, _ = preprocess_pipeline(ds)
            if rot:
                Q = random_orthogonal(X.shape[1], seed) if rotation is None else rotation
                X = X @ Q
                train = ds.rows("train")
                imp = importance(X[train], ds.labels[train], ds.task)
            prepared[key] = (ds, X, imp)
        ds, X, imp = prepared[key]
        _, fit_result, test = train_and_evaluate(
            X, ds.labels, ds.split, ds.task, imp, variant_config(base, variant), replace(tcfg, seed=seed)
        )
        records.append({
            "variant": variant,
            "rotated": rot,
            "seed": seed,
            "metric": test,
            "metric_name": METRIC_NAMES[ds.task],
            "best_epoch": fit_result.best_epoch,
        })
        logger.info("cell %s rotated=%s seed=%d -> %.6f", variant, rot, seed, test)
    return records


def normalize_records(records: list[dict]) -> list[dict]:
    """Add ``normalized``: min-max of the metric over all cells sharing a seed."""
    out = [dict(r) for r in records]
    for seed in sorted({r["seed"] for r in out}):
        cells = [r for r in out if r["seed"] == seed]
        if len(cells) < 2:
            for r in cells:
                r["normalized"] = 0.0
            continue
        norm = normalized_scores(np.array([[r["metric"]] for r in cells]))
        for r, v in zip(cells, norm):
            r["normalized"] = float(v)
    return out


def rotation_drops(records: list[dict]) -> dict[str, dict[int, float]]:
    """Per variant and seed: normalised unrotated score minus normalised rotated score."""
    recs = normalize_records(records)
    lookup = {(r["variant"], r["rotated"], r["seed"]): r["normalized"] for r in recs}
    drops: dict[str, dict[int, float]] = {}
    for (variant, rot, seed), v in lookup.items():
        if rot or (variant, True, seed) not in lookup:
            continue
        drops.setdefault(variant, {})[seed] = v - lookup[(variant, True, seed)]
    return drops


def summarize(records: list[dict]) -> dict:
    """Mean and std of the raw and normalised metric for each (variant, rotated) arm."""
    recs = normalize_records(records)
    summary = {}
    for variant in dict.fromkeys(r["variant"] for r in recs):
        for rot in (False, True):
            arm = [r for r in recs if r["variant"] == variant and r["rotated"] == rot]
            if not arm:
                continue
            m = np.array([r["metric"] for r in arm])
            nm = np.array([r["normalized"] for r in arm])
            summary[f"{variant}/{'rotated' if rot else 'original'}"] = {
                "mean": float(m.mean()), "std": float(m.std()),
                "normalized_mean": float(nm.mean()), "normalized_std": float(nm.std()), "n": len(arm),
            }
    return summary


RESULT_FIELDS = ("variant", "rotated", "seed", "metric", "metric_name", "best_epoch")


def write_results(records: list[dict], csv_path, json_path=None) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in records:
            w.writerow({**r, "metric": repr(float(r["metric"]))})
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump({"version": 1, "summary": summarize(records)}, fh, indent=2)


# ---------------------------------------------------------------- augmentation grid


def run_augmentation_experiment(
    datasets: dict[str, TabularDataset],
    schemes=("none", "mixup", "cutmix", "feat", "hid"),
    n_seeds: int = 5,
    model_config: ModelConfig | None = None,
    train_config: TrainConfig | None = None,
) -> list[dict]:
    """Test metric for every (dataset, scheme, seed); splits and inits shared across schemes."""
    base = model_config or ModelConfig()
    tcfg = train_config or TrainConfig()
    records = []
    for name, dataset in datasets.items():
        cfg = replace(base, task=dataset.task, n_classes=max(dataset.n_classes, 2))
        for seed in range(n_seeds):
            ds = split(dataset, seed)
            X, imp, _ = preprocess_pipeline(ds)
            for scheme in schemes:
                mix = replace(tcfg.mix, scheme=scheme)
                _, fit_result, test = train_and_evaluate(
                    X, ds.labels, ds.split, ds.task, imp, cfg, replace(tcfg, seed=seed, mix=mix)
                )
                records.append({"dataset": name, "scheme": scheme, "seed": seed, "metric": test,
                                "best_epoch": fit_result.best_epoch})
                logger.info("aug %s %s seed=%d -> %.6f", name, scheme, seed, test)
    return records


def scheme_ranks(records: list[dict]) -> dict[str, float]:
    """Average rank of each scheme over datasets, after averaging seeds within a dataset."""
    schemes = list(dict.fromkeys(r["scheme"] for r in records))
    names = list(dict.fromkeys(r["dataset"] for r in records))
    S = np.array([[np.mean([r["metric"] for r in records if r["scheme"] == s and r["dataset"] == d])
                   for d in names] for s in schemes])
    R = rank_matrix(S)
    return {s: float(R[i].mean()) for i, s in enumerate(schemes)}
