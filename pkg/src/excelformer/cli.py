"""Command-line entry point: ``train``, ``evaluate``, ``rotate-exp`` and ``gradcheck``.

Exit status is 0 on success, 1 for runtime or numeric failures and 2 for
usage or data errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .augment import SCHEMES, MixConfig
from .checks import check_layers
from .metrics import METRIC_NAMES, task_metric
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .preprocess import TASKS, DataError, Preprocessor, read_csv
from .rotharness import (
    SYNTHETIC_KINDS,
    VARIANTS,
    gen_synthetic,
    resolve_variant,
    run_rotation_experiment,
    write_results,
)
from .train import TrainConfig, TrainingError, run, split

RESULTS_VERSION = 1
GRADCHECK_TOL = 1e-4

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"task", "n_classes"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"mix"}
_MIX_KEYS = {f.name for f in fields(MixConfig)}


class UsageError(Exception):
    """Bad flags or configuration; maps to exit status 2."""


def load_config(path, overrides: dict) -> tuple[ModelConfig, TrainConfig]:
    """Read a flat JSON config and apply non-None ``overrides`` on top.

    Keys are the field names of ModelConfig, TrainConfig and MixConfig; ``mix``
    is accepted as a synonym for ``scheme``.
    """
    flat: dict = {}
    if path is not None:
        try:
            flat = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(flat, dict):
            raise UsageError(f"config {path} must hold a JSON object")
    if "mix" in flat:
        flat["scheme"] = flat.pop("mix")
    flat.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(flat) - _MODEL_KEYS - _TRAIN_KEYS - _MIX_KEYS
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)}")
    try:
        mix = MixConfig(**{k: flat[k] for k in _MIX_KEYS if k in flat})
        model = ModelConfig(**{k: flat[k] for k in _MODEL_KEYS if k in flat})
        train = TrainConfig(mix=mix, **{k: flat[k] for k in _TRAIN_KEYS if k in flat})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return model, train


def flat_config(model: ModelConfig, train: TrainConfig) -> dict:
    out = {k: v for k, v in asdict(model).items() if k in _MODEL_KEYS}
    out.update({k: v for k, v in asdict(train).items() if k in _TRAIN_KEYS})
    out.update(asdict(train.mix))
    return out


def _csv_list(text: str | None) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


def _write_json(path: Path, obj) -> None:
    # json writes floats with repr(), i.e. the shortest round-tripping form
    path.write_text(json.dumps(obj, indent=2, allow_nan=True) + "\n")


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    model_cfg, train_cfg = load_config(args.config, {"seed": args.seed, "scheme": args.mix})
    dataset = read_csv(args.data, args.target, args.task, _csv_list(args.categorical))
    dataset = split(dataset, train_cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "log.jsonl", "w") as log:
        def on_epoch(entry):
            log.write(json.dumps(entry) + "\n")
            log.flush()

        result = run(dataset, model_cfg, train_cfg, on_epoch=on_epoch)

    model = result.model
    save_checkpoint(out / "model.ckpt", model, result.preprocessor.state(), extra={
        "target": args.target, "classes": dataset.classes, "task": dataset.task,
    })
    _copy_rows(args.data, np.flatnonzero(dataset.split == "test"), out / "test.csv")
    counts = {s: int(np.sum(dataset.split == s)) for s in ("train", "val", "test")}
    _write_json(out / "results.json", {
        "version": RESULTS_VERSION,
        "task": dataset.task,
        "metric_name": METRIC_NAMES[dataset.task],
        "test_metric": float(result.test_metric),
        "best_val_metric": float(result.fit.best_score),
        "best_epoch": result.fit.best_epoch,
        "epochs_run": len(result.fit.log),
        "seed": train_cfg.seed,
        "rows": counts,
        "feature_names": result.preprocessor.feature_names,
        "importance": [float(v) for v in result.importance],
        "config": flat_config(model.config, train_cfg),
    })
    print(json.dumps({"test_metric": float(result.test_metric), "metric_name": METRIC_NAMES[dataset.task],
                      "out": str(out)}))
    return EXIT_OK


def _copy_rows(src, rows: np.ndarray, dst: Path) -> None:
    """Copy the header and the given data rows of a CSV verbatim."""
    with open(src, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = [r for r in reader if r]
    with open(dst, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(data[i] for i in rows)


# ---------------------------------------------------------------- evaluate


def cmd_evaluate(args) -> int:
    try:
        ckpt = load_checkpoint(args.model)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint {args.model}: {exc}") from None
    model, extra = ckpt.model, ckpt.extra
    task = model.config.task
    if args.task is not None and args.task != task:
        raise UsageError(f"checkpoint holds a {task} model but --task {args.task} was given")
    prep = Preprocessor.from_state(ckpt.preprocessor_state)
    target = args.target or extra["target"]

    with open(args.data, newline="") as fh:
        header = [h.strip() for h in next(csv.reader(fh), [])]
    found = [h for h in header if h != target]
    expected = prep.feature_names
    if sorted(found) != sorted(expected) or target not in header:
        raise DataError(f"feature mismatch: expected columns {expected} (target {target!r}), found {header}")

    dataset = read_csv(args.data, target, task, prep.categorical_names, classes=extra.get("classes"))
    if set(dataset.numeric_names) != set(prep.numeric_names):
        raise DataError(f"numeric columns differ: expected {prep.numeric_names}, found {dataset.numeric_names}")
    num = [dataset.numeric_names.index(c) for c in prep.numeric_names]
    cat = [dataset.categorical_names.index(c) for c in prep.categorical_names]
    X = prep.encode(dataset.numeric[:, num], dataset.categorical[:, cat])
    metric = task_metric(task, model.predict(X), dataset.labels)
    print(json.dumps({"metric_name": METRIC_NAMES[task], "metric": float(metric), "n_rows": dataset.n}))
    return EXIT_OK


# ---------------------------------------------------------------- rotate-exp


def cmd_rotate(args) -> int:
    try:
        variants = [resolve_variant(v) for v in _csv_list(args.variants)]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not variants:
        raise UsageError("--variants is empty")
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    model_cfg, train_cfg = load_config(args.config, {})
    if args.synthetic:
        dataset = gen_synthetic(args.synthetic, args.rows, task="binary", seed=args.data_seed)
    else:
        if not (args.target and args.task):
            raise UsageError("--data needs --target and --task")
        dataset = read_csv(args.data, args.target, args.task, _csv_list(args.categorical))
    records = run_rotation_experiment(dataset, variants, args.seeds, model_cfg, train_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_results(records, out / "rotation_results.csv", out / "rotation_summary.json")
    print(json.dumps({"cells": len(records), "csv": str(out / "rotation_results.csv")}))
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    results = check_layers(seed=args.seed, n_points=args.points)
    ok = True
    for r in results:
        passed = r.passed(GRADCHECK_TOL)
        ok &= passed
        print(f"{r.layer:<10} max_rel_error={r.max_error:.3e} coords={r.n_coords} {'PASS' if passed else 'FAIL'}")
    print("gradcheck", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAILURE


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="excelformer", description="Train, evaluate and probe ExcelFormer models on CSV tables.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="preprocess, fit and test one CSV dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--target", required=True)
    p.add_argument("--mix", choices=SCHEMES, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="flat JSON of model/train/mix settings")
    p.add_argument("--categorical", default=None, help="comma-separated columns to treat as categorical")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a saved model on a CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=TASKS, default=None, help="assert the model's task")
    p.add_argument("--target", default=None, help="defaults to the training target")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rotate-exp", help="rotated vs original features across variants and seeds")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data")
    src.add_argument("--synthetic", choices=SYNTHETIC_KINDS)
    p.add_argument("--target")
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--categorical", default=None)
    p.add_argument("--rows", type=int, default=1000, help="synthetic rows")
    p.add_argument("--data-seed", type=int, default=0, help="synthetic generator seed")
    p.add_argument("--variants", default="full,vanilla", help=f"comma list from {sorted(VARIANTS)}")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rotate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every network stage")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=5, help="random points per stage")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, FloatingPointError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
