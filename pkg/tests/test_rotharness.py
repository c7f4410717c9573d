import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import pdist

from excelformer.metrics import auc
from excelformer.model import ExcelFormer, ModelConfig
from excelformer.preprocess import TabularDataset, importance, preprocess_pipeline
from excelformer.rotharness import (
    ExperimentGrid,
    add_noise_features,
    gen_synthetic,
    is_noise_column,
    normalize_records,
    random_orthogonal,
    resolve_variant,
    rotation_drops,
    run_rotation_experiment,
    scheme_ranks,
    summarize,
    variant_config,
    write_results,
)
from excelformer.train import TrainConfig, split

TINY = ModelConfig(n_layers=1, d=8, heads=2)
QUICK = TrainConfig(lr=1e-3, max_epochs=2, patience=1)


class TestRotation:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 40), st.integers(0, 10_000))
    def test_orthogonal_with_unit_determinant(self, f, seed):
        Q = random_orthogonal(f, seed)
        assert np.abs(Q.T @ Q - np.eye(f)).max() < 1e-10
        assert abs(abs(np.linalg.det(Q)) - 1.0) < 1e-8

    def test_inverse_restores_data(self):
        X = np.random.default_rng(0).standard_normal((50, 6))
        Q = random_orthogonal(6, 1)
        assert np.abs(X @ Q @ Q.T - X).max() < 1e-10

    @settings(max_examples=20, deadline=None)
    @given(st.integers(2, 12), st.integers(0, 10_000))
    def test_isometry(self, f, seed):
        X = np.random.default_rng(seed).standard_normal((20, f)) * 3
        Q = random_orthogonal(f, seed + 1)
        np.testing.assert_allclose(pdist(X @ Q), pdist(X), atol=1e-8)

    def test_seeds_differ_and_repeat(self):
        assert np.linalg.norm(random_orthogonal(5, 0) - random_orthogonal(5, 1)) > 0.1
        np.testing.assert_array_equal(random_orthogonal(5, 3), random_orthogonal(5, 3))

    def test_haar_first_entry_moments(self):
        # under the Haar measure each entry has mean 0 and variance 1/f
        draws = np.array([random_orthogonal(4, s)[0, 0] for s in range(4000)])
        assert abs(draws.mean()) < 0.03
        assert abs(draws.var() - 0.25) < 0.02

    def test_needs_two_features(self):
        with pytest.raises(ValueError, match="f >= 2"):
            random_orthogonal(1, 0)


class TestNoiseFeatures:
    def setup_method(self):
        self.ds = gen_synthetic("linear", 1000, 2, 0, seed=4)
        self.noisy = add_noise_features(self.ds, seed=5)

    def test_shape_and_untouched_columns(self):
        assert self.noisy.n_features == 2 * self.ds.n_features
        np.testing.assert_array_equal(self.noisy.numeric[:, :2], self.ds.numeric)
        np.testing.assert_array_equal(self.noisy.labels, self.ds.labels)
        assert [is_noise_column(n) for n in self.noisy.feature_names] == [False, False, True, True]

    def test_injected_importance_near_zero(self):
        _, imp, prep = preprocess_pipeline(split(self.noisy, 0))
        flagged = [is_noise_column(n) for n in prep.feature_names]
        assert np.all(imp[flagged] < 0.1)
        assert np.all(imp[~np.array(flagged)].min() > imp[flagged].max())

    def test_names_stay_unique_when_noise_already_present(self):
        noisy = add_noise_features(gen_synthetic("xor", 100, 2, 2, seed=0), seed=1)
        assert noisy.feature_names == ["x0", "x1", "noise_0", "noise_1",
                                       "noise_2", "noise_3", "noise_4", "noise_5"]

    def test_rejects_categorical(self):
        ds = TabularDataset(np.zeros((5, 1)), np.array([["a"]] * 5), np.zeros(5, int), "binary")
        with pytest.raises(ValueError, match="all-numeric"):
            add_noise_features(ds, 0)


class TestSynthetic:
    def test_xor_defeats_linear_scorers(self):
        ds = gen_synthetic("xor", 2000, 2, 0, seed=0)
        X, y = ds.numeric, ds.labels
        A = np.column_stack([X, np.ones(len(X))])
        w = np.linalg.lstsq(A, y.astype(float), rcond=None)[0]
        assert auc(A @ w, y) < 0.6
        for theta in np.linspace(0, 2 * np.pi, 16, endpoint=False):
            assert auc(X @ [np.cos(theta), np.sin(theta)], y) < 0.6

    def test_linear_importance_ordering(self):
        ds = gen_synthetic("linear", 1500, 2, 4, seed=1, weights=[1.0, 1.0])
        imp = importance(ds.numeric, ds.labels, "binary")
        assert imp[:2].min() > imp[2:].max()

    @pytest.mark.parametrize("kind", ["linear", "xor", "piecewise"])
    def test_seed_reproducible(self, kind):
        a, b = gen_synthetic(kind, 200, seed=9), gen_synthetic(kind, 200, seed=9)
        np.testing.assert_array_equal(a.numeric, b.numeric)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert set(np.unique(a.labels)) == {0, 1}

    def test_regression_kind(self):
        ds = gen_synthetic("piecewise", 300, task="regression", seed=2)
        assert ds.task == "regression" and ds.labels.dtype == np.float64

    def test_fixed_weights(self):
        ds = gen_synthetic("linear", 500, 2, 0, seed=0, weights=[1.0, 0.0])
        np.testing.assert_array_equal(ds.labels, (ds.numeric[:, 0] > 0).astype(int))

    def test_errors(self):
        with pytest.raises(ValueError, match="n >= 50"):
            gen_synthetic("xor", 10)
        with pytest.raises(ValueError, match="unknown synthetic kind"):
            gen_synthetic("spiral", 100)


class TestGrid:
    def test_cell_count_and_csv(self, tmp_path):
        ds = gen_synthetic("xor", 200, seed=0)
        recs = run_rotation_experiment(ds, ("full", "vanilla"), 3, TINY, QUICK)
        assert len(recs) == len(ExperimentGrid(["full", "vanilla"], [0, 1, 2])) == 12
        write_results(recs, tmp_path / "r.csv", tmp_path / "s.json")
        with open(tmp_path / "r.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 12
        assert {(r["variant"], r["rotated"]) for r in rows} == {
            ("full", "False"), ("full", "True"), ("vanilla", "False"), ("vanilla", "True")}
        assert float(rows[0]["metric"]) == recs[0]["metric"]
        summary = json.loads((tmp_path / "s.json").read_text())["summary"]
        assert summary["full/rotated"]["n"] == 3

    def test_identity_rotation_is_bit_identical(self):
        ds = gen_synthetic("linear", 200, seed=1)
        recs = run_rotation_experiment(ds, ("full",), 2, TINY, QUICK, rotation=np.eye(ds.n_features))
        plain = {r["seed"]: r["metric"] for r in recs if not r["rotated"]}
        rotated = {r["seed"]: r["metric"] for r in recs if r["rotated"]}
        assert plain == rotated

    def test_reproducible(self):
        ds = gen_synthetic("linear", 150, seed=2)
        a = run_rotation_experiment(ds, ("no-iai",), 1, TINY, QUICK)
        b = run_rotation_experiment(ds, ("no-iai",), 1, TINY, QUICK)
        assert a == b

    def test_mask_degenerates_under_tied_importance(self):
        x = np.random.default_rng(0).standard_normal((5, 4))
        imp = np.full(4, 0.3)
        full = ExcelFormer(variant_config(TINY, "full"), 4, imp, seed=1)
        nospa = ExcelFormer(variant_config(TINY, "no-spa"), 4, imp, seed=1)
        np.testing.assert_array_equal(full.predict(x), nospa.predict(x))

    def test_variant_names(self):
        assert resolve_variant("vanilla-attention") == "vanilla"
        cfg = variant_config(TINY, "vanilla")
        assert not cfg.use_spa and not cfg.use_iai
        with pytest.raises(ValueError, match="unknown variant"):
            run_rotation_experiment(gen_synthetic("xor", 100), ("full", "bogus"), 1, TINY, QUICK)


def _records(values):
    return [{"variant": v, "rotated": r, "seed": s, "metric": m} for (v, r, s), m in values.items()]


class TestAggregation:
    def test_normalize_per_seed(self):
        recs = normalize_records(_records({
            ("full", False, 0): 0.9, ("full", True, 0): 0.7, ("vanilla", False, 0): 0.8,
            ("vanilla", True, 0): 0.5, ("full", False, 1): 0.6, ("full", True, 1): 0.6,
        }))
        seed0 = [r["normalized"] for r in recs if r["seed"] == 0]
        np.testing.assert_allclose(seed0, [1.0, 0.5, 0.75, 0.0])

    def test_drops(self):
        drops = rotation_drops(_records({
            ("full", False, 0): 0.9, ("full", True, 0): 0.7, ("vanilla", False, 0): 0.8, ("vanilla", True, 0): 0.5,
        }))
        assert drops["full"][0] == pytest.approx(0.5)
        assert drops["vanilla"][0] == pytest.approx(0.75)

    def test_summary_keys(self):
        s = summarize(_records({("full", False, 0): 0.9, ("full", True, 0): 0.7}))
        assert set(s) == {"full/original", "full/rotated"}
        assert s["full/original"]["mean"] == 0.9

    def test_scheme_ranks_average_seeds_first(self):
        recs = [
            {"dataset": "a", "scheme": "feat", "seed": 0, "metric": 0.9},
            {"dataset": "a", "scheme": "feat", "seed": 1, "metric": 0.5},
            {"dataset": "a", "scheme": "none", "seed": 0, "metric": 0.6},
            {"dataset": "a", "scheme": "none", "seed": 1, "metric": 0.6},
            {"dataset": "b", "scheme": "feat", "seed": 0, "metric": 0.1},
            {"dataset": "b", "scheme": "none", "seed": 0, "metric": 0.2},
        ]
        assert scheme_ranks(recs) == {"feat": 1.5, "none": 1.5}
