import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from excelformer.autodiff import MASK_VALUE, Tensor
from excelformer.checks import check_layers, corrupted_tanh_gradient
from excelformer.model import (
    ExcelFormer,
    ModelConfig,
    build_mask,
    iai_init,
    load_checkpoint,
    save_checkpoint,
)

SMALL = dict(d=16, heads=4, n_layers=2)


def small_model(f=4, importance=None, seed=0, **kw):
    cfg = ModelConfig(**{**SMALL, **kw})
    return ExcelFormer(cfg, f, importance, seed=seed)


class TestMask:
    def test_worked_example(self):
        M = build_mask([0.9, 0.2, 0.5])
        np.testing.assert_array_equal(M, [[0, MASK_VALUE, MASK_VALUE], [0, 0, 0], [0, MASK_VALUE, 0]])

    def test_all_equal_is_open(self):
        np.testing.assert_array_equal(build_mask([0.3] * 4), 0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.9]), min_size=1, max_size=8))
    def test_structure(self, imp):
        M = build_mask(imp)
        assert np.all(np.diag(M) == 0)
        for i in range(len(imp)):
            for j in range(len(imp)):
                if imp[i] != imp[j]:
                    assert M[i, j] + M[j, i] == MASK_VALUE
                else:
                    assert M[i, j] == M[j, i] == 0


class TestIai:
    def test_arithmetic(self):
        # Var_prev 0.01 corresponds to fan_in 200
        p = {"block0.spa.wq": Tensor(np.zeros((200, 10)))}
        iai_init(p, 1e-4, np.random.default_rng(0))
        target = 1e-4 * 0.01
        assert target == pytest.approx(1e-6)
        assert p["block0.spa.wq"].data.var() == pytest.approx(target, rel=0.1)

    def test_sample_variance_large(self):
        p = {"block0.spa.wv": Tensor(np.zeros((1000, 1000))), "block0.spa.bv": Tensor(np.ones(1000))}
        iai_init(p, 1e-4, np.random.default_rng(1))
        assert p["block0.spa.wv"].data.var() == pytest.approx(1e-4 * 2 / 1000, rel=0.05)
        np.testing.assert_array_equal(p["block0.spa.bv"].data, 0.0)

    def test_gamma_one_is_standard(self):
        p = {"block0.spa.wk": Tensor(np.zeros((500, 400)))}
        iai_init(p, 1.0, np.random.default_rng(2))
        assert p["block0.spa.wk"].data.var() == pytest.approx(2 / 500, rel=0.05)

    def test_other_modules_untouched(self):
        p = {"block0.ffn.w1": Tensor(np.ones((3, 3)))}
        iai_init(p, 1e-4, np.random.default_rng(0))
        np.testing.assert_array_equal(p["block0.ffn.w1"].data, 1.0)

    def test_model_spa_weights_scaled(self):
        m = ExcelFormer(ModelConfig(), 5, seed=0)
        for k in "qkvo":
            v = m.params[f"block1.spa.w{k}"].data.var()
            assert 0.5 * 1e-4 * 2 / 256 < v < 2 * 1e-4 * 2 / 256

    def test_near_identity_at_default_width(self):
        m = ExcelFormer(ModelConfig(), 6, importance=np.linspace(0.1, 0.6, 6), seed=0)
        x = np.random.default_rng(3).standard_normal((20, 6))
        z0 = m.embed(x)
        zl = m.encode(z0)
        assert np.linalg.norm(zl.data - z0.data) / np.linalg.norm(z0.data) < 0.05


class TestEmbedding:
    def test_zero_params(self):
        m = small_model()
        for k in ("w1", "b1", "w2", "b2"):
            m.params[f"embed.{k}"].data[:] = 0
        np.testing.assert_array_equal(m.embed(np.ones((2, 4))).data, 0.0)

    def test_closed_gate(self):
        m = small_model()
        m.params["embed.w1"].data[:] = 0
        m.params["embed.b1"].data[:] = 0
        np.testing.assert_array_equal(m.embed(np.random.default_rng(0).standard_normal((3, 4))).data, 0.0)

    def test_closed_form(self):
        m = small_model()
        x = np.array([[0.3, -1.2, 2.0, 0.0]])
        p = {k: m.params[f"embed.{k}"].data for k in ("w1", "b1", "w2", "b2")}
        expected = np.tanh(x.T * p["w1"] + p["b1"]) * (x.T * p["w2"] + p["b2"])
        np.testing.assert_allclose(m.embed(x).data[0], expected, atol=1e-15)

    def test_per_feature_independence(self):
        m = small_model()
        x = np.random.default_rng(1).standard_normal((1, 4))
        a = m.embed(x).data
        x[0, 2] += 1.0
        b = m.embed(x).data
        changed = np.any(a != b, axis=2)[0]
        np.testing.assert_array_equal(changed, [False, False, True, False])

    def test_parameter_count(self):
        m = small_model(f=5)
        assert m.n_parameters("embed.") == 5 * (2 * 16 + 2 * 16)

    def test_width_mismatch(self):
        with pytest.raises(ValueError, match="expected input"):
            small_model().embed(np.ones((2, 3)))


class TestSpa:
    def test_full_mask_attends_to_self(self):
        # strictly ordered importance masks every off-diagonal in one direction only;
        # a per-row full mask needs the most important feature, which sees only itself
        m = small_model(importance=[0.9, 0.1, 0.2, 0.3], gamma=1.0, attn_dropout=0.0)
        m.mask = np.where(np.eye(4) > 0, 0.0, MASK_VALUE)
        z = np.random.default_rng(2).standard_normal((3, 4, 16))
        p = {k: m.params[f"block0.spa.{k}"].data for k in ("wv", "bv", "wo", "bo")}
        expected = (z @ p["wv"] + p["bv"]) @ p["wo"] + p["bo"]
        np.testing.assert_allclose(m.spa(Tensor(z), 0).data, expected, atol=1e-12)

    def test_vanishing_branch(self):
        z = Tensor(np.random.default_rng(3).standard_normal((2, 4, 16)))
        norms = [np.linalg.norm(small_model(gamma=g).spa(z, 0).data) for g in (1e-2, 1e-4, 1e-6)]
        assert norms[0] > norms[1] > norms[2]
        assert norms[2] < 1e-3 * np.linalg.norm(z.data)

    @pytest.mark.parametrize("seed", range(5))
    def test_top_feature_insulated(self, seed):
        rng = np.random.default_rng(seed)
        imp = rng.permutation(4) / 4.0
        m = small_model(importance=imp, gamma=1.0, seed=seed)
        top = int(np.argmax(imp))
        z = rng.standard_normal((2, 4, 16))
        base = m.spa(Tensor(z), 0).data[:, top]
        for j in range(4):
            if j != top:
                zp = z.copy()
                zp[:, j] += rng.standard_normal((2, 16)) * 3
                assert np.max(np.abs(m.spa(Tensor(zp), 0).data[:, top] - base)) < 1e-10

    def test_dropout_only_in_training(self):
        m = small_model(gamma=1.0)
        z = Tensor(np.random.default_rng(4).standard_normal((2, 4, 16)))
        a = m.spa(z, 0, np.random.default_rng(0), training=False).data
        b = m.spa(z, 0, np.random.default_rng(0), training=True).data
        assert np.array_equal(a, m.spa(z, 0).data) and not np.array_equal(a, b)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="tokens"):
            small_model().spa(Tensor(np.ones((2, 3, 16))), 0)


class TestGlu:
    def test_closed_gate(self):
        m = small_model()
        m.params["block0.ffn.w1"].data[:] = 0
        m.params["block0.ffn.b1"].data[:] = 0
        np.testing.assert_array_equal(m.ffn(Tensor(np.ones((1, 4, 16))), 0).data, 0.0)

    def test_saturated_gate_passes_value(self):
        m = small_model()
        m.params["block0.ffn.w1"].data[:] = 0
        m.params["block0.ffn.b1"].data[:] = 50.0
        m.params["block0.ffn.w2"].data[:] = np.eye(16)
        m.params["block0.ffn.b2"].data[:] = 0
        z = np.random.default_rng(5).standard_normal((2, 4, 16))
        np.testing.assert_allclose(m.ffn(Tensor(z), 0).data, z, atol=1e-15)

    def test_parameter_parity_with_relu_feedforward(self):
        glu, relu = small_model(ffn="glu"), small_model(ffn="relu")
        assert glu.n_parameters("block") == relu.n_parameters("block")
        assert glu.n_parameters() == relu.n_parameters()


class TestHead:
    def test_binary_range(self):
        m = small_model()
        p = m(np.random.default_rng(6).standard_normal((8, 4)) * 5).data
        assert p.shape == (8,) and np.all((p > 0) & (p < 1))

    def test_multiclass_rows_sum_to_one(self):
        m = small_model(task="multiclass", n_classes=3)
        p = m(np.random.default_rng(7).standard_normal((5, 4))).data
        assert p.shape == (5, 3)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_regression_zero_params(self):
        m = small_model(task="regression")
        for k in m.params:
            if k.startswith("head."):
                m.params[k].data[...] = 0
        np.testing.assert_array_equal(m(np.ones((3, 4))).data, 0.0)

    def test_closed_form(self):
        m = small_model(task="regression")
        z = np.random.default_rng(8).standard_normal((2, 4, 16))
        p = {k: m.params[f"head.{k}"].data for k in ("wf", "bf", "slope", "wd", "bd")}
        u = np.einsum("bfd,fc->bdc", z, p["wf"]) + p["bf"]
        u = np.where(u > 0, u, p["slope"] * u)
        expected = np.einsum("bdc,d->bc", u, p["wd"][:, 0])[:, 0] + p["bd"][0]
        np.testing.assert_allclose(m.head(Tensor(z)).data, expected, atol=1e-12)

    def test_slope_initialised(self):
        assert small_model().params["head.slope"].item() == 0.25


class TestForward:
    def test_rows_independent(self):
        m = small_model()
        x = np.random.default_rng(9).standard_normal((3, 4))
        a = m(x).data
        b = m(np.vstack([x, x[1:2]])).data
        np.testing.assert_allclose(b[:3], a, atol=1e-14)
        assert b[3] == pytest.approx(a[1], abs=1e-14)

    def test_same_seed_same_parameters(self):
        a, b = small_model(seed=3), small_model(seed=3)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)

    def test_config_validation(self):
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig(d=10, heads=3)
        with pytest.raises(ValueError):
            ModelConfig(gamma=0.0)
        with pytest.raises(ValueError):
            ModelConfig(n_layers=0)

    def test_importance_shape_checked(self):
        with pytest.raises(ValueError, match="importance"):
            small_model(f=4, importance=[0.1, 0.2])


class TestGradients:
    def test_layer_suite_quick(self):
        for check in check_layers(n_points=1, layers=("embedding", "spa", "glu", "head")):
            assert check.max_error < 1e-6, check

    def test_corrupted_gradient_detected(self):
        with corrupted_tanh_gradient():
            (check,) = check_layers(n_points=1, layers=("glu",))
        assert check.max_error > 1e-2


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        m = small_model(task="regression", importance=[0.4, 0.1, 0.3, 0.2])
        m.target_loc, m.target_scale = 3.0, 2.0
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, m, {"kind": "test"}, {"note": 1})
        ck = load_checkpoint(path)
        x = np.random.default_rng(10).standard_normal((4, 4))
        np.testing.assert_array_equal(ck.model.predict(x), m.predict(x))
        np.testing.assert_array_equal(ck.model.mask, m.mask)
        assert ck.preprocessor_state == {"kind": "test"} and ck.extra == {"note": 1}

    def test_version_checked(self, tmp_path):
        import json
        m = small_model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, m)
        with np.load(path) as data:
            arrays = {k: data[k] for k in data.files}
        meta = json.loads(str(arrays["meta"]))
        meta["version"] = 99
        arrays["meta"] = np.array(json.dumps(meta))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path)

    def test_parameter_shape_mismatch(self):
        m = small_model()
        state = m.state_dict()
        state["head.wd"] = np.zeros((3, 1))
        with pytest.raises(ValueError):
            m.load_state_dict(state)


def test_mask_value_constant():
    assert MASK_VALUE == -1e5 and math.isfinite(MASK_VALUE)
