"""Finite-difference gradient checks for each network stage on a small model."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, gradcheck
from .model import ExcelFormer, ModelConfig

LAYERS = ("embedding", "spa", "glu", "head", "model")

# Central differences straddling the P-ReLU kink at 0 are meaningless, so
# evaluation points keep every head pre-activation this many steps away.
# One step moves a pre-activation by h times its sensitivity, which is
# exactly 1 for the head bias and O(1) for every other coordinate.
KINK_MARGIN_STEPS = 10
_MAX_DRAWS = 50


@dataclass
class LayerCheck:
    layer: str
    max_error: float
    n_points: int
    n_coords: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_error < tol


def _small_model(seed: int, n_layers: int) -> ExcelFormer:
    # gamma 1 keeps the attention branch far from zero so its gradients are exercised
    cfg = ModelConfig(n_layers=n_layers, d=8, heads=2, attn_dropout=0.0, gamma=1.0)
    imp = np.random.default_rng(seed).random(4)
    return ExcelFormer(cfg, 4, imp, seed=seed)


def _stage(model: ExcelFormer, layer: str):
    """Return (function of the stage input, param-name prefix, input maker)."""
    if layer == "embedding":
        return model.embed, "embed.", "x"
    if layer == "spa":
        return lambda z: model.spa(z, 0), "block0.spa.", "z"
    if layer == "glu":
        return lambda z: model.ffn(z, 0), "block0.ffn.", "z"
    if layer == "head":
        return model.head, "head.", "z"
    return model.forward, "", "x"


def _kink_distance(model: ExcelFormer, layer: str, inp: np.ndarray) -> float:
    """Smallest |P-ReLU input| reached by the stage at ``inp`` (inf if it has no kink)."""
    if layer not in ("head", "model"):
        return np.inf
    with ad.no_grad():
        z = Tensor(inp) if layer == "head" else model.encode(model.embed(Tensor(inp)))
        u = ad.transpose(z, (0, 2, 1)) @ model.params["head.wf"] + model.params["head.bf"]
    return float(np.abs(u.data).min())


def _draw_point(model: ExcelFormer, layer: str, kind: str, rng: np.random.Generator, h: float) -> np.ndarray:
    shape = (4, model.n_features) if kind == "x" else (4, model.n_features, model.config.d)
    for _ in range(_MAX_DRAWS):
        inp = rng.standard_normal(shape) * (1.0 if kind == "x" else 0.5)
        if _kink_distance(model, layer, inp) > KINK_MARGIN_STEPS * h:
            return inp
    raise RuntimeError(f"could not draw a {layer} check point clear of the P-ReLU kink")


def _check_layer(layer: str, seed: int, n_points: int, h: float) -> LayerCheck:
    worst, coords = 0.0, 0
    for point in range(n_points):
        model = _small_model(seed + point, 3 if layer == "model" else 1)
        rng = np.random.default_rng(1000 * seed + point)
        fn, prefix, kind = _stage(model, layer)
        inp = _draw_point(model, layer, kind, rng, h)
        out_shape = fn(Tensor(inp)).shape
        weights = Tensor(rng.standard_normal(out_shape))

        def loss_of_input(t):
            return (fn(t) * weights).sum()

        worst = max(worst, gradcheck(loss_of_input, inp, h=h))
        coords += inp.size
        for name in [k for k in model.params if k.startswith(prefix)]:
            original = model.params[name]

            def loss_of_param(t, name=name):
                model.params[name] = t
                try:
                    return (fn(Tensor(inp)) * weights).sum()
                finally:
                    model.params[name] = original

            worst = max(worst, gradcheck(loss_of_param, original.data, h=h))
            coords += original.data.size
    return LayerCheck(layer, float(worst), n_points, coords)


def check_layers(seed: int = 0, n_points: int = 5, layers=LAYERS, h: float = 1e-5) -> list[LayerCheck]:
    """Central-difference check of input and parameter gradients for each stage.

    Dropout is off; every parameter coordinate of the stage is checked.
    Points are redrawn until no head pre-activation lies within
    ``KINK_MARGIN_STEPS * h`` of the P-ReLU kink.
    """
    unknown = set(layers) - set(LAYERS)
    if unknown:
        raise ValueError(f"unknown layers {sorted(unknown)}; expected a subset of {LAYERS}")
    return [_check_layer(layer, seed, n_points, h) for layer in layers]


@contextlib.contextmanager
def corrupted_tanh_gradient(factor: float = 1.5):
    """Scale the tanh backward pass by ``factor`` (a negative control for the checks)."""
    real = ad.tanh

    def bad_tanh(a):
        out = real(a)
        inner = out._backward
        out._backward = lambda g: tuple((p, factor * gp) for p, gp in inner(g))
        return out

    ad.tanh = bad_tanh
    try:
        yield
    finally:
        ad.tanh = real
