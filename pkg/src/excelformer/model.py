"""ExcelFormer network: GLU feature embedding, alternating semi-permeable
attention (SPA) and GLU blocks with residual shortcuts, and the two-stage head.

Parameters live in a flat ``dict[str, Tensor]`` so that optimisers,
checkpoints and gradient checks can address them by name.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import MASK_VALUE, Tensor

CHECKPOINT_VERSION = 1
EMBED_VALUE_BOUND = 0.04


@dataclass
class ModelConfig:
    n_layers: int = 3
    d: int = 256
    heads: int = 32
    attn_dropout: float = 0.3
    gamma: float = 1e-4
    task: str = "binary"
    n_classes: int = 2
    # ablation switches
    use_spa: bool = True
    use_iai: bool = True
    ffn: str = "glu"  # "glu" or "relu" (two-layer feedforward)

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.task not in ("binary", "multiclass", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "multiclass" and self.n_classes < 2:
            raise ValueError("multiclass needs n_classes >= 2")
        if self.ffn not in ("glu", "relu"):
            raise ValueError(f"unknown ffn {self.ffn!r}")

    @property
    def out_dim(self) -> int:
        return self.n_classes if self.task == "multiclass" else 1


def build_mask(importance) -> np.ndarray:
    """M[i, j] = MASK_VALUE where feature i is strictly more important than j, else 0."""
    imp = np.asarray(importance, dtype=np.float64)
    return np.where(imp[:, None] > imp[None, :], MASK_VALUE, 0.0)


def he_variance(fan_in: int) -> float:
    return 2.0 / fan_in


def iai_init(params: dict[str, Tensor], gamma: float, rng: np.random.Generator) -> dict[str, Tensor]:
    """Redraw every SPA weight with variance ``gamma * 2/fan_in``; SPA biases become zero."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    for name, p in params.items():
        if ".spa." not in name:
            continue
        if name.rsplit(".", 1)[-1].startswith("w"):
            fan_in = p.shape[0]
            p.data = rng.normal(0.0, math.sqrt(gamma * he_variance(fan_in)), size=p.shape)
        else:
            p.data = np.zeros(p.shape)
    return params


class ExcelFormer:
    def __init__(self, config: ModelConfig, n_features: int, importance=None, seed: int = 0):
        self.config = config
        self.n_features = n_features
        imp = np.ones(n_features) if importance is None else np.asarray(importance, dtype=np.float64)
        if imp.shape != (n_features,):
            raise ValueError(f"importance has shape {imp.shape}, expected ({n_features},)")
        self.importance = imp
        self.mask = build_mask(imp) if config.use_spa else np.zeros((n_features, n_features))
        self.params = self._init_params(np.random.default_rng(seed))
        # regression targets are fitted standardised; predict() maps back
        self.target_loc, self.target_scale = 0.0, 1.0

    # ------------------------------------------------------------ parameters

    def _init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        cfg, f, d = self.config, self.n_features, self.config.d
        P: dict[str, np.ndarray] = {}
        # Each feature owns a 1 -> d map, so the gate uses the fan-in-1 bound.
        # The value branch is kept small so the unattenuated GLU blocks start
        # close to identity.
        for k in ("w1", "b1"):
            P[f"embed.{k}"] = rng.uniform(-1.0, 1.0, size=(f, d))
        for k in ("w2", "b2"):
            P[f"embed.{k}"] = rng.uniform(-EMBED_VALUE_BOUND, EMBED_VALUE_BOUND, size=(f, d))
        he = math.sqrt(he_variance(d))
        fan = 1.0 / math.sqrt(d)
        for layer in range(cfg.n_layers):
            for k in ("q", "k", "v", "o"):
                P[f"block{layer}.spa.w{k}"] = rng.normal(0.0, he, size=(d, d))
                P[f"block{layer}.spa.b{k}"] = np.zeros(d)
            for k in ("1", "2"):
                P[f"block{layer}.ffn.w{k}"] = rng.uniform(-fan, fan, size=(d, d))
                P[f"block{layer}.ffn.b{k}"] = np.zeros(d)
        C = cfg.out_dim
        P["head.wf"] = rng.normal(0.0, math.sqrt(he_variance(f)), size=(f, C))
        P["head.bf"] = np.zeros(C)
        P["head.slope"] = np.array(0.25)
        P["head.wd"] = rng.normal(0.0, he, size=(d, 1))
        P["head.bd"] = np.zeros(1)
        params = {k: Tensor(v, requires_grad=True) for k, v in P.items()}
        iai_init(params, cfg.gamma if cfg.use_iai else 1.0, rng)
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self, prefix: str = "") -> int:
        return sum(p.data.size for k, p in self.params.items() if k.startswith(prefix))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ValueError(f"state keys differ from model parameters: {sorted(missing)}")
        for k, v in state.items():
            if self.params[k].shape != np.shape(v):
                raise ValueError(f"{k}: shape {np.shape(v)} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # ------------------------------------------------------------ forward pieces

    def embed(self, x) -> Tensor:
        """(B, f) -> (B, f, d): one tanh-gated affine pair per feature."""
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ValueError(f"expected input of shape (batch, {self.n_features}), got {x.shape}")
        p = self.params
        xe = x.reshape(x.shape[0], self.n_features, 1)
        gate = ad.tanh(xe * p["embed.w1"] + p["embed.b1"])
        return gate * (xe * p["embed.w2"] + p["embed.b2"])

    def spa(self, z: Tensor, layer: int, rng=None, training: bool = False) -> Tensor:
        """Masked multi-head attention branch (the caller adds the shortcut)."""
        cfg, p = self.config, self.params
        pre = f"block{layer}.spa."
        if z.ndim != 3 or z.shape[1:] != (self.n_features, cfg.d):
            raise ValueError(f"expected tokens of shape (batch, {self.n_features}, {cfg.d}), got {z.shape}")
        h = cfg.heads
        q = ad.split_heads(ad.affine(z, p[pre + "wq"], p[pre + "bq"]), h)
        k = ad.split_heads(ad.affine(z, p[pre + "wk"], p[pre + "bk"]), h)
        v = ad.split_heads(ad.affine(z, p[pre + "wv"], p[pre + "bv"]), h)
        scores = q @ ad.transpose(k, (0, 2, 1))
        attn = ad.masked_softmax(scores, self.mask, scale=1.0 / math.sqrt(cfg.d // h))
        attn = ad.dropout(attn, cfg.attn_dropout, rng, training)
        out = ad.merge_heads(attn @ v, h)
        return ad.affine(out, p[pre + "wo"], p[pre + "bo"])

    def ffn(self, z: Tensor, layer: int) -> Tensor:
        p = self.params
        pre = f"block{layer}.ffn."
        if self.config.ffn == "glu":
            return ad.tanh(ad.affine(z, p[pre + "w1"], p[pre + "b1"])) * ad.affine(z, p[pre + "w2"], p[pre + "b2"])
        return ad.affine(ad.relu(ad.affine(z, p[pre + "w2"], p[pre + "b2"])), p[pre + "w1"], p[pre + "b1"])

    def encode(self, z: Tensor, rng=None, training: bool = False) -> Tensor:
        for layer in range(self.config.n_layers):
            z = z + self.spa(z, layer, rng, training)
            z = z + self.ffn(z, layer)
        return z

    def head_logits(self, z: Tensor) -> Tensor:
        """(B, f, d) -> (B, C) before the output nonlinearity."""
        p = self.params
        B = z.shape[0]
        u = ad.transpose(z, (0, 2, 1)) @ p["head.wf"] + p["head.bf"]  # (B, d, C)
        u = ad.prelu(u, p["head.slope"])
        out = ad.transpose(u, (0, 2, 1)) @ p["head.wd"] + p["head.bd"]  # (B, C, 1)
        return out.reshape(B, self.config.out_dim)

    def head(self, z: Tensor) -> Tensor:
        logits = self.head_logits(z)
        task = self.config.task
        if task == "multiclass":
            return ad.softmax(logits)
        flat = logits.reshape(logits.shape[0])
        return ad.sigmoid(flat) if task == "binary" else flat

    def forward(self, x, rng=None, training: bool = False) -> Tensor:
        return self.head(self.encode(self.embed(x), rng, training))

    __call__ = forward

    def predict(self, X: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Evaluation-mode outputs (probabilities or regression values) as an array."""
        X = np.asarray(X, dtype=np.float64)
        with ad.no_grad():
            outs = [self.forward(Tensor(X[i : i + batch_size])).data for i in range(0, len(X), batch_size)]
        out = np.concatenate(outs, axis=0) if outs else np.empty((0,))
        if self.config.task == "regression":
            out = out * self.target_scale + self.target_loc
        return out


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model: ExcelFormer
    preprocessor_state: dict | None = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, model: ExcelFormer, preprocessor_state: dict | None = None, extra: dict | None = None) -> None:
    """Write config, mask, importance and parameters to one ``.npz`` document."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "n_features": model.n_features,
        "importance": model.importance.tolist(),
        "target_loc": model.target_loc,
        "target_scale": model.target_scale,
        "preprocessor": preprocessor_state,
        "extra": extra or {},
    }
    arrays = {f"param:{k}": v for k, v in model.state_dict().items()}
    arrays["mask"] = model.mask
    arrays["meta"] = np.array(json.dumps(meta))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        model = ExcelFormer(ModelConfig(**meta["config"]), meta["n_features"], meta["importance"])
        model.load_state_dict({k[len("param:") :]: data[k] for k in data.files if k.startswith("param:")})
        model.mask = np.array(data["mask"])
        model.target_loc, model.target_scale = meta["target_loc"], meta["target_scale"]
    return Checkpoint(model, meta["preprocessor"], meta["extra"])
