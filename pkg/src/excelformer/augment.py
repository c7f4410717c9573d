"""Hid-Mix and Feat-Mix augmentation, with vanilla Mixup and tabular CutMix baselines.

Labels are never interpolated directly.  A mixed batch carries, for every row,
a short list of source rows and weights; the loss is the weighted sum of the
per-source losses.  This keeps classification and regression on one path and
makes the successive Feat-Mix -> embedding -> Hid-Mix composition exact.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

logger = logging.getLogger(__name__)

SCHEMES = ("none", "hid", "feat", "both", "mixup", "cutmix")


@dataclass
class MixConfig:
    scheme: str = "none"
    alpha_h: float = 0.5
    alpha_f: float = 0.5

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown mix scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.alpha_h <= 0 or self.alpha_f <= 0:
            raise ValueError("Beta parameters must be positive")


class Mixed(NamedTuple):
    x: np.ndarray
    y1: object
    y2: object
    coef: float  # weight on y1
    lam: float  # the Beta draw
    select: np.ndarray | None  # 0/1 selection vector (None for Mixup)

    @property
    def y(self):
        return self.coef * np.asarray(self.y1, dtype=np.float64) + (1.0 - self.coef) * np.asarray(self.y2, dtype=np.float64)


def choose_k(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """0/1 vector of length n with exactly k ones at uniformly random positions."""
    s = np.zeros(n)
    s[rng.permutation(n)[:k]] = 1.0
    return s


def _choose_rows(lengths_k: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Row-wise version of :func:`choose_k`: row b gets exactly ``lengths_k[b]`` ones."""
    order = np.argsort(rng.random((len(lengths_k), n)), axis=1)
    ranks = np.argsort(order, axis=1)
    return (ranks < lengths_k[:, None]).astype(np.float64)


def importance_coefficient(select, importance) -> np.ndarray:
    """Share of total importance carried by the selected features (rows of ``select``)."""
    imp = np.asarray(importance, dtype=np.float64)
    total = imp.sum()
    if not total > 0:
        raise ValueError(
            "feature importances sum to zero; Feat-Mix cannot weight labels. "
            "Check the importance estimator output (is every column constant or independent of the target?)"
        )
    return np.asarray(select, dtype=np.float64) @ imp / total


# ---------------------------------------------------------------- single-pair operations


def hid_mix(z1, z2, y1, y2, alpha: float, rng: np.random.Generator, lam: float | None = None) -> Mixed:
    """Swap a random subset of embedding dimensions (same subset for every token)."""
    z1, z2 = np.asarray(z1, dtype=np.float64), np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape:
        raise ValueError(f"hid_mix: shapes {z1.shape} and {z2.shape} differ")
    d = z1.shape[-1]
    if d == 0:
        raise ValueError("hid_mix: embedding width is zero")
    lam = rng.beta(alpha, alpha) if lam is None else lam
    s_h = choose_k(d, int(np.floor(lam * d)), rng)
    S = np.broadcast_to(s_h, z1.shape)
    return Mixed(S * z1 + (1.0 - S) * z2, y1, y2, float(lam), float(lam), s_h)


def feat_mix(x1, x2, y1, y2, alpha: float, importance, rng: np.random.Generator, lam: float | None = None, select=None) -> Mixed:
    """Swap a random subset of raw features; weight labels by the importance they carry."""
    x1, x2 = np.asarray(x1, dtype=np.float64), np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise ValueError(f"feat_mix: shapes {x1.shape} and {x2.shape} differ")
    f = x1.shape[-1]
    lam = rng.beta(alpha, alpha) if lam is None else lam
    s_f = choose_k(f, int(np.floor(lam * f)), rng) if select is None else np.asarray(select, dtype=np.float64)
    coef = float(importance_coefficient(s_f, importance))
    return Mixed(s_f * x1 + (1.0 - s_f) * x2, y1, y2, coef, float(lam), s_f)


def mixup_vanilla(x1, x2, y1, y2, alpha: float, rng: np.random.Generator, lam: float | None = None) -> Mixed:
    x1, x2 = np.asarray(x1, dtype=np.float64), np.asarray(x2, dtype=np.float64)
    lam = rng.beta(alpha, alpha) if lam is None else lam
    return Mixed(lam * x1 + (1.0 - lam) * x2, y1, y2, float(lam), float(lam), None)


def cutmix_tabular(x1, x2, y1, y2, alpha: float, rng: np.random.Generator, lam: float | None = None, select=None) -> Mixed:
    """Feat-Mix with the label weight set to the plain fraction of swapped-in features."""
    x1, x2 = np.asarray(x1, dtype=np.float64), np.asarray(x2, dtype=np.float64)
    f = x1.shape[-1]
    lam = rng.beta(alpha, alpha) if lam is None else lam
    s_f = choose_k(f, int(np.floor(lam * f)), rng) if select is None else np.asarray(select, dtype=np.float64)
    return Mixed(s_f * x1 + (1.0 - s_f) * x2, y1, y2, float(s_f.sum() / f), float(lam), s_f)


# ---------------------------------------------------------------- batches


@dataclass
class MixedBatch:
    x: np.ndarray  # (B, f) inputs after any raw-feature mixing
    target_index: np.ndarray  # (B, K) rows of the original batch whose labels are mixed
    target_weight: np.ndarray  # (B, K) their weights; each row sums to 1
    hid_select: np.ndarray | None = None  # (B, d) embedding dimensions kept from the row itself
    hid_partner: np.ndarray | None = None  # (B,) partner row for Hid-Mix
    feat_select: np.ndarray | None = None  # (B, f)
    feat_partner: np.ndarray | None = None
    lam_h: np.ndarray | None = None
    lam_f: np.ndarray | None = None
    coef_f: np.ndarray | None = None  # Lambda (Feat-Mix) or count fraction (CutMix) or lambda (Mixup)

    @property
    def coef(self) -> np.ndarray:
        """Weight on each row's own label."""
        own = self.target_index == np.arange(len(self.x))[:, None]
        return (self.target_weight * own).sum(axis=1)


def _identity_batch(x: np.ndarray) -> MixedBatch:
    B = len(x)
    return MixedBatch(x.copy(), np.arange(B)[:, None], np.ones((B, 1)))


def apply_scheme(
    x,
    scheme: str,
    rng: np.random.Generator,
    d: int | None = None,
    importance=None,
    alpha_h: float = 0.5,
    alpha_f: float = 0.5,
    lam_h=None,
    lam_f=None,
) -> MixedBatch:
    """Draw the mixing plan for one batch.

    Raw-feature schemes (``feat``, ``mixup``, ``cutmix``) are applied to ``x``
    here.  Hid-Mix needs the embeddings, so only its plan is drawn; apply it
    with :func:`mix_embeddings` after the embedding layer.  ``lam_h`` /
    ``lam_f`` pin the Beta draws (scalar or per-row), for tests.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown mix scheme {scheme!r}; expected one of {SCHEMES}")
    x = np.asarray(x, dtype=np.float64)
    B, f = x.shape
    if scheme == "none":
        return _identity_batch(x)
    if B < 2:
        logger.warning("batch of size %d cannot be mixed; passing it through", B)
        return _identity_batch(x)

    rows = np.arange(B)
    batch = _identity_batch(x)

    if scheme in ("feat", "both", "mixup", "cutmix"):
        perm = rng.permutation(B)
        lam = rng.beta(alpha_f, alpha_f, size=B) if lam_f is None else np.broadcast_to(np.asarray(lam_f, dtype=np.float64), (B,)).copy()
        if scheme == "mixup":
            coef = lam
            xm = lam[:, None] * x + (1.0 - lam[:, None]) * x[perm]
            select = None
        else:
            k = np.floor(lam * f).astype(int)
            select = _choose_rows(k, f, rng)
            coef = importance_coefficient(select, importance) if scheme in ("feat", "both") else k / f
            xm = select * x + (1.0 - select) * x[perm]
        batch = MixedBatch(
            xm,
            np.stack([rows, perm], axis=1),
            np.stack([coef, 1.0 - coef], axis=1),
            feat_select=select,
            feat_partner=perm,
            lam_f=lam,
            coef_f=coef,
        )

    if scheme in ("hid", "both"):
        if d is None or d <= 0:
            raise ValueError("Hid-Mix needs the embedding width d > 0")
        perm = rng.permutation(B)
        lam = rng.beta(alpha_h, alpha_h, size=B) if lam_h is None else np.broadcast_to(np.asarray(lam_h, dtype=np.float64), (B,)).copy()
        select = _choose_rows(np.floor(lam * d).astype(int), d, rng)
        # compose: own components weighted by lam, partner's (already mixed) components by 1 - lam
        idx = np.concatenate([batch.target_index, batch.target_index[perm]], axis=1)
        w = np.concatenate([lam[:, None] * batch.target_weight, (1.0 - lam)[:, None] * batch.target_weight[perm]], axis=1)
        batch.target_index, batch.target_weight = idx, w
        batch.hid_select, batch.hid_partner, batch.lam_h = select, perm, lam
    return batch


def mix_embeddings(z: Tensor, batch: MixedBatch) -> Tensor:
    """Apply the Hid-Mix plan of ``batch`` to token embeddings (B, f, d), differentiably."""
    if batch.hid_select is None:
        return z
    B, _, d = z.shape
    S = batch.hid_select.reshape(B, 1, d)
    return z * S + ad.take(z, batch.hid_partner) * (1.0 - S)


def mixed_targets(y, batch: MixedBatch) -> np.ndarray:
    """Interpolated targets (regression / probability view), for inspection."""
    y = np.asarray(y, dtype=np.float64)
    return (batch.target_weight * y[batch.target_index]).sum(axis=1)
