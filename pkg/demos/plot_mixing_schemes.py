"""
Feature-level and embedding-level mixing
========================================

Both augmentations pair each row with a shuffled partner.  Feat-Mix swaps raw
columns and weights the label by the importance of the columns kept;
Hid-Mix swaps embedding dimensions and weights the label by the fraction
kept.  This script shows one mixed batch and then trains with each scheme.
"""

import numpy as np

from excelformer import MixConfig, ModelConfig, TrainConfig, preprocess_pipeline, split
from excelformer.augment import apply_scheme, mixed_targets
from excelformer.rotharness import gen_synthetic
from excelformer.train import train_and_evaluate

# %%
# A batch of four rows with three columns of unequal importance.
rng = np.random.default_rng(0)
x = np.arange(12, dtype=float).reshape(4, 3)
y = np.array([1.0, 0.0, 1.0, 0.0])
batch = apply_scheme(x, "feat", rng, importance=np.array([0.6, 0.3, 0.1]))
print("kept columns (1 = own row):\n", batch.feat_select)
print("mixed rows:\n", batch.x)
print("label weight on own row:", np.round(batch.coef, 3))
print("mixed labels:", np.round(mixed_targets(y, batch), 3))

# %%
# Hid-Mix acts after the embedding, so the plan only records which of the d
# embedding dimensions each row keeps.
batch = apply_scheme(x, "hid", rng, d=8)
print("kept embedding dims:\n", batch.hid_select.astype(int))

# %%
# One small training run per scheme on a piecewise target with noise columns.
data = split(gen_synthetic("piecewise", 600, f_informative=3, f_noise=3, seed=1), seed=0)
X, importance, _ = preprocess_pipeline(data)
for scheme in ("none", "mixup", "cutmix", "feat", "hid"):
    cfg = TrainConfig(lr=1e-3, max_epochs=40, patience=8, seed=0, mix=MixConfig(scheme))
    _, fit, test = train_and_evaluate(X, data.labels, data.split, "binary", importance,
                                      ModelConfig(n_layers=2, d=32, heads=4), cfg)
    print(f"{scheme:>7}: test AUC {test:.4f} (best epoch {fit.best_epoch})")
