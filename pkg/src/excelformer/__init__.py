"""ExcelFormer for tabular prediction on a small numpy reverse-mode autodiff engine."""

from .augment import MixConfig
from .model import ExcelFormer, ModelConfig, load_checkpoint, save_checkpoint
from .preprocess import TabularDataset, preprocess_pipeline, read_csv
from .train import TrainConfig, fit, run, split

__all__ = [
    "ExcelFormer",
    "MixConfig",
    "ModelConfig",
    "TabularDataset",
    "TrainConfig",
    "fit",
    "load_checkpoint",
    "preprocess_pipeline",
    "read_csv",
    "run",
    "save_checkpoint",
    "split",
]
__version__ = "0.1.0"
