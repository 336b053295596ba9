"""Encoder-decoder Transformer for daily tourism demand forecasting, built on
a small numpy autodiff core."""

__version__ = "0.1.0"

from .data import Dataset, RecordSchema, SplitSpec, SyntheticSpec, load_csv, synth_generate, write_csv  # noqa: E402
from .estimators import MinMaxNormalizer, TsformerForecaster  # noqa: E402
from .model import ModelConfig, TsformerModel  # noqa: E402
from .train import TrainConfig, load_checkpoint, save_checkpoint, train  # noqa: E402

__all__ = [
    "Dataset", "RecordSchema", "SplitSpec", "SyntheticSpec", "load_csv", "synth_generate", "write_csv",
    "MinMaxNormalizer", "TsformerForecaster", "ModelConfig", "TsformerModel",
    "TrainConfig", "load_checkpoint", "save_checkpoint", "train",
]
