"""scikit-learn style wrappers so the pieces compose with the wider ecosystem
(``get_params``/``set_params``/``clone`` work on all of them)."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import (
    CALENDAR_COLUMNS,
    Dataset,
    NormalizationStats,
    SplitSpec,
    build_window,
    make_windows,
    minmax_fit,
    minmax_invert,
    normalize_matrix,
)
from .evaluate import EvaluationError
from .model import ModelConfig, TsformerModel
from .train import Checkpoint, TrainConfig, predict_windows, train


class MinMaxNormalizer(TransformerMixin, BaseEstimator):
    """Per-column ``(x - min) / (max - min)``; constant columns map to 0.

    Accepts a :class:`Dataset` or an ``[N, F]`` array.
    """

    def __init__(self, columns: Sequence[str] | None = None):
        self.columns = columns

    def _values(self, X):
        if isinstance(X, Dataset):
            return X.values, X.schema.feature_columns
        X = check_array(X, dtype=np.float64)
        return X, tuple(self.columns or (f"x{i}" for i in range(X.shape[1])))

    def fit(self, X, y=None):
        values, names = self._values(X)
        self.stats_ = NormalizationStats(tuple(names), values.min(axis=0), values.max(axis=0))
        self.n_features_in_ = values.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        values, _ = self._values(X)
        return normalize_matrix(self.stats_, values)

    def inverse_transform(self, X):
        check_is_fitted(self, "stats_")
        X = check_array(X, dtype=np.float64)
        const = self.stats_.constant
        if np.any(const):
            names = [c for c, k in zip(self.stats_.columns, const) if k]
            raise ValueError(f"cannot invert constant column(s) {names}")
        return X * (self.stats_.maxs - self.stats_.mins) + self.stats_.mins


class TsformerForecaster(BaseEstimator):
    """Direct multi-step demand forecaster.

    ``fit`` takes a :class:`Dataset` and a chronological split; the training
    period fits the normalizer and the weights, the validation period drives
    early stopping.  Defaults follow the Jiuzhaigou hyperparameters.
    """

    def __init__(
        self,
        encoder_input_length: int = 7,
        decoder_input_length: int = 5,
        forecast_horizon: int = 1,
        d_model: int = 32,
        heads: int = 4,
        encoder_layers: int = 4,
        decoder_layers: int = 4,
        ffn_dim: int = 64,
        dropout: float = 0.1,
        learning_rate: float = 3e-3,
        batch_size: int = 32,
        max_epochs: int = 500,
        patience: int = 30,
        grad_clip_norm: float | None = 1.0,
        loss_on_overlap: bool = True,
        use_calendar: bool = True,
        token_known_columns: tuple[str, ...] = CALENDAR_COLUMNS,
        seed: int = 0,
    ):
        self.encoder_input_length = encoder_input_length
        self.decoder_input_length = decoder_input_length
        self.forecast_horizon = forecast_horizon
        self.d_model = d_model
        self.heads = heads
        self.encoder_layers = encoder_layers
        self.decoder_layers = decoder_layers
        self.ffn_dim = ffn_dim
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.grad_clip_norm = grad_clip_norm
        self.loss_on_overlap = loss_on_overlap
        self.use_calendar = use_calendar
        self.token_known_columns = token_known_columns
        self.seed = seed

    @classmethod
    def from_configs(cls, model_config: ModelConfig, train_config: TrainConfig, **kwargs) -> "TsformerForecaster":
        m = model_config.to_dict()
        m.pop("feature_dim")
        return cls(**m, **{k: v for k, v in vars(train_config).items()}, **kwargs)

    def model_config(self, feature_dim: int) -> ModelConfig:
        return ModelConfig(
            encoder_input_length=self.encoder_input_length,
            decoder_input_length=self.decoder_input_length,
            forecast_horizon=self.forecast_horizon,
            d_model=self.d_model,
            heads=self.heads,
            encoder_layers=self.encoder_layers,
            decoder_layers=self.decoder_layers,
            ffn_dim=self.ffn_dim,
            dropout=self.dropout,
            feature_dim=feature_dim,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            grad_clip_norm=self.grad_clip_norm,
            seed=self.seed,
            loss_on_overlap=self.loss_on_overlap,
        )

    @property
    def name(self) -> str:
        return "tsformer" if self.use_calendar else "tsformer_no_calendar"

    @property
    def min_history(self) -> int:
        return self.encoder_input_length

    def windows(self, X: Dataset, split_range=None):
        check_is_fitted(self, "model_")
        return make_windows(
            X, self.model_.config, self.stats_, self.use_calendar,
            target_range=split_range, token_known_columns=self.token_known_columns,
        )

    def fit(self, X: Dataset, y=None, split: SplitSpec | None = None):
        if not isinstance(X, Dataset):
            raise TypeError("TsformerForecaster.fit expects a Dataset")
        config = self.model_config(X.schema.feature_dim)
        split = split or SplitSpec.from_fractions(X)
        bounds = split.bounds(X)
        self.stats_ = minmax_fit(X.slice(*bounds["train"]))
        train_w, val_w = (
            make_windows(X, config, self.stats_, self.use_calendar,
                         target_range=bounds[part], token_known_columns=self.token_known_columns)
            for part in ("train", "validate")
        )
        model = TsformerModel.initialize(config, self.seed)
        self.model_, self.history_ = train(model, train_w, val_w, self.train_config(), self.stats_)
        self.split_ = split
        self.n_features_in_ = X.schema.feature_dim
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "TsformerForecaster":
        meta = ckpt.metadata
        cfg = ckpt.model.config
        train_cfg = TrainConfig(**meta["train_config"]) if "train_config" in meta else TrainConfig()
        est = cls.from_configs(
            cfg, train_cfg,
            use_calendar=meta.get("use_calendar", True),
            token_known_columns=tuple(meta.get("token_known_columns", CALENDAR_COLUMNS)),
        )
        est.model_ = ckpt.model
        est.stats_ = ckpt.stats
        est.n_features_in_ = cfg.feature_dim
        if "split" in meta:
            est.split_ = SplitSpec.from_dict(meta["split"])
        return est

    def forecast_origins(self, dataset: Dataset, origins: Sequence[int], horizon: int) -> np.ndarray:
        """Raw-unit forecasts ``[len(origins), horizon]`` for the first
        ``horizon`` lead times after each origin row."""
        check_is_fitted(self, "model_")
        cfg = self.model_.config
        if horizon > cfg.forecast_horizon:
            raise EvaluationError(
                f"model forecasts {cfg.forecast_horizon} day(s); cannot score horizon {horizon}"
            )
        norm = normalize_matrix(self.stats_, dataset.values)
        samples = [
            build_window(dataset, t, cfg, self.stats_, self.use_calendar, self.token_known_columns, norm)
            for t in origins
        ]
        out = predict_windows(self.model_, samples)[:, -cfg.forecast_horizon:]
        return minmax_invert(self.stats_, out[:, :horizon], "demand")

    def predict(self, X: Dataset) -> np.ndarray:
        """Forecast the ``forecast_horizon`` days following the last row of ``X``."""
        check_is_fitted(self, "model_")
        return self.forecast_origins(X, [len(X) - 1], self.model_.config.forecast_horizon)[0]
