"""The Tsformer network: masked encoder/decoder Transformer for daily demand.

All forward functions work on a batch: encoder input ``[B, L_enc, F]`` and
decoder input ``[B, L_dec, F]``.  Single windows are handled by
:func:`forward`, which adds the batch axis itself.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import TYPE_CHECKING

import numpy as np

from . import numcore as nc
from .numcore import Tensor

if TYPE_CHECKING:
    from .data import WindowSample

NEG_INF = -np.inf


class ConfigError(ValueError):
    """Invalid model or training configuration."""


@dataclass(frozen=True)
class ModelConfig:
    """Network shape.  Defaults follow the Jiuzhaigou column of the
    published hyperparameter table (7/5/1 windows, d_model 32, 4 heads,
    4+4 layers, FFN 64, dropout 0.1)."""

    encoder_input_length: int = 7
    decoder_input_length: int = 5
    forecast_horizon: int = 1
    d_model: int = 32
    heads: int = 4
    encoder_layers: int = 4
    decoder_layers: int = 4
    ffn_dim: int = 64
    dropout: float = 0.1
    feature_dim: int = 1

    def __post_init__(self):
        for f in fields(self):
            if f.name == "dropout":
                continue
            value = getattr(self, f.name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{f.name} must be a positive integer, got {value!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for sinusoidal positional encoding")
        if self.forecast_horizon > self.decoder_input_length:
            raise ConfigError("forecast_horizon exceeds decoder_input_length")
        if self.decoder_input_length > self.encoder_input_length:
            raise ConfigError(
                "decoder_input_length exceeds encoder_input_length; "
                "the decoder memory mask would leave a row with nothing to attend"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def overlap(self) -> int:
        """Decoder rows holding known days (the rest are tokens)."""
        return self.decoder_input_length - self.forecast_horizon

    def with_horizon(self, horizon: int) -> "ModelConfig":
        """Same network at another horizon, keeping the known-day overlap.

        The decoder grows to ``horizon + overlap`` rows and the encoder is
        lengthened if needed so that it is never shorter than the decoder.
        """
        dec = horizon + self.overlap
        enc = max(self.encoder_input_length, dec)
        return self.replace(
            forecast_horizon=horizon, decoder_input_length=dec, encoder_input_length=enc
        )

    def replace(self, **changes) -> "ModelConfig":
        values = asdict(self)
        values.update(changes)
        return ModelConfig(**values)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# masks and positional encoding
# ---------------------------------------------------------------------------

def _band_mask(rows: int, cols: int, offset: int) -> np.ndarray:
    i = np.arange(rows)[:, None]
    j = np.arange(cols)[None, :]
    return np.where(j <= i + offset, 0.0, NEG_INF)


def build_encoder_source_mask(l_enc: int) -> np.ndarray:
    """Lower-triangular mask: step i attends steps j <= i."""
    if l_enc < 1:
        raise ConfigError("encoder length must be >= 1")
    return _band_mask(l_enc, l_enc, 0)


def build_decoder_target_mask(l_dec: int) -> np.ndarray:
    if l_dec < 1:
        raise ConfigError("decoder length must be >= 1")
    return _band_mask(l_dec, l_dec, 0)


def build_decoder_memory_mask(l_dec: int, l_enc: int) -> np.ndarray:
    """Decoder step i attends encoder steps j <= i + (l_enc - l_dec)."""
    if l_dec < 1 or l_enc < 1:
        raise ConfigError("sequence lengths must be >= 1")
    if l_dec > l_enc:
        raise ConfigError(f"decoder length {l_dec} exceeds encoder length {l_enc}")
    return _band_mask(l_dec, l_enc, l_enc - l_dec)


@dataclass(frozen=True)
class MaskSet:
    encoder_source: np.ndarray
    decoder_target: np.ndarray
    decoder_memory: np.ndarray

    @classmethod
    def for_config(cls, config: ModelConfig) -> "MaskSet":
        le, ld = config.encoder_input_length, config.decoder_input_length
        return cls(
            build_encoder_source_mask(le),
            build_decoder_target_mask(ld),
            build_decoder_memory_mask(ld, le),
        )


def sinusoidal_positional_encoding(length: int, d_model: int) -> np.ndarray:
    if d_model % 2:
        raise ConfigError(f"d_model must be even, got {d_model}")
    if length < 1:
        raise ConfigError("length must be >= 1")
    pos = np.arange(length, dtype=np.float64)[:, None]
    two_i = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, two_i / d_model)
    pe = np.empty((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _attention_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.{role}": (d, d) for role in ("wq", "wk", "wv", "wo")}


def _ffn_shapes(prefix: str, d: int, ffn: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.w1": (d, ffn),
        f"{prefix}.b1": (ffn,),
        f"{prefix}.w2": (ffn, d),
        f"{prefix}.b2": (d,),
    }


def _norm_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.gamma": (d,), f"{prefix}.beta": (d,)}


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and its shape, in canonical order."""
    d, f, ffn = config.d_model, config.feature_dim, config.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {"enc.in.w": (f, d), "enc.in.b": (d,)}
    for layer in range(config.encoder_layers):
        p = f"enc.{layer}"
        shapes.update(_attention_shapes(f"{p}.self", d))
        shapes.update(_norm_shapes(f"{p}.norm1", d))
        shapes.update(_ffn_shapes(f"{p}.ffn", d, ffn))
        shapes.update(_norm_shapes(f"{p}.norm2", d))
    shapes.update({"dec.in.w": (f, d), "dec.in.b": (d,)})
    for layer in range(config.decoder_layers):
        p = f"dec.{layer}"
        shapes.update(_attention_shapes(f"{p}.self", d))
        shapes.update(_norm_shapes(f"{p}.norm1", d))
        shapes.update(_attention_shapes(f"{p}.cross", d))
        shapes.update(_norm_shapes(f"{p}.norm2", d))
        shapes.update(_ffn_shapes(f"{p}.ffn", d, ffn))
        shapes.update(_norm_shapes(f"{p}.norm3", d))
    shapes.update({"out.w": (d, 1), "out.b": (1,)})
    return shapes


def _init_value(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".gamma"):
        return np.ones(shape)
    if len(shape) == 1:
        return np.zeros(shape)
    limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


class TsformerModel:
    """Config plus named parameter tensors."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.audit()
        self.masks = MaskSet.for_config(config)
        self._pe_enc = sinusoidal_positional_encoding(config.encoder_input_length, config.d_model)
        self._pe_dec = sinusoidal_positional_encoding(config.decoder_input_length, config.d_model)

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int | np.random.Generator = 0) -> "TsformerModel":
        """Glorot-uniform weights, zero biases, unit norm gains."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        params = {
            name: Tensor(_init_value(name, shape, rng), requires_grad=True, name=name)
            for name, shape in parameter_shapes(config).items()
        }
        return cls(config, params)

    def audit(self) -> None:
        """Raise ``nc.ShapeError`` naming the first parameter out of contract."""
        expected = parameter_shapes(self.config)
        missing = set(expected) - set(self.params)
        extra = set(self.params) - set(expected)
        if missing or extra:
            raise nc.ShapeError(
                f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise nc.ShapeError(
                    f"parameter {name} has shape {self.params[name].shape}, expected {shape}"
                )

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64)
        self.audit()

    def copy(self) -> "TsformerModel":
        params = {
            k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()
        }
        return TsformerModel(self.config, params)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, mask) -> tuple[Tensor, Tensor]:
    """Masked attention over the last two axes; returns (output, weights)."""
    d_k = q.shape[-1]
    if k.shape[-1] != d_k or k.shape[-2] != v.shape[-2]:
        raise nc.ShapeError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    kt = nc.transpose(k, tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2))
    scores = nc.scale(nc.matmul(q, kt), 1.0 / math.sqrt(d_k))
    weights = nc.masked_softmax(scores, mask)
    return nc.matmul(weights, v), weights


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, length, d = x.shape
    return nc.transpose(nc.reshape(x, (b, length, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, heads, length, dk = x.shape
    return nc.reshape(nc.transpose(x, (0, 2, 1, 3)), (b, length, heads * dk))


def multi_head_attention(
    x_q: Tensor, x_kv: Tensor, mask, params: dict[str, Tensor], prefix: str, heads: int
) -> tuple[Tensor, np.ndarray]:
    """Project, split into heads, attend, concatenate, project back.

    Returns the ``[B, m, d_model]`` output and the post-softmax weights
    ``[B, heads, m, n]``.
    """
    d = x_q.shape[-1]
    if d % heads:
        raise nc.ShapeError(f"d_model={d} not divisible by heads={heads}")
    q = _split_heads(nc.matmul(x_q, params[f"{prefix}.wq"]), heads)
    k = _split_heads(nc.matmul(x_kv, params[f"{prefix}.wk"]), heads)
    v = _split_heads(nc.matmul(x_kv, params[f"{prefix}.wv"]), heads)
    out, weights = scaled_dot_product_attention(q, k, v, mask)
    return nc.matmul(_merge_heads(out), params[f"{prefix}.wo"]), weights.data


def feed_forward(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    hidden = nc.elu(nc.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return nc.linear(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _add_norm(x: Tensor, sub: Tensor, params, prefix: str) -> Tensor:
    return nc.layer_norm(nc.add(x, sub), params[f"{prefix}.gamma"], params[f"{prefix}.beta"])


def _embed(x, params, prefix: str, pe: np.ndarray | None, p: float, training, rng) -> Tensor:
    x = nc.linear(x, params[f"{prefix}.in.w"], params[f"{prefix}.in.b"])
    if pe is not None:
        x = nc.add(x, pe)
    return nc.dropout(x, p, training, rng)


def _as_batch(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim == 2:
        x = nc.reshape(x, (1,) + x.shape)
    if x.data.ndim != 3:
        raise nc.ShapeError(f"expected [B, L, F] input, got {x.shape}")
    return x


@dataclass
class AttentionTrace:
    """Post-softmax weights per layer, each ``[B, heads, rows, cols]``."""

    encoder_self: list[np.ndarray]
    decoder_self: list[np.ndarray]
    decoder_cross: list[np.ndarray]

    def sample(self, index: int) -> "AttentionTrace":
        """Trace of one batch element, each matrix ``[heads, rows, cols]``."""
        return AttentionTrace(
            [w[index] for w in self.encoder_self],
            [w[index] for w in self.decoder_self],
            [w[index] for w in self.decoder_cross],
        )


def encoder_forward(
    x,
    model: TsformerModel,
    training: bool = False,
    rng: np.random.Generator | None = None,
    *,
    source_mask: np.ndarray | None = None,
    positional_encoding: bool = True,
) -> tuple[Tensor, list[np.ndarray]]:
    """Encode ``[B, L_enc, F]`` (or ``[L_enc, F]``) into ``[B, L_enc, d_model]`` memory."""
    cfg, params = model.config, model.params
    x = _as_batch(x)
    if x.shape[1:] != (cfg.encoder_input_length, cfg.feature_dim):
        raise nc.ShapeError(
            f"encoder input {x.shape[1:]} does not match "
            f"({cfg.encoder_input_length}, {cfg.feature_dim})"
        )
    mask = model.masks.encoder_source if source_mask is None else source_mask
    pe = model._pe_enc if positional_encoding else None
    h = _embed(x, params, "enc", pe, cfg.dropout, training, rng)
    traces = []
    for layer in range(cfg.encoder_layers):
        p = f"enc.{layer}"
        att, w = multi_head_attention(h, h, mask, params, f"{p}.self", cfg.heads)
        h = _add_norm(h, nc.dropout(att, cfg.dropout, training, rng), params, f"{p}.norm1")
        ff = feed_forward(h, params, f"{p}.ffn")
        h = _add_norm(h, nc.dropout(ff, cfg.dropout, training, rng), params, f"{p}.norm2")
        traces.append(w)
    return h, traces


def decoder_forward(
    y,
    memory: Tensor,
    model: TsformerModel,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[np.ndarray], list[np.ndarray]]:
    """Decode ``[B, L_dec, F]`` against memory; returns ``[B, L_dec, 1]`` outputs
    plus self- and cross-attention weights per layer."""
    cfg, params = model.config, model.params
    y = _as_batch(y)
    if y.shape[1:] != (cfg.decoder_input_length, cfg.feature_dim):
        raise nc.ShapeError(
            f"decoder input {y.shape[1:]} does not match "
            f"({cfg.decoder_input_length}, {cfg.feature_dim})"
        )
    if memory.shape[1:] != (cfg.encoder_input_length, cfg.d_model):
        raise nc.ShapeError(f"memory shape {memory.shape} does not match the config")
    h = _embed(y, params, "dec", model._pe_dec, cfg.dropout, training, rng)
    self_traces, cross_traces = [], []
    for layer in range(cfg.decoder_layers):
        p = f"dec.{layer}"
        att, w_self = multi_head_attention(
            h, h, model.masks.decoder_target, params, f"{p}.self", cfg.heads
        )
        h = _add_norm(h, nc.dropout(att, cfg.dropout, training, rng), params, f"{p}.norm1")
        att, w_cross = multi_head_attention(
            h, memory, model.masks.decoder_memory, params, f"{p}.cross", cfg.heads
        )
        h = _add_norm(h, nc.dropout(att, cfg.dropout, training, rng), params, f"{p}.norm2")
        ff = feed_forward(h, params, f"{p}.ffn")
        h = _add_norm(h, nc.dropout(ff, cfg.dropout, training, rng), params, f"{p}.norm3")
        self_traces.append(w_self)
        cross_traces.append(w_cross)
    out = nc.linear(h, params["out.w"], params["out.b"])
    return out, self_traces, cross_traces


def forward_batch(
    encoder_x,
    decoder_y,
    model: TsformerModel,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, AttentionTrace]:
    """Full network on a batch; outputs ``[B, L_dec, 1]``."""
    memory, enc_traces = encoder_forward(encoder_x, model, training, rng)
    out, dec_self, dec_cross = decoder_forward(decoder_y, memory, model, training, rng)
    return out, AttentionTrace(enc_traces, dec_self, dec_cross)


def forward(
    sample: "WindowSample",
    model: TsformerModel,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, AttentionTrace]:
    """Run one window; returns ``[L_dec, 1]`` outputs and its attention trace.

    The last ``forecast_horizon`` output rows are the forecasts.
    """
    cfg = model.config
    if sample.encoder_matrix.shape != (cfg.encoder_input_length, cfg.feature_dim) or (
        sample.decoder_matrix.shape != (cfg.decoder_input_length, cfg.feature_dim)
    ):
        raise nc.ShapeError(
            f"sample shapes {sample.encoder_matrix.shape}/{sample.decoder_matrix.shape} "
            "do not match the model config"
        )
    if int(np.sum(sample.token_flags)) != cfg.forecast_horizon:
        raise nc.ShapeError("sample token count differs from the model forecast horizon")
    out, trace = forward_batch(
        sample.encoder_matrix[None], sample.decoder_matrix[None], model, training, rng
    )
    return nc.reshape(out, (cfg.decoder_input_length, 1)), trace.sample(0)
