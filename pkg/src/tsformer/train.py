"""Training: Adam, early stopping on validation MAE, grid search, checkpoints."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numcore as nc
from .data import (
    CALENDAR_COLUMNS,
    Dataset,
    NormalizationStats,
    SplitSpec,
    WindowSample,
    make_windows,
    minmax_fit,
    minmax_invert,
    stack_windows,
)
from .model import ConfigError, ModelConfig, TsformerModel, forward_batch

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "TSFORMER-CHECKPOINT"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, step: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


class CheckpointError(ValueError):
    """Unreadable, truncated, or incompatible checkpoint file."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 30
    grad_clip_norm: float | None = 1.0
    seed: int = 0
    loss_on_overlap: bool = True

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be nonnegative")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be positive")
        if not 0 <= self.patience <= self.max_epochs:
            raise ConfigError("patience must lie in [0, max_epochs]")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive when set")

    def replace(self, **changes) -> "TrainConfig":
        values = asdict(self)
        values.update(changes)
        return TrainConfig(**values)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    params: Mapping[str, nc.Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so the global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / total
        for k in grads:
            grads[k] = grads[k] * factor
    return total


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def predict_windows(model: TsformerModel, samples: Sequence[WindowSample], batch_size: int = 256) -> np.ndarray:
    """Normalized decoder outputs ``[n, L_dec]`` with dropout off."""
    outs = []
    for i in range(0, len(samples), batch_size):
        enc, dec, _ = stack_windows(samples[i : i + batch_size])
        out, _ = forward_batch(enc, dec, model, training=False)
        outs.append(out.data[..., 0])
    if not outs:
        return np.zeros((0, model.config.decoder_input_length))
    return np.concatenate(outs)


def batch_loss(
    model: TsformerModel,
    samples: Sequence[WindowSample],
    loss_on_overlap: bool = True,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> nc.Tensor:
    enc, dec, target = stack_windows(samples)
    out, _ = forward_batch(enc, dec, model, training=training, rng=rng)
    if not loss_on_overlap:
        h = model.config.forecast_horizon
        out = nc.take_rows(out, -h)
        target = target[:, -h:]
    return nc.mse_loss(out, target[..., None])


def validation_mae(
    model: TsformerModel, samples: Sequence[WindowSample], stats: NormalizationStats | None
) -> float:
    """MAE over the forecast rows, in raw demand units when ``stats`` is given."""
    h = model.config.forecast_horizon
    pred = predict_windows(model, samples)[:, -h:]
    truth = np.stack([s.target_vector[-h:] for s in samples])
    if stats is not None:
        pred = minmax_invert(stats, pred, "demand")
        truth = minmax_invert(stats, truth, "demand")
    return float(np.mean(np.abs(pred - truth)))


@dataclass
class History:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_mae: float = math.inf

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "val_mae"])
            for row in zip(self.epochs, self.train_loss, self.val_mae):
                writer.writerow([row[0], repr(row[1]), repr(row[2])])


def _seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    shuffle_seq, dropout_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(shuffle_seq), np.random.default_rng(dropout_seq)


def train(
    model: TsformerModel,
    train_windows: Sequence[WindowSample],
    val_windows: Sequence[WindowSample],
    cfg: TrainConfig,
    stats: NormalizationStats | None = None,
) -> tuple[TsformerModel, History]:
    """Minimize MSE on normalized demand; keep the best-validation weights.

    With ``patience == 0`` or no validation windows every epoch runs and the
    final parameters are kept.  Raises :class:`TrainingDivergedError` on a
    non-finite loss.
    """
    if not train_windows:
        raise ValueError("no training windows")
    if cfg.patience > 0 and not val_windows:
        raise ValueError("early stopping needs validation windows")
    shuffle_rng, dropout_rng = _seed_streams(cfg.seed)
    params = model.params
    state = AdamState()
    history = History()
    best_state = model.state_dict()
    stale = 0
    n = len(train_windows)
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        losses, sizes = [], []
        for step, start in enumerate(range(0, n, cfg.batch_size), start=1):
            batch = [train_windows[i] for i in order[start : start + cfg.batch_size]]
            for p in params.values():
                p.grad = None
            with nc.Tape() as tape:
                loss = batch_loss(model, batch, cfg.loss_on_overlap, True, dropout_rng)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, step)
            nc.backward(loss, tape)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            if cfg.grad_clip_norm is not None:
                clip_gradients(grads, cfg.grad_clip_norm)
            adam_step(params, grads, state, cfg.learning_rate)
            losses.append(value)
            sizes.append(len(batch))
        epoch_loss = float(np.average(losses, weights=sizes))
        val = validation_mae(model, val_windows, stats) if val_windows else math.nan
        history.epochs.append(epoch)
        history.train_loss.append(epoch_loss)
        history.val_mae.append(val)
        logger.debug("epoch %d train_loss %.6g val_mae %.6g", epoch, epoch_loss, val)
        if cfg.patience == 0 or not val_windows:
            history.best_epoch, history.best_val_mae = epoch, val
            continue
        if val < history.best_val_mae:
            history.best_epoch, history.best_val_mae = epoch, val
            best_state = model.state_dict()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if cfg.patience > 0 and val_windows:
        model.load_state_dict(best_state)
    return model, history


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------

GRID_MODEL_KEYS = ("d_model", "heads", "encoder_layers", "decoder_layers", "ffn_dim", "dropout")
GRID_TRAIN_KEYS = ("learning_rate",)


@dataclass(frozen=True)
class GridSpec:
    candidates: dict[str, tuple]

    def __post_init__(self):
        bad = set(self.candidates) - set(GRID_MODEL_KEYS) - set(GRID_TRAIN_KEYS)
        if bad:
            raise ConfigError(f"unsupported grid key(s): {', '.join(sorted(bad))}")
        if not self.candidates or any(len(v) == 0 for v in self.candidates.values()):
            raise ConfigError("grid must be nonempty")

    @property
    def size(self) -> int:
        return math.prod(len(v) for v in self.candidates.values())

    def points(self) -> list[dict]:
        keys = list(self.candidates)
        return [dict(zip(keys, combo)) for combo in itertools.product(*self.candidates.values())]


@dataclass
class GridResult:
    point: dict
    model_config: ModelConfig | None
    train_config: TrainConfig | None
    val_mae: float
    best_epoch: int = 0
    error: str | None = None
    rank: int = 0


def grid_search(
    grid: GridSpec,
    dataset: Dataset,
    split_spec: SplitSpec,
    base_model: ModelConfig,
    base_train: TrainConfig,
    use_calendar: bool = True,
    token_known_columns: Sequence[str] = CALENDAR_COLUMNS,
) -> list[GridResult]:
    """Train one model per grid point; rank by validation MAE ascending.

    Every point starts from an initialization derived from ``base_train.seed``.
    A failing point is recorded with its error and ranked last.
    """
    logger.info("grid search over %d points", grid.size)
    bounds = split_spec.bounds(dataset)
    stats = minmax_fit(dataset.slice(*bounds["train"]))
    results = []
    for point in grid.points():
        try:
            mcfg = base_model.replace(**{k: v for k, v in point.items() if k in GRID_MODEL_KEYS})
            tcfg = base_train.replace(**{k: v for k, v in point.items() if k in GRID_TRAIN_KEYS})
            train_w = make_windows(dataset, mcfg, stats, use_calendar,
                                   target_range=bounds["train"], token_known_columns=token_known_columns)
            val_w = make_windows(dataset, mcfg, stats, use_calendar,
                                 target_range=bounds["validate"], token_known_columns=token_known_columns)
            model = TsformerModel.initialize(mcfg, tcfg.seed)
            _, hist = train(model, train_w, val_w, tcfg, stats)
            results.append(GridResult(point, mcfg, tcfg, hist.best_val_mae, hist.best_epoch))
        except (ValueError, RuntimeError) as exc:
            logger.warning("grid point %s failed: %s", point, exc)
            results.append(GridResult(point, None, None, math.inf, error=str(exc)))
    results.sort(key=lambda r: (r.error is not None, r.val_mae))
    for rank, r in enumerate(results, start=1):
        r.rank = rank
    return results


def write_grid_results(results: Sequence[GridResult], path: str | os.PathLike) -> None:
    keys = sorted({k for r in results for k in r.point})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rank", *keys, "val_mae", "best_epoch", "model_config", "train_config", "error"])
        for r in results:
            writer.writerow([
                r.rank,
                *[r.point.get(k, "") for k in keys],
                repr(r.val_mae),
                r.best_epoch,
                json.dumps(r.model_config.to_dict()) if r.model_config else "",
                json.dumps(asdict(r.train_config)) if r.train_config else "",
                r.error or "",
            ])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: TsformerModel
    stats: NormalizationStats
    metadata: dict = field(default_factory=dict)


def save_checkpoint(
    model: TsformerModel,
    stats: NormalizationStats,
    path: str | os.PathLike,
    metadata: Mapping | None = None,
) -> None:
    """Text checkpoint: a JSON manifest line, then one line of hex floats per
    parameter, then an END marker.  Round trips are bit-exact."""
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "stats": stats.to_dict(),
        "metadata": dict(metadata or {}),
        "parameters": [[name, list(t.shape)] for name, t in model.params.items()],
    }
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}", json.dumps(manifest, sort_keys=True)]
    for name, t in model.params.items():
        lines.append(name + " " + " ".join(float(v).hex() for v in t.data.reshape(-1)))
    lines.append("END")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
    except UnicodeDecodeError:
        raise CheckpointError(f"{path}: not a text checkpoint") from None
    if not lines or not lines[0].startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: missing checkpoint header")
    try:
        version = int(lines[0].split()[1])
    except (IndexError, ValueError):
        raise CheckpointError(f"{path}: corrupt header line") from None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    if len(lines) < 3 or "END" not in lines:
        raise CheckpointError(f"{path}: file is truncated (no END marker)")
    try:
        manifest = json.loads(lines[1])
        config = ModelConfig(**manifest["config"])
        stats = NormalizationStats.from_dict(manifest["stats"])
        declared = manifest["parameters"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    body = lines[2 : lines.index("END")]
    if len(body) != len(declared):
        raise CheckpointError(f"{path}: expected {len(declared)} parameters, found {len(body)}")
    params = {}
    for (name, shape), line in zip(declared, body):
        got_name, _, rest = line.partition(" ")
        if got_name != name:
            raise CheckpointError(f"{path}: parameter {name} missing (found {got_name})")
        try:
            flat = np.array([float.fromhex(tok) for tok in rest.split()], dtype=np.float64)
        except ValueError:
            raise CheckpointError(f"{path}: parameter {name} has unparseable values") from None
        if flat.size != math.prod(shape):
            raise CheckpointError(
                f"{path}: parameter {name} declares shape {tuple(shape)} but has {flat.size} values"
            )
        params[name] = nc.Tensor(flat.reshape(shape), requires_grad=True, name=name)
    try:
        model = TsformerModel(config, params)
    except nc.ShapeError as exc:
        raise CheckpointError(f"{path}: shape audit failed: {exc}") from None
    return Checkpoint(model, stats, manifest.get("metadata", {}))
