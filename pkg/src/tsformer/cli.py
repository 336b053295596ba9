"""Command-line entry point: ``tsformer <command> ...``.

Configuration files are ``key = value`` lines (``#`` starts a comment).
Command-line flags override file keys, and the fully resolved
configuration is written to a JSON manifest next to every output.

Exit codes: 0 success, 2 validation error, 3 numerical divergence, 4 I/O.
Errors print a single line ``tsformer: error[<kind>]: <message>``.
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .data import (
    CALENDAR_COLUMNS,
    SplitSpec,
    SyntheticSpec,
    load_csv,
    make_windows,
    synth_generate,
    write_csv,
)
from .estimators import TsformerForecaster
from .evaluate import (
    OracleForecaster,
    ablation_run,
    baseline_for,
    rolling_origin_evaluate,
    write_reports,
)
from .interpret import capture_attention, export_csv, render_heatmap
from .model import ModelConfig
from .train import (
    GRID_MODEL_KEYS,
    GridSpec,
    TrainConfig,
    TrainingDivergedError,
    grid_search,
    load_checkpoint,
    save_checkpoint,
    write_grid_results,
)

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig) if f.name != "feature_dim")
TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))
DATA_KEYS = ("use_calendar", "token_known_columns", "train_end", "validate_end",
             "train_fraction", "validate_fraction")
CONFIG_KEYS = MODEL_KEYS + TRAIN_KEYS + DATA_KEYS


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def read_kv_file(path) -> dict[str, str]:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{line_no}: expected 'key = value'")
            values[key.strip()] = value.strip()
    return values


def _parse_bool(text: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _coerce(key: str, raw: str):
    if key in ("dropout", "learning_rate", "train_fraction", "validate_fraction"):
        return float(raw)
    if key == "grad_clip_norm":
        return None if raw.lower() in ("none", "off", "") else float(raw)
    if key in ("use_calendar", "loss_on_overlap"):
        return _parse_bool(raw)
    if key == "token_known_columns":
        return tuple(c.strip() for c in raw.split(",") if c.strip())
    if key in ("train_end", "validate_end"):
        return raw
    return int(raw)


def resolve_config(file_values: Mapping[str, str], overrides: Mapping[str, str]) -> dict:
    """Merge file keys and CLI overrides (overrides win), typed and validated."""
    merged = {**file_values, **{k: v for k, v in overrides.items() if v is not None}}
    unknown = set(merged) - set(CONFIG_KEYS)
    if unknown:
        raise UsageError(f"unknown configuration key(s): {', '.join(sorted(unknown))}")
    out = {}
    for key, raw in merged.items():
        try:
            out[key] = _coerce(key, str(raw))
        except ValueError:
            raise UsageError(f"configuration key {key}: cannot parse {raw!r}") from None
    return out


def build_configs(resolved: Mapping, feature_dim: int, horizon: int | None) -> tuple[ModelConfig, TrainConfig]:
    """Model and train configs.  A ``horizon`` override resizes the windows
    with :meth:`ModelConfig.with_horizon`."""
    model = ModelConfig(feature_dim=feature_dim, **{k: resolved[k] for k in MODEL_KEYS if k in resolved})
    if horizon is not None and horizon != model.forecast_horizon:
        model = model.with_horizon(horizon)
    train = TrainConfig(**{k: resolved[k] for k in TRAIN_KEYS if k in resolved})
    return model, train


def split_from(resolved: Mapping, dataset) -> SplitSpec:
    if "train_end" in resolved or "validate_end" in resolved:
        if not ("train_end" in resolved and "validate_end" in resolved):
            raise UsageError("train_end and validate_end must be given together")
        return SplitSpec(dt.date.fromisoformat(resolved["train_end"]),
                         dt.date.fromisoformat(resolved["validate_end"]))
    return SplitSpec.from_fractions(
        dataset, resolved.get("train_fraction", 0.7), resolved.get("validate_fraction", 0.15)
    )


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, command: str, config: Mapping, seed, inputs: Sequence, outputs: Sequence) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": seed,
        "inputs": {str(p): _digest(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "version": __version__,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _horizons(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad horizon list {text!r}") from None
    if not values or min(values) < 1:
        raise UsageError("horizons must be positive integers")
    return values


def _overrides(args) -> dict:
    pairs = getattr(args, "set", None) or []
    bad = [kv for kv in pairs if "=" not in kv]
    if bad:
        raise UsageError(f"--set expects KEY=VALUE, got {bad[0]!r}")
    out = dict(kv.split("=", 1) for kv in pairs)
    out = {k.strip(): v.strip() for k, v in out.items()}
    for flag in ("seed", "max_epochs", "learning_rate"):
        if getattr(args, flag, None) is not None:
            out[flag] = str(getattr(args, flag))
    if getattr(args, "no_calendar", False):
        out["use_calendar"] = "false"
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    values = read_kv_file(args.spec) if args.spec else {}
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if args.days is not None:
        values["days"] = str(args.days)
    spec = SyntheticSpec.from_mapping(values)
    dataset = synth_generate(spec)
    write_csv(dataset, args.out)
    inputs = [args.spec] if args.spec else []
    write_manifest(f"{args.out}.manifest.json", "synth", dataclasses.asdict(spec), spec.seed, inputs, [args.out])
    print(f"wrote {len(dataset)} days to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    dataset = load_csv(args.data)
    file_values = read_kv_file(args.config) if args.config else {}
    resolved = resolve_config(file_values, _overrides(args))
    model_cfg, train_cfg = build_configs(resolved, dataset.schema.feature_dim, args.horizon)
    split = split_from(resolved, dataset)
    known = resolved.get("token_known_columns", CALENDAR_COLUMNS)
    use_calendar = resolved.get("use_calendar", True)
    est = TsformerForecaster.from_configs(model_cfg, train_cfg, use_calendar=use_calendar,
                                          token_known_columns=tuple(known))
    est.fit(dataset, split=split)
    hist = est.history_
    meta = {
        "epoch": hist.best_epoch,
        "best_val_mae": hist.best_val_mae,
        "seed": train_cfg.seed,
        "train_config": dataclasses.asdict(train_cfg),
        "use_calendar": use_calendar,
        "token_known_columns": list(known),
        "split": split.to_dict(),
    }
    save_checkpoint(est.model_, est.stats_, args.out, meta)
    history_path = f"{args.out}.history.csv"
    hist.to_csv(history_path)
    full = {**model_cfg.to_dict(), **dataclasses.asdict(train_cfg), "use_calendar": use_calendar,
            "token_known_columns": list(known), **split.to_dict()}
    write_manifest(f"{args.out}.manifest.json", "train", full, train_cfg.seed,
                   [p for p in (args.data, args.config) if p], [args.out, history_path])
    print(f"best epoch {hist.best_epoch} validation MAE {hist.best_val_mae!r}")
    return EXIT_OK


def _load_forecasters(paths):
    return [TsformerForecaster.from_checkpoint(load_checkpoint(p)) for p in paths]


def _model_for_horizon(models, h):
    """The checkpoint with the smallest trained horizon that still covers ``h``."""
    usable = [m for m in models if m.model_.config.forecast_horizon >= h]
    return min(usable, key=lambda m: m.model_.config.forecast_horizon, default=None)


def cmd_evaluate(args) -> int:
    dataset = load_csv(args.data)
    models = _load_forecasters(args.checkpoint)
    split = getattr(models[0], "split_", None)
    if args.train_end or args.validate_end:
        split = SplitSpec(dt.date.fromisoformat(args.train_end), dt.date.fromisoformat(args.validate_end))
    if split is None:
        raise UsageError("checkpoint records no split; pass --train-end and --validate-end")
    bounds = split.bounds(dataset)[args.split]
    runs = []
    for h in _horizons(args.horizons):
        forecasters = [baseline_for(h)]
        model = _model_for_horizon(models, h)
        if model is None:
            logging.warning("no checkpoint forecasts %d days; horizon %d has baselines only", h, h)
        else:
            forecasters.append(model)
        if args.oracle:
            forecasters.append(OracleForecaster())
        need = max(f.min_history for f in forecasters)
        for f in forecasters:
            runs.append(rolling_origin_evaluate(f, dataset, bounds, h, args.split, need))
    prefix = args.out
    write_reports(runs, f"{prefix}.csv", f"{prefix}.json", per_lead=args.per_lead)
    write_manifest(f"{prefix}.manifest.json", "evaluate",
                   {"horizons": args.horizons, "split": args.split, **split.to_dict(),
                    "checkpoints": {p: m.model_.config.to_dict() for p, m in zip(args.checkpoint, models)}},
                   None,
                   [args.data, *args.checkpoint], [f"{prefix}.csv", f"{prefix}.json"])
    for run in runs:
        r = run.report
        print(f"{run.model:24s} h={run.horizon:<3d} MAE {r.mae:.4f} RMSE {r.rmse:.4f} MAPE {r.mape:.3f}% n={r.n}")
    return EXIT_OK


def cmd_forecast(args) -> int:
    dataset = load_csv(args.data)
    (est,) = _load_forecasters([args.checkpoint])
    values = est.predict(dataset)
    dates = dataset.dates[-1] + np.arange(1, len(values) + 1)
    lines = ["date,forecast"] + [f"{d},{v!r}" for d, v in zip(dates, map(float, values))]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    dataset = load_csv(args.data)
    file_values = read_kv_file(args.config) if args.config else {}
    resolved = resolve_config(file_values, _overrides(args))
    resolved.pop("use_calendar", None)
    model_cfg, train_cfg = build_configs(resolved, dataset.schema.feature_dim, None)
    split = split_from(resolved, dataset)
    known = resolved.get("token_known_columns", CALENDAR_COLUMNS)
    report = ablation_run(dataset, split, model_cfg, train_cfg, _horizons(args.horizons),
                          token_known_columns=known)
    report.to_csv(args.out)
    base = {**model_cfg.to_dict(), **dataclasses.asdict(train_cfg), **split.to_dict(),
            "token_known_columns": list(known)}
    write_manifest(f"{args.out}.manifest.json", "ablate",
                   {"with_calendar": {**base, "use_calendar": True},
                    "without_calendar": {**base, "use_calendar": False},
                    "differs_in": ["use_calendar"], "horizons": args.horizons},
                   train_cfg.seed, [p for p in (args.data, args.config) if p], [args.out])
    print(Path(args.out).read_text(), end="")
    return EXIT_OK


def cmd_attention(args) -> int:
    dataset = load_csv(args.data)
    (est,) = _load_forecasters([args.checkpoint])
    split = getattr(est, "split_", None) or SplitSpec.from_fractions(dataset)
    samples = est.windows(dataset, split.bounds(dataset)["train"])
    summary = capture_attention(est.model_, samples, include_encoder=args.encoder, per_head=args.per_head)
    files = export_csv(summary, args.out)
    if not args.no_heatmaps:
        files += render_heatmap(summary, args.out)
    write_manifest(Path(args.out) / "manifest.json", "attention",
                   {"per_head": args.per_head, "encoder": args.encoder, "samples": len(samples)}, None,
                   [args.data, args.checkpoint], files)
    print(f"wrote {len(files)} files to {args.out}")
    return EXIT_OK


def cmd_gridsearch(args) -> int:
    dataset = load_csv(args.data)
    file_values = read_kv_file(args.config) if args.config else {}
    resolved = resolve_config(file_values, _overrides(args))
    model_cfg, train_cfg = build_configs(resolved, dataset.schema.feature_dim, args.horizon)
    split = split_from(resolved, dataset)
    grid_raw = read_kv_file(args.grid)
    candidates = {}
    for key, raw in grid_raw.items():
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        cast = int if key in GRID_MODEL_KEYS and key != "dropout" else float
        try:
            candidates[key] = tuple(cast(p) for p in parts)
        except ValueError:
            raise UsageError(f"grid key {key}: cannot parse {raw!r}") from None
    grid = GridSpec(candidates)
    print(f"grid size {grid.size}")
    results = grid_search(grid, dataset, split, model_cfg, train_cfg,
                          resolved.get("use_calendar", True),
                          resolved.get("token_known_columns", CALENDAR_COLUMNS))
    write_grid_results(results, args.out)
    write_manifest(f"{args.out}.manifest.json", "gridsearch",
                   {**model_cfg.to_dict(), **dataclasses.asdict(train_cfg), "grid": grid_raw},
                   train_cfg.seed, [p for p in (args.data, args.config, args.grid) if p], [args.out])
    for r in results:
        print(f"#{r.rank} {r.point} val_mae={r.val_mae!r}{' ERROR ' + r.error if r.error else ''}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_train_flags(p, horizon=True):
    p.add_argument("--config", help="key = value configuration file")
    if horizon:
        p.add_argument("--horizon", type=int, help="forecast horizon in days (resizes the windows)")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any configuration key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsformer", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic daily demand CSV")
    p.add_argument("--spec", help="synthetic key = value file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--days", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and save a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--no-calendar", action="store_true", help="zero-filled tokens (ablation arm)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="rolling-origin evaluation against naive baselines")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--horizons", default="1")
    p.add_argument("--split", choices=("train", "validate", "test"), default="test")
    p.add_argument("--train-end")
    p.add_argument("--validate-end")
    p.add_argument("--per-lead", action="store_true", help="also report every lead time")
    p.add_argument("--oracle", action="store_true", help="add a perfect forecaster (harness self-test)")
    p.add_argument("--out", required=True, help="report path prefix (.csv and .json are added)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("forecast", help="forecast the days after the last CSV row")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("ablate", help="train with and without the calendar tokens")
    p.add_argument("--data", required=True)
    p.add_argument("--horizons", default="1")
    p.add_argument("--out", required=True)
    _add_train_flags(p, horizon=False)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("attention", help="export averaged attention matrices")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--per-head", action="store_true")
    p.add_argument("--encoder", action="store_true", help="also export encoder self-attention")
    p.add_argument("--no-heatmaps", action="store_true")
    p.set_defaults(func=cmd_attention)

    p = sub.add_parser("gridsearch", help="grid search ranked by validation MAE")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", required=True, help="key = v1, v2, ... file")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_gridsearch)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"tsformer: error[divergence]: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"tsformer: error[io]: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, TypeError) as exc:
        msg = " ".join(str(exc).split())
        print(f"tsformer: error[validation]: {msg}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
