"""Forecast accuracy metrics, naive baselines, rolling-origin evaluation and
the calendar ablation."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .data import Dataset, SplitSpec


class EvaluationError(ValueError):
    pass


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape:
        raise EvaluationError(f"length mismatch: {pred.size} forecasts vs {truth.size} truths")
    if pred.size == 0:
        raise EvaluationError("need at least one forecast")
    return pred, truth


def mae(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def rmse(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def mape(pred, truth) -> float:
    """Mean absolute percentage error, in percent."""
    pred, truth = _pair(pred, truth)
    if np.any(truth <= 0):
        raise EvaluationError("MAPE needs strictly positive ground truth")
    return float(100.0 * np.mean(np.abs((pred - truth) / truth)))


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    rmse: float
    mape: float
    n: int

    @classmethod
    def score(cls, pred, truth) -> "MetricsReport":
        pred, truth = _pair(pred, truth)
        return cls(mae(pred, truth), rmse(pred, truth), mape(pred, truth), pred.size)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def naive_forecast(history, horizon: int) -> np.ndarray:
    """Repeat the last observation ``horizon`` times."""
    history = np.asarray(history, dtype=np.float64)
    if history.size == 0:
        raise EvaluationError("naive forecast needs a nonempty history")
    return np.full(horizon, history[-1])


def seasonal_naive_forecast(history, horizon: int, s: int) -> np.ndarray:
    """Value from ``s`` days earlier, stepping back whole seasons until the
    source day is observed."""
    history = np.asarray(history, dtype=np.float64)
    if s < 1:
        raise EvaluationError("season length must be >= 1")
    if history.size < s:
        raise EvaluationError(f"history of {history.size} days is shorter than the season {s}")
    n = history.size
    lead = np.arange(1, horizon + 1)
    periods = -(-lead // s)  # ceil(lead / s): the smallest m with lead - m*s <= 0
    return history[n - 1 + lead - periods * s]


class Forecaster(Protocol):
    """Anything that forecasts ``horizon`` raw-unit days after each origin row."""

    name: str
    min_history: int

    def forecast_origins(self, dataset: Dataset, origins: Sequence[int], horizon: int) -> np.ndarray:
        ...


class NaiveForecaster:
    name = "naive"
    min_history = 1

    def forecast_origins(self, dataset, origins, horizon):
        y = dataset.demand
        return np.stack([naive_forecast(y[: t + 1], horizon) for t in origins])


class SeasonalNaiveForecaster:
    def __init__(self, season: int = 7):
        self.season = season
        self.name = f"seasonal_naive_s{season}"
        self.min_history = season

    def forecast_origins(self, dataset, origins, horizon):
        y = dataset.demand
        return np.stack([seasonal_naive_forecast(y[: t + 1], horizon, self.season) for t in origins])


class OracleForecaster:
    """Returns the ground truth.  Used to self-test the harness."""

    name = "oracle"
    min_history = 1

    def forecast_origins(self, dataset, origins, horizon):
        y = dataset.demand
        return np.stack([y[t + 1 : t + 1 + horizon] for t in origins])


def baseline_for(horizon: int):
    """Naive (s=1) for one-step, seasonal naive with s=7 beyond."""
    return NaiveForecaster() if horizon == 1 else SeasonalNaiveForecaster(7)


# ---------------------------------------------------------------------------
# rolling origin
# ---------------------------------------------------------------------------

@dataclass
class EvaluationRun:
    model: str
    horizon: int
    split: str
    origin_dates: np.ndarray
    forecasts: np.ndarray
    truths: np.ndarray
    report: MetricsReport
    per_lead: list[MetricsReport] = field(default_factory=list)

    def row(self) -> dict:
        return {
            "model": self.model,
            "horizon": self.horizon,
            "split": self.split,
            "mae": self.report.mae,
            "rmse": self.report.rmse,
            "mape": self.report.mape,
            "n": self.report.n,
        }


def evaluation_origins(
    split_range: tuple[int, int], horizon: int, min_history: int = 1
) -> list[int]:
    """Origins ``t`` whose ``horizon`` target rows lie in ``[lo, hi)`` and with
    at least ``min_history`` rows up to and including ``t``."""
    lo, hi = split_range
    first = max(lo - 1, min_history - 1)
    return list(range(first, hi - horizon))


def rolling_origin_evaluate(
    forecaster: Forecaster,
    dataset: Dataset,
    split_range: tuple[int, int],
    horizon: int,
    split_name: str = "test",
    min_history: int | None = None,
) -> EvaluationRun:
    """Score every feasible origin in the split at each lead time 1..horizon.

    All (origin, lead) pairs are pooled into a single report; per-lead
    reports are kept alongside.
    """
    need = max(forecaster.min_history, min_history or 1)
    origins = evaluation_origins(split_range, horizon, need)
    if not origins:
        raise EvaluationError(
            f"no origin in {split_name} split has {horizon} target days and {need} days of history"
        )
    forecasts = np.asarray(forecaster.forecast_origins(dataset, origins, horizon), dtype=np.float64)
    truths = np.stack([dataset.demand[t + 1 : t + 1 + horizon] for t in origins])
    if forecasts.shape != truths.shape:
        raise EvaluationError(f"forecaster returned {forecasts.shape}, expected {truths.shape}")
    return EvaluationRun(
        model=forecaster.name,
        horizon=horizon,
        split=split_name,
        origin_dates=dataset.dates[origins],
        forecasts=forecasts,
        truths=truths,
        report=MetricsReport.score(forecasts, truths),
        per_lead=[MetricsReport.score(forecasts[:, k], truths[:, k]) for k in range(horizon)],
    )


REPORT_COLUMNS = ("model", "horizon", "split", "mae", "rmse", "mape", "n")


def write_reports(runs: Sequence[EvaluationRun], csv_path=None, json_path=None, per_lead: bool = False) -> None:
    rows = []
    for run in runs:
        rows.append(run.row())
        if per_lead:
            for k, rep in enumerate(run.per_lead, start=1):
                rows.append({
                    "model": f"{run.model}@lead{k}", "horizon": run.horizon, "split": run.split,
                    "mae": rep.mae, "rmse": rep.rmse, "mape": rep.mape, "n": rep.n,
                })
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump(rows, fh, indent=2)


# ---------------------------------------------------------------------------
# calendar ablation
# ---------------------------------------------------------------------------

@dataclass
class AblationReport:
    horizons: list[int]
    with_calendar: dict[int, EvaluationRun]
    without_calendar: dict[int, EvaluationRun]
    seed: int

    def to_csv(self, path: str | os.PathLike) -> None:
        """Side-by-side table: one row per (arm, metric), one column per horizon."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["model", "metric", *[f"h{h}" for h in self.horizons]])
            for label, runs in (("Tsformer w/ calendar", self.with_calendar),
                                ("Tsformer w/o calendar", self.without_calendar)):
                for metric in ("mae", "rmse", "mape"):
                    writer.writerow([label, metric.upper(),
                                     *[repr(getattr(runs[h].report, metric)) for h in self.horizons]])


def ablation_run(
    dataset: Dataset,
    split_spec: SplitSpec,
    model_config,
    train_config,
    horizons: Sequence[int] = (1,),
    split_name: str = "test",
    token_known_columns: Sequence[str] = ("month", "weekday"),
) -> AblationReport:
    """Train the with- and without-calendar arms at each horizon and score both.

    The arms share the seed, the split and every hyperparameter; only
    ``use_calendar`` differs.  ``model_config`` is resized per horizon with
    :meth:`ModelConfig.with_horizon`.
    """
    from .estimators import TsformerForecaster

    bounds = split_spec.bounds(dataset)
    arms: dict[bool, dict[int, EvaluationRun]] = {True: {}, False: {}}
    for h in horizons:
        cfg = model_config.with_horizon(h)
        fitted = {
            use_calendar: TsformerForecaster.from_configs(
                cfg, train_config, use_calendar=use_calendar,
                token_known_columns=tuple(token_known_columns),
            ).fit(dataset, split=split_spec)
            for use_calendar in (True, False)
        }
        need = max(e.min_history for e in fitted.values())
        for use_calendar, est in fitted.items():
            arms[use_calendar][h] = rolling_origin_evaluate(
                est, dataset, bounds[split_name], h, split_name, need
            )
    return AblationReport(list(horizons), arms[True], arms[False], train_config.seed)
