"""Daily demand data: CSV ingestion, categorical codes, Min-Max scaling,
rolling windows with calendar tokens, chronological splits, and a seeded
synthetic generator."""
from __future__ import annotations

import csv
import datetime as dt
import math
import os
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import ModelConfig

DATE_TYPE_CODES = {"working day": 0, "weekend": 1, "holiday": 2}
WEATHER_CODES = {"snow": 0, "rain": 1, "overcast": 2, "cloudy": 3, "sunny": 4}
CATEGORY_RANGES = {"weather": 4, "date_type": 2, "month": 11, "weekday": 6}
CALENDAR_COLUMNS = ("month", "weekday")
SCHEMA_VERSION = 1


class DataError(ValueError):
    """Malformed or invalid input data."""


class ColumnError(DataError):
    pass


class ValueParseError(DataError):
    pass


class DateGapError(DataError):
    pass


class DemandError(DataError):
    pass


# ---------------------------------------------------------------------------
# schema and dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RecordSchema:
    """Column layout: date, demand, idx_1..idx_K, temp_max, weather,
    date_type, month, weekday.  ``feature_dim`` excludes the date."""

    k_indexes: int = 1
    version: int = SCHEMA_VERSION

    @property
    def feature_columns(self) -> tuple[str, ...]:
        idx = tuple(f"idx_{k}" for k in range(1, self.k_indexes + 1))
        return ("demand",) + idx + ("temp_max", "weather", "date_type", "month", "weekday")

    @property
    def header(self) -> tuple[str, ...]:
        return ("date",) + self.feature_columns

    @property
    def feature_dim(self) -> int:
        return len(self.feature_columns)

    def index(self, column: str) -> int:
        return self.feature_columns.index(column)

    @property
    def search_columns(self) -> tuple[str, ...]:
        return tuple(c for c in self.feature_columns if c.startswith("idx_"))

    @classmethod
    def from_header(cls, header: Sequence[str]) -> "RecordSchema":
        header = [h.strip() for h in header]
        k = sum(1 for h in header if h.startswith("idx_"))
        schema = cls(k_indexes=k)
        if tuple(header) != schema.header:
            missing = [c for c in schema.header if c not in header]
            if missing:
                raise ColumnError(f"row 1: missing column(s) {', '.join(missing)}")
            raise ColumnError(
                f"row 1: header {','.join(header)} is not in the order {','.join(schema.header)}"
            )
        return schema


@dataclass(frozen=True)
class Dataset:
    """Consecutive daily records.  ``values`` is ``[N, feature_dim]``."""

    schema: RecordSchema
    dates: np.ndarray  # datetime64[D]
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != self.schema.feature_dim:
            raise DataError(f"values shape {self.values.shape} does not match the schema")
        if len(self.dates) != len(self.values):
            raise DataError("dates and values differ in length")
        if len(self.dates) > 1:
            steps = np.diff(self.dates.astype("datetime64[D]").astype(np.int64))
            if not np.all(steps == 1):
                bad = int(np.argmax(steps != 1))
                raise DateGapError(
                    f"dates are not consecutive after {self.dates[bad]} (next {self.dates[bad + 1]})"
                )

    def __len__(self) -> int:
        return len(self.dates)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.schema.index(name)]

    @property
    def demand(self) -> np.ndarray:
        return self.column("demand")

    def date_index(self, date) -> int:
        """Row index of ``date`` (may lie outside ``[0, N)``)."""
        return int((np.datetime64(date, "D") - self.dates[0]).astype(np.int64))

    def slice(self, start: int, stop: int) -> "Dataset":
        return Dataset(self.schema, self.dates[start:stop], self.values[start:stop])


def encode_date_type(label) -> int:
    key = str(label).strip().lower()
    if key not in DATE_TYPE_CODES:
        raise ValueError(f"unknown date type {label!r}; expected one of {sorted(DATE_TYPE_CODES)}")
    return DATE_TYPE_CODES[key]


def encode_weather(label) -> int:
    key = str(label).strip().lower()
    if key not in WEATHER_CODES:
        raise ValueError(f"unknown weather {label!r}; expected one of {sorted(WEATHER_CODES)}")
    return WEATHER_CODES[key]


def encode_calendar(date) -> tuple[int, int]:
    """(month_code, weekday_code): January and Monday are 0."""
    if isinstance(date, np.datetime64):
        date = date.astype("datetime64[D]").item()
    elif isinstance(date, str):
        date = dt.date.fromisoformat(date)
    return date.month - 1, date.isoweekday() - 1


def _parse_code(text: str, column: str, encoder, row: int) -> float:
    text = text.strip()
    try:
        code = int(text)
    except ValueError:
        try:
            return float(encoder(text))
        except ValueError as exc:
            raise ValueParseError(f"row {row}: column {column}: {exc}") from None
    if not 0 <= code <= CATEGORY_RANGES[column]:
        raise ValueParseError(f"row {row}: column {column}: code {code} out of range")
    return float(code)


def _integer_only(text: str) -> int:
    raise ValueError(f"not an integer code: {text!r}")


def load_csv(path: str | os.PathLike, schema: RecordSchema | None = None) -> Dataset:
    """Read a daily CSV.  ``weather``/``date_type`` may be labels or codes."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ColumnError("row 1: file is empty") from None
        found = RecordSchema.from_header(header)
        if schema is not None and found.header != schema.header:
            raise ColumnError(f"row 1: header does not match the expected schema {schema.header}")
        schema = found
        dates, rows = [], []
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(schema.header):
                raise ValueParseError(
                    f"row {row_no}: expected {len(schema.header)} fields, got {len(row)}"
                )
            record = dict(zip(schema.header, row))
            try:
                date = dt.date.fromisoformat(record["date"].strip())
            except ValueError:
                raise ValueParseError(f"row {row_no}: column date: bad date {record['date']!r}") from None
            values = []
            for col in schema.feature_columns:
                text = record[col]
                if not text.strip():
                    raise ValueParseError(f"row {row_no}: column {col}: missing value")
                if col == "weather":
                    values.append(_parse_code(text, col, encode_weather, row_no))
                elif col == "date_type":
                    values.append(_parse_code(text, col, encode_date_type, row_no))
                elif col in CALENDAR_COLUMNS:
                    values.append(_parse_code(text, col, _integer_only, row_no))
                else:
                    try:
                        v = float(text)
                    except ValueError:
                        raise ValueParseError(
                            f"row {row_no}: column {col}: cannot parse {text!r}"
                        ) from None
                    if not math.isfinite(v):
                        raise ValueParseError(f"row {row_no}: column {col}: non-finite value")
                    values.append(v)
            month, weekday = encode_calendar(date)
            if values[schema.index("month")] != month or values[schema.index("weekday")] != weekday:
                raise ValueParseError(f"row {row_no}: month/weekday codes disagree with date {date}")
            if values[0] <= 0:
                raise DemandError(f"row {row_no}: demand must be positive (MAPE divides by it)")
            if schema.k_indexes and min(values[1 : 1 + schema.k_indexes]) < 0:
                raise ValueParseError(f"row {row_no}: search index must be nonnegative")
            dates.append((date, row_no))
            rows.append(values)

    order = sorted(range(len(dates)), key=lambda i: dates[i][0])
    for a, b in zip(order, order[1:]):
        (da, _), (db, rb) = dates[a], dates[b]
        if da == db:
            raise DateGapError(f"row {rb}: duplicate date {db}")
        if (db - da).days != 1:
            missing = da + dt.timedelta(days=1)
            raise DateGapError(f"row {rb}: date gap, missing {missing.isoformat()}")
    if not rows:
        raise DataError("no data rows")
    return Dataset(
        schema,
        np.array([dates[i][0] for i in order], dtype="datetime64[D]"),
        np.array([rows[i] for i in order], dtype=np.float64),
    )


def write_csv(dataset: Dataset, path: str | os.PathLike) -> None:
    """Write with integer codes for categorical columns."""
    integer_cols = set(CATEGORY_RANGES)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(dataset.schema.header)
        for date, row in zip(dataset.dates, dataset.values):
            cells = [str(date)]
            for col, v in zip(dataset.schema.feature_columns, row):
                cells.append(str(int(v)) if col in integer_cols else repr(float(v)))
            writer.writerow(cells)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationStats:
    columns: tuple[str, ...]
    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        if np.any(self.maxs < self.mins):
            raise DataError("normalization max below min")

    @property
    def constant(self) -> np.ndarray:
        return self.maxs == self.mins

    def _col(self, column: str) -> int:
        return self.columns.index(column)

    def to_dict(self) -> dict:
        return {
            "columns": list(self.columns),
            "min": [float(v) for v in self.mins],
            "max": [float(v) for v in self.maxs],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NormalizationStats":
        return cls(tuple(d["columns"]), np.array(d["min"], float), np.array(d["max"], float))


def minmax_fit(dataset: Dataset, columns: Sequence[str] | None = None) -> NormalizationStats:
    """Per-column min and max.  Fit on the training split only."""
    columns = tuple(columns or dataset.schema.feature_columns)
    idx = [dataset.schema.index(c) for c in columns]
    block = dataset.values[:, idx]
    return NormalizationStats(columns, block.min(axis=0), block.max(axis=0))


def minmax_apply(stats: NormalizationStats, value, column: str):
    i = stats._col(column)
    lo, hi = stats.mins[i], stats.maxs[i]
    value = np.asarray(value, dtype=np.float64)
    if hi == lo:
        return np.zeros_like(value) if value.ndim else 0.0
    out = (value - lo) / (hi - lo)
    return out if out.ndim else float(out)


def minmax_invert(stats: NormalizationStats, value, column: str):
    i = stats._col(column)
    lo, hi = stats.mins[i], stats.maxs[i]
    if hi == lo:
        raise DataError(f"cannot invert normalization of constant column {column}")
    out = np.asarray(value, dtype=np.float64) * (hi - lo) + lo
    return out if out.ndim else float(out)


def normalize_matrix(stats: NormalizationStats, values: np.ndarray) -> np.ndarray:
    """Scale every column of ``[N, F]`` values (columns in stats order)."""
    span = stats.maxs - stats.mins
    safe = np.where(span == 0, 1.0, span)
    return np.where(span == 0, 0.0, (values - stats.mins) / safe)


# ---------------------------------------------------------------------------
# rolling windows
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowSample:
    origin_date: np.datetime64
    encoder_matrix: np.ndarray
    decoder_matrix: np.ndarray
    target_vector: np.ndarray
    token_flags: np.ndarray
    origin_index: int = -1

    @property
    def forecast_dates(self) -> np.ndarray:
        h = int(self.token_flags.sum())
        return self.origin_date + np.arange(1, h + 1)


def valid_origins(n_days: int, config: ModelConfig) -> range:
    """0-based origin indices t with a full encoder window and h days after."""
    return range(config.encoder_input_length - 1, n_days - config.forecast_horizon)


def _check_known_columns(schema: RecordSchema, known: Sequence[str]) -> None:
    unknown = set(known) - set(schema.feature_columns)
    forbidden = {"demand", *schema.search_columns} & set(known)
    if unknown or forbidden:
        raise DataError(f"invalid token_known_columns {list(known)}")


def _future_rows(
    dataset: Dataset, stats: NormalizationStats, start: int, count: int, known: Sequence[str]
) -> np.ndarray:
    """Normalized rows for indices ``start..start+count-1`` that may run past
    the end of the data; only calendar cells are filled beyond the end."""
    schema = dataset.schema
    rows = np.zeros((count, schema.feature_dim))
    inside = max(0, min(count, len(dataset) - start))
    if inside:
        rows[:inside] = normalize_matrix(stats, dataset.values[start : start + inside])
    if inside < count:
        extra = set(known) - set(CALENDAR_COLUMNS)
        if extra:
            raise DataError(
                f"token columns {sorted(extra)} are unknown beyond {dataset.dates[-1]}"
            )
        for k in range(inside, count):
            month, weekday = encode_calendar(dataset.dates[0] + start + k)
            rows[k, schema.index("month")] = minmax_apply(stats, month, "month")
            rows[k, schema.index("weekday")] = minmax_apply(stats, weekday, "weekday")
    return rows


def build_window(
    dataset: Dataset,
    t: int,
    config: ModelConfig,
    stats: NormalizationStats,
    use_calendar: bool = True,
    token_known_columns: Sequence[str] = CALENDAR_COLUMNS,
    normalized: np.ndarray | None = None,
) -> WindowSample:
    """The window whose last known day is row ``t``.

    Target days may run past the end of the data (pure forecasting); their
    targets are then NaN.
    """
    l_enc, l_dec, h = config.encoder_input_length, config.decoder_input_length, config.forecast_horizon
    if t < l_enc - 1 or t >= len(dataset):
        raise DataError(f"origin {t} leaves no full encoder window")
    norm = normalize_matrix(stats, dataset.values) if normalized is None else normalized
    dec_start = t - (l_dec - h) + 1
    enc = norm[t - l_enc + 1 : t + 1].copy()
    dec = norm[dec_start : t + 1].copy()
    if t + h < len(dataset):
        future = norm[t + 1 : t + h + 1]
    else:
        future = _future_rows(dataset, stats, t + 1, h, token_known_columns)
    tokens = np.zeros_like(future)
    if use_calendar:
        for col in token_known_columns:
            i = dataset.schema.index(col)
            tokens[:, i] = future[:, i]
    demand_col = dataset.schema.index("demand")
    target = np.concatenate([dec[:, demand_col], future[:, demand_col]])
    if t + h >= len(dataset):
        target[l_dec - h + max(0, len(dataset) - t - 1) :] = np.nan
    return WindowSample(
        origin_date=dataset.dates[t],
        encoder_matrix=enc,
        decoder_matrix=np.vstack([dec, tokens]),
        target_vector=target,
        token_flags=np.arange(l_dec) >= l_dec - h,
        origin_index=t,
    )


def make_windows(
    dataset: Dataset,
    config: ModelConfig,
    stats: NormalizationStats,
    use_calendar: bool = True,
    *,
    target_range: tuple[int, int] | None = None,
    token_known_columns: Sequence[str] = CALENDAR_COLUMNS,
) -> list[WindowSample]:
    """Step-1 rolling windows.

    The origin ``t`` is the last known day.  The encoder covers days
    ``t-L_enc+1..t``; the decoder covers ``t-(L_dec-h)+1..t+h`` with the
    last ``h`` rows replaced by tokens.  ``target_range=(lo, hi)`` keeps
    only origins whose target days all fall in row indices ``[lo, hi)``;
    the encoder may reach back before ``lo``.
    """
    l_enc, h = config.encoder_input_length, config.forecast_horizon
    if len(dataset) < l_enc + h:
        raise DataError(
            f"dataset has {len(dataset)} days; need at least {l_enc + h} for one window"
        )
    if config.feature_dim != dataset.schema.feature_dim:
        raise DataError(
            f"model feature_dim {config.feature_dim} != dataset feature_dim {dataset.schema.feature_dim}"
        )
    _check_known_columns(dataset.schema, token_known_columns)
    norm = normalize_matrix(stats, dataset.values)
    return [
        build_window(dataset, t, config, stats, use_calendar, token_known_columns, norm)
        for t in valid_origins(len(dataset), config)
        if target_range is None or (target_range[0] <= t + 1 and t + h < target_range[1])
    ]


def stack_windows(samples: Sequence[WindowSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch arrays ``[B, L_enc, F]``, ``[B, L_dec, F]``, ``[B, L_dec]``."""
    return (
        np.stack([s.encoder_matrix for s in samples]),
        np.stack([s.decoder_matrix for s in samples]),
        np.stack([s.target_vector for s in samples]),
    )


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    """Inclusive end dates of the train and validate periods."""

    train_end: dt.date
    validate_end: dt.date

    @classmethod
    def from_fractions(cls, dataset: Dataset, train: float = 0.7, validate: float = 0.15) -> "SplitSpec":
        n = len(dataset)
        n_train = int(round(n * train))
        n_val = int(round(n * validate))
        return cls(
            dataset.dates[n_train - 1].item(),
            dataset.dates[n_train + n_val - 1].item(),
        )

    def bounds(self, dataset: Dataset) -> dict[str, tuple[int, int]]:
        """Half-open row ranges of each split."""
        first, last = dataset.dates[0].item(), dataset.dates[-1].item()
        if not (first <= self.train_end < self.validate_end < last):
            raise DataError(
                f"split dates must satisfy {first} <= train_end < validate_end < {last}"
            )
        a = dataset.date_index(self.train_end) + 1
        b = dataset.date_index(self.validate_end) + 1
        return {"train": (0, a), "validate": (a, b), "test": (b, len(dataset))}

    def to_dict(self) -> dict:
        return {"train_end": self.train_end.isoformat(), "validate_end": self.validate_end.isoformat()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitSpec":
        return cls(dt.date.fromisoformat(d["train_end"]), dt.date.fromisoformat(d["validate_end"]))


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    b = spec.bounds(dataset)
    return tuple(dataset.slice(*b[name]) for name in ("train", "validate", "test"))


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

MIN_SYNTH_DAYS = 28
WEEKLY_PROFILE = np.array([-0.55, -0.45, -0.35, -0.15, 0.25, 0.75, 0.5])  # Mon..Sun, mean 0


@dataclass(frozen=True)
class SyntheticSpec:
    """Keys of the synthetic key-value file.

    ``holidays`` is a list of ``(month, day, length)`` periods that receive
    a multiplicative spike of ``holiday_amp`` and date type "holiday".
    """

    days: int = 1200
    base: float = 10000.0
    weekly_amp: float = 0.3
    annual_amp: float = 0.4
    noise: float = 0.05
    holidays: tuple[tuple[int, int, int], ...] = ((1, 1, 3), (5, 1, 5), (10, 1, 7))
    holiday_amp: float = 0.5
    k_indexes: int = 3
    seed: int = 0
    start_date: dt.date = dt.date(2013, 1, 1)

    def __post_init__(self):
        if self.days < MIN_SYNTH_DAYS:
            raise DataError(f"synthetic days must be >= {MIN_SYNTH_DAYS}")
        if self.base <= 0:
            raise DataError("synthetic base must be positive")
        if self.noise < 0 or self.k_indexes < 0:
            raise DataError("noise and k_indexes must be nonnegative")
        for m, d, length in self.holidays:
            if not (1 <= m <= 12 and 1 <= d <= 31 and length >= 1):
                raise DataError(f"bad holiday period {(m, d, length)}")

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(values) - known
        if unknown:
            raise DataError(f"unknown synthetic key(s): {', '.join(sorted(unknown))}")
        kwargs = {}
        for key, raw in values.items():
            raw = str(raw).strip()
            try:
                if key in ("days", "k_indexes", "seed"):
                    kwargs[key] = int(raw)
                elif key == "start_date":
                    kwargs[key] = dt.date.fromisoformat(raw)
                elif key == "holidays":
                    kwargs[key] = parse_holidays(raw)
                else:
                    kwargs[key] = float(raw)
            except ValueError:
                raise DataError(f"synthetic key {key}: cannot parse {raw!r}") from None
        return cls(**kwargs)


def parse_holidays(text: str) -> tuple[tuple[int, int, int], ...]:
    """``"10-01:7, 05-01:5"`` -> ((10, 1, 7), (5, 1, 5)).  Empty means none."""
    periods = []
    for item in filter(None, (p.strip() for p in text.split(","))):
        md, _, length = item.partition(":")
        month, day = md.split("-")
        periods.append((int(month), int(day), int(length or 1)))
    return tuple(periods)


def _holiday_flags(dates: Sequence[dt.date], holidays) -> np.ndarray:
    flags = np.zeros(len(dates), dtype=bool)
    years = {d.year for d in dates}
    marked = set()
    for year in years:
        for m, d, length in holidays:
            try:
                start = dt.date(year, m, d)
            except ValueError:
                continue
            marked.update(start + dt.timedelta(days=k) for k in range(length))
    for i, day in enumerate(dates):
        flags[i] = day in marked
    return flags


def synth_generate(spec: SyntheticSpec, seed: int | None = None) -> Dataset:
    """Seeded synthetic tourism-style demand with lagged search indexes."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    dates = [spec.start_date + dt.timedelta(days=i) for i in range(spec.days)]
    weekday = np.array([d.isoweekday() - 1 for d in dates])
    month = np.array([d.month - 1 for d in dates])
    doy = np.array([d.timetuple().tm_yday - 1 for d in dates], dtype=float)
    holiday = _holiday_flags(dates, spec.holidays)

    weekly = WEEKLY_PROFILE[weekday]
    annual = np.sin(2 * np.pi * doy / 365.25 - np.pi / 2)
    spike = spec.holiday_amp * holiday
    eps = rng.normal(0.0, spec.noise, spec.days) if spec.noise > 0 else np.zeros(spec.days)
    demand = spec.base * (1 + spec.weekly_amp * weekly + spec.annual_amp * annual + spike) * (1 + eps)
    demand = np.maximum(demand, 1.0)

    idx_cols = []
    for k in range(spec.k_indexes):
        lag = k % 3 + 1
        lagged = np.concatenate([np.full(lag, demand[0]), demand[:-lag]])
        jitter = rng.normal(0.0, max(spec.noise, 0.02), spec.days)
        idx_cols.append(np.maximum(lagged * 0.05 * (1 + jitter), 0.0))

    temp = 15 + 10 * annual + rng.normal(0.0, 2.0, spec.days)
    weather_p = np.array([0.05, 0.2, 0.25, 0.25, 0.25])
    weather = rng.choice(5, size=spec.days, p=weather_p).astype(float)
    date_type = np.where(holiday, 2, np.where(weekday >= 5, 1, 0)).astype(float)

    values = np.column_stack([demand, *idx_cols, temp, weather, date_type, month, weekday])
    return Dataset(RecordSchema(k_indexes=spec.k_indexes), np.array(dates, dtype="datetime64[D]"), values)
