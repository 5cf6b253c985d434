"""Hourly series ingestion, windowing, splitting, scaling and synthetic data."""
import csv
import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

import numpy as np

__all__ = [
    "SchemaError",
    "OrderingError",
    "CsvSchema",
    "RawSeries",
    "SeriesWindow",
    "WindowSet",
    "Normalizer",
    "DatasetManifest",
    "SynthSpec",
    "PreparedData",
    "ingest_csv",
    "write_csv",
    "make_windows",
    "chronological_split",
    "fit_apply_normalizer",
    "synth_generate",
    "load_manifest",
    "prepare",
]

MISSING_TOKENS = {"", "na", "nan", "null", "none", "n/a"}
STD_FLOOR = 1e-8


class SchemaError(ValueError):
    pass


class OrderingError(ValueError):
    pass


@dataclass(frozen=True)
class CsvSchema:
    timestamp_col: str
    endo_cols: tuple
    exo_cols: tuple = ()


@dataclass
class RawSeries:
    """Series on a regular hourly grid; skipped hours appear as all-missing rows."""

    timestamps: np.ndarray  # datetime64[s], strictly increasing by one hour
    endo: np.ndarray  # (n, d_e), NaN where missing
    exo: np.ndarray  # (n, d_x), NaN where missing
    endo_cols: tuple
    exo_cols: tuple
    endo_missing: np.ndarray
    exo_missing: np.ndarray
    rejected: list = field(default_factory=list)  # (line number, reason)
    ground_truth: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.timestamps)
        for name in ("endo", "exo", "endo_missing", "exo_missing"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} has {getattr(self, name).shape[0]} rows, expected {n}")
        if n > 1 and not np.all(np.diff(self.timestamps) > np.timedelta64(0, "s")):
            raise OrderingError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.timestamps)

    @property
    def missing(self) -> np.ndarray:
        return np.concatenate([self.endo_missing, self.exo_missing], axis=1)


# --------------------------------------------------------------------- ingest


def _parse_time(text: str):
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is not None:
        ts = ts.astimezone(timezone.utc).replace(tzinfo=None)
    return ts


def _parse_value(text: str) -> float:
    if text is None or text.strip().lower() in MISSING_TOKENS:
        return math.nan
    return float(text)


def ingest_csv(path, schema: CsvSchema) -> RawSeries:
    """Read a comma-separated hourly file.

    Rows with unparseable timestamps, off-hour timestamps or duplicated
    timestamps are skipped and listed in ``rejected`` with their line numbers.
    A timestamp earlier than its predecessor raises :class:`OrderingError`.
    Missing cells and skipped hours are stored as NaN and flagged.
    """
    endo_cols, exo_cols = tuple(schema.endo_cols), tuple(schema.exo_cols)
    rejected = []
    times, values = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: missing header row")
        header = [h.strip() for h in reader.fieldnames]
        reader.fieldnames = header
        required = (schema.timestamp_col,) + endo_cols + exo_cols
        absent = [c for c in required if c not in header]
        if absent:
            raise SchemaError(f"{path}: missing required column(s) {absent}")
        for row in reader:
            line = reader.line_num
            try:
                ts = _parse_time(row[schema.timestamp_col] or "")
            except ValueError:
                rejected.append((line, f"unparseable timestamp {row[schema.timestamp_col]!r}"))
                continue
            if ts.minute or ts.second or ts.microsecond:
                rejected.append((line, f"timestamp {ts.isoformat()} is not on the hour"))
                continue
            if times:
                if ts == times[-1][0]:
                    rejected.append((line, f"duplicate timestamp {ts.isoformat()}"))
                    continue
                if ts < times[-1][0]:
                    raise OrderingError(
                        f"{path}: line {line} timestamp {ts.isoformat()} precedes "
                        f"line {times[-1][1]} ({times[-1][0].isoformat()})"
                    )
            try:
                vals = [_parse_value(row[c]) for c in endo_cols + exo_cols]
            except ValueError as exc:
                rejected.append((line, f"bad numeric value: {exc}"))
                continue
            times.append((ts, line))
            values.append(vals)

    if not times:
        raise SchemaError(f"{path}: no usable rows")
    start = times[0][0]
    n = int((times[-1][0] - start) / timedelta(hours=1)) + 1
    d_e, d_x = len(endo_cols), len(exo_cols)
    grid = np.full((n, d_e + d_x), np.nan)
    for (ts, _), vals in zip(times, values):
        grid[int((ts - start) / timedelta(hours=1))] = vals
    stamps = np.datetime64(start, "s") + np.arange(n) * np.timedelta64(3600, "s")
    missing = np.isnan(grid)
    return RawSeries(
        timestamps=stamps,
        endo=grid[:, :d_e],
        exo=grid[:, d_e:],
        endo_cols=endo_cols,
        exo_cols=exo_cols,
        endo_missing=missing[:, :d_e],
        exo_missing=missing[:, d_e:],
        rejected=rejected,
    )


def write_csv(series: RawSeries, path, timestamp_col="timestamp"):
    """Write ``series`` in the layout :func:`ingest_csv` reads; missing cells become ``NA``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((timestamp_col,) + tuple(series.endo_cols) + tuple(series.exo_cols))
        for ts, e, x in zip(series.timestamps, series.endo, series.exo):
            cells = ["NA" if math.isnan(v) else repr(float(v)) for v in np.concatenate([e, x])]
            w.writerow([str(ts)] + cells)


# -------------------------------------------------------------------- windows


@dataclass
class SeriesWindow:
    x_endo: np.ndarray
    x_exo: np.ndarray
    y: np.ndarray
    origin: int
    imputed: bool = False


@dataclass
class WindowSet:
    """Stacked windows. ``origin`` is the series index of each window's first input row."""

    x_endo: np.ndarray  # (n, T, d_e)
    x_exo: np.ndarray  # (n, T, d_x)
    y: np.ndarray  # (n, d_e)
    origin: np.ndarray  # (n,)
    exo_missing: np.ndarray  # (n, T, d_x) cells that were missing in the source
    imputed: np.ndarray  # (n,) any exogenous cell of the window was filled in

    def __len__(self):
        return self.y.shape[0]

    def __getitem__(self, i) -> SeriesWindow:
        return SeriesWindow(self.x_endo[i], self.x_exo[i], self.y[i], int(self.origin[i]), bool(self.imputed[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "WindowSet":
        return WindowSet(*(getattr(self, f.name)[idx] for f in dataclasses.fields(self)))

    def replace(self, **changes) -> "WindowSet":
        return dataclasses.replace(self, **changes)

    @property
    def lookback(self):
        return self.x_endo.shape[1]


def _locf(block):
    """Carry the last observation forward down each column; leading NaNs stay NaN."""
    out = block.copy()
    for t in range(1, out.shape[0]):
        gap = np.isnan(out[t])
        out[t, gap] = out[t - 1, gap]
    return out


def make_windows(s: RawSeries, lookback: int = 12, horizon: int = 1) -> WindowSet:
    """Stride-1 windows of ``lookback`` inputs and the value ``horizon`` steps later.

    Windows touching a missing endogenous value anywhere in their span are
    dropped. Missing exogenous cells are filled by last observation carried
    forward within the window; anything still missing stays NaN until the
    training-split means are known (see :func:`fit_apply_normalizer`).
    """
    if lookback < 1 or horizon < 1:
        raise ValueError("lookback and horizon must be positive")
    span = lookback + horizon
    n = len(s)
    if n < span:
        raise ValueError(f"series of length {n} is shorter than lookback + horizon = {span}")
    bad_endo = s.endo_missing.any(axis=1)
    # Windows whose span [o, o + span) holds any bad row.
    bad_prefix = np.concatenate([[0], np.cumsum(bad_endo)])
    n_origins = n - span + 1
    origins = np.arange(n_origins)
    keep = origins[(bad_prefix[origins + span] - bad_prefix[origins]) == 0]

    idx = keep[:, None] + np.arange(lookback)[None, :]
    x_endo = s.endo[idx]
    x_exo = s.exo[idx]
    exo_missing = s.exo_missing[idx]
    y = s.endo[keep + lookback + horizon - 1]
    imputed = exo_missing.any(axis=(1, 2))
    for i in np.flatnonzero(imputed):
        x_exo[i] = _locf(x_exo[i])
    return WindowSet(x_endo, x_exo, y, keep.astype(np.int64), exo_missing, imputed)


def chronological_split(windows: WindowSet, train_frac: float = 0.8):
    """Earliest ``floor(train_frac * n)`` windows for training, the rest for testing."""
    n = len(windows)
    if n < 2:
        raise ValueError(f"need at least 2 windows to split, got {n}")
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must lie strictly between 0 and 1")
    if np.any(np.diff(windows.origin) <= 0):
        raise OrderingError("windows must be ordered by origin")
    n_train = int(math.floor(train_frac * n))
    n_train = min(max(n_train, 1), n - 1)
    return windows.subset(slice(0, n_train)), windows.subset(slice(n_train, n))


# -------------------------------------------------------------------- scaling


@dataclass
class Normalizer:
    endo_mean: np.ndarray
    endo_std: np.ndarray
    exo_mean: np.ndarray
    exo_std: np.ndarray

    @classmethod
    def fit(cls, train: WindowSet) -> "Normalizer":
        """Column statistics over every input row of every training window."""
        if len(train) == 0:
            raise ValueError("cannot fit a normalizer on an empty training split")
        e = train.x_endo.reshape(-1, train.x_endo.shape[-1])
        x = train.x_exo.reshape(-1, train.x_exo.shape[-1])
        if x.shape[1]:
            with np.errstate(invalid="ignore"):
                x_mean = np.nanmean(x, axis=0) if x.size else np.zeros(x.shape[1])
                x_std = np.nanstd(x, axis=0) if x.size else np.ones(x.shape[1])
            x_mean = np.nan_to_num(x_mean)
            x_std = np.nan_to_num(x_std)
        else:
            x_mean, x_std = np.zeros(0), np.ones(0)
        return cls(e.mean(axis=0), np.maximum(e.std(axis=0), STD_FLOOR), x_mean, np.maximum(x_std, STD_FLOOR))

    def transform(self, ws: WindowSet) -> WindowSet:
        if ws.x_endo.shape[2] != self.endo_mean.size or ws.x_exo.shape[2] != self.exo_mean.size:
            raise ValueError(
                f"normalizer fitted on {self.endo_mean.size}/{self.exo_mean.size} endogenous/exogenous columns, "
                f"windows have {ws.x_endo.shape[2]}/{ws.x_exo.shape[2]}"
            )
        x_exo = (ws.x_exo - self.exo_mean) / self.exo_std
        # Cells nothing could be carried into take the training mean, i.e. 0 after scaling.
        x_exo = np.where(np.isnan(x_exo), 0.0, x_exo)
        return ws.replace(
            x_endo=(ws.x_endo - self.endo_mean) / self.endo_std,
            x_exo=x_exo,
            y=(ws.y - self.endo_mean) / self.endo_std,
        )

    def inverse_endo(self, values) -> np.ndarray:
        return np.asarray(values) * self.endo_std + self.endo_mean

    def inverse_exo(self, values) -> np.ndarray:
        return np.asarray(values) * self.exo_std + self.exo_mean

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d) -> "Normalizer":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


def fit_apply_normalizer(train: WindowSet, test: WindowSet):
    """Z-score both splits with statistics from ``train`` only."""
    norm = Normalizer.fit(train)
    return norm.transform(train), norm.transform(test), norm


# ------------------------------------------------------------------ synthetic


def _default_exo():
    return (
        {"name": "driver_lead1", "kind": "driver", "lead": 1, "noise": 0.1},
        {"name": "load_lag2", "kind": "periodic", "period": 24, "lag": 2, "noise": 0.2},
        {"name": "noise", "kind": "noise", "noise": 1.0},
    )


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic hourly emissions-like series.

    The endogenous column is ``level + sum_k a_k sin(2 pi t / P_k) + trend * t
    + driver_weight * u_t + noise * eps_t`` with ``u`` a unit-variance AR(1)
    latent driver. Exogenous recipes:

    * ``driver``: ``u`` shifted by ``lead`` steps (positive means it runs ahead
      of the target) plus noise;
    * ``periodic``: a sinusoid of the given period delayed by ``lag`` steps;
    * ``noise``: pure white noise.
    """

    length: int = 4320
    seed: int = 0
    start: str = "2021-01-01T00:00:00"
    level: float = 10.0
    periods: tuple = (24, 168)
    amplitudes: tuple = (2.0, 1.0)
    trend: float = 0.0002
    noise: float = 0.3
    driver_weight: float = 1.0
    driver_ar: float = 0.7
    exo: tuple = field(default_factory=_default_exo)

    def __post_init__(self):
        if self.length < 200:
            raise ValueError(f"synthetic length must be at least 200, got {self.length}")
        if len(self.periods) != len(self.amplitudes):
            raise ValueError("periods and amplitudes must have the same length")
        for rec in self.exo:
            if rec.get("kind") not in ("driver", "periodic", "noise"):
                raise ValueError(f"unknown exogenous recipe kind {rec.get('kind')!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["periods"] = list(self.periods)
        d["amplitudes"] = list(self.amplitudes)
        d["exo"] = [dict(r) for r in self.exo]
        return d

    @classmethod
    def from_dict(cls, d) -> "SynthSpec":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth fields: {sorted(unknown)}")
        for key in ("periods", "amplitudes"):
            if key in d:
                d[key] = tuple(d[key])
        if "exo" in d:
            d["exo"] = tuple(dict(r) for r in d["exo"])
        return cls(**d)


def synth_generate(spec: SynthSpec) -> RawSeries:
    rng = np.random.default_rng(spec.seed)
    n = spec.length
    pad = max([abs(int(r.get("lead", 0))) for r in spec.exo] + [abs(int(r.get("lag", 0))) for r in spec.exo] + [0])
    total = n + 2 * pad
    shocks = rng.normal(size=total)
    u = np.empty(total)
    u[0] = shocks[0]
    scale = math.sqrt(1.0 - spec.driver_ar**2)
    for t in range(1, total):
        u[t] = spec.driver_ar * u[t - 1] + scale * shocks[t]
    t = np.arange(n, dtype=np.float64)
    seasonal = np.zeros(n)
    for period, amp in zip(spec.periods, spec.amplitudes):
        seasonal += amp * np.sin(2.0 * np.pi * t / period)
    driver = u[pad:pad + n]
    endo = spec.level + seasonal + spec.trend * t + spec.driver_weight * driver + spec.noise * rng.normal(size=n)

    exo_cols = []
    exo = np.zeros((n, len(spec.exo)))
    for j, rec in enumerate(spec.exo):
        kind = rec["kind"]
        eps = rec.get("noise", 0.0) * rng.normal(size=n)
        if kind == "driver":
            lead = int(rec.get("lead", 0))
            exo[:, j] = u[pad + lead:pad + lead + n] + eps
        elif kind == "periodic":
            lag = int(rec.get("lag", 0))
            exo[:, j] = np.sin(2.0 * np.pi * (t - lag) / rec["period"]) + eps
        else:
            exo[:, j] = eps
        exo_cols.append(rec.get("name", f"exo{j}"))

    start = np.datetime64(spec.start, "s")
    stamps = start + np.arange(n) * np.timedelta64(3600, "s")
    return RawSeries(
        timestamps=stamps,
        endo=endo[:, None],
        exo=exo,
        endo_cols=("co2_mass",),
        exo_cols=tuple(exo_cols),
        endo_missing=np.zeros((n, 1), dtype=bool),
        exo_missing=np.zeros((n, len(spec.exo)), dtype=bool),
        ground_truth={
            "periods": list(spec.periods),
            "amplitudes": list(spec.amplitudes),
            "trend": spec.trend,
            "level": spec.level,
            "noise": spec.noise,
            "driver_weight": spec.driver_weight,
            "driver_ar": spec.driver_ar,
            "exo": [dict(r) for r in spec.exo],
            "seed": spec.seed,
        },
    )


# ------------------------------------------------------------------- manifest


@dataclass(frozen=True)
class DatasetManifest:
    csv_path: str
    timestamp_col: str
    endo_cols: tuple
    exo_cols: tuple = ()
    lookback: int = 12
    horizon: int = 1
    train_frac: float = 0.8

    @property
    def schema(self) -> CsvSchema:
        return CsvSchema(self.timestamp_col, tuple(self.endo_cols), tuple(self.exo_cols))

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["endo_cols"], d["exo_cols"] = list(self.endo_cols), list(self.exo_cols)
        return d


def load_manifest(path) -> DatasetManifest:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    missing = [k for k in ("csv_path", "timestamp_col", "endo_cols") if k not in d]
    if missing:
        raise SchemaError(f"{path}: manifest lacks {missing}")
    csv_path = d["csv_path"]
    if not os.path.isabs(csv_path):
        csv_path = os.path.join(os.path.dirname(os.path.abspath(path)), csv_path)
    return DatasetManifest(
        csv_path=csv_path,
        timestamp_col=d["timestamp_col"],
        endo_cols=tuple(d["endo_cols"]),
        exo_cols=tuple(d.get("exo_cols", ())),
        lookback=int(d.get("lookback", 12)),
        horizon=int(d.get("horizon", 1)),
        train_frac=float(d.get("train_frac", 0.8)),
    )


@dataclass
class PreparedData:
    raw: RawSeries
    train: WindowSet  # normalised
    test: WindowSet  # normalised
    normalizer: Normalizer
    horizon: int = 1

    def target_times(self, ws: WindowSet) -> np.ndarray:
        return self.raw.timestamps[ws.origin + ws.lookback + self.horizon - 1]

    @property
    def n_endo(self):
        return self.train.y.shape[1]

    @property
    def n_exo(self):
        return self.train.x_exo.shape[2]


def prepare(raw: RawSeries, lookback: int = 12, horizon: int = 1, train_frac: float = 0.8,
            normalizer: Normalizer = None) -> PreparedData:
    """Window, split and scale ``raw``; pass ``normalizer`` to reuse saved statistics."""
    windows = make_windows(raw, lookback, horizon)
    train, test = chronological_split(windows, train_frac)
    if normalizer is None:
        train_n, test_n, normalizer = fit_apply_normalizer(train, test)
    else:
        train_n, test_n = normalizer.transform(train), normalizer.transform(test)
    return PreparedData(raw, train_n, test_n, normalizer, horizon)
