"""Benchmark CSV ingestion, splitting, standardization and windowing.

The CSV layout is the one shared by the ETT, Weather and Electricity
benchmarks: a ``date`` column followed by numeric channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import pandas as pd

from .errors import (ConfigError, DegenerateChannelError, IngestionError, OrderingError,
                     ParameterError)
from .rng import make_rng

SPLITS = ("train", "val", "test")

# Table-1 attributes: channels, sampling interval, points.
DATASETS = {
    "ETTh1": dict(channels=7, freq="1h", points=17420, split="ett-hour"),
    "ETTh2": dict(channels=7, freq="1h", points=17420, split="ett-hour"),
    "ETTm1": dict(channels=7, freq="15min", points=69680, split="ett-minute"),
    "ETTm2": dict(channels=7, freq="15min", points=69680, split="ett-minute"),
    "Weather": dict(channels=21, freq="10min", points=52696, split="ratio"),
    "Electricity": dict(channels=321, freq="1h", points=26304, split="ratio"),
}


@dataclass(frozen=True)
class RawSeries:
    timestamps: np.ndarray
    values: np.ndarray
    channel_names: tuple[str, ...]
    frequency: str | None = None

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def C(self) -> int:
        return self.values.shape[1]


def load_csv(path, date_column: str | None = None, frequency: str | None = None) -> RawSeries:
    """Read a benchmark CSV into a :class:`RawSeries`.

    The first column (or ``date_column``) must parse as timestamps and be
    strictly increasing; every other cell must be numeric. Missing cells are
    rejected rather than imputed.
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"{path}: no such file")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if frame.shape[1] < 2:
        raise IngestionError(f"{path}: need a timestamp column and at least one channel")
    date_column = date_column or frame.columns[0]
    if date_column not in frame.columns:
        raise IngestionError(f"{path}: timestamp column {date_column!r} not found")

    raw_dates = frame[date_column]
    stamps = pd.to_datetime(raw_dates, errors="coerce")
    bad = np.flatnonzero(stamps.isna().to_numpy())
    if bad.size:
        r = int(bad[0])
        raise IngestionError(f"{path}: row {r + 2}, column {date_column!r}: "
                             f"unparsable timestamp {raw_dates.iloc[r]!r}")
    stamps = stamps.to_numpy()
    if stamps.size > 1:
        steps = np.diff(stamps)
        back = np.flatnonzero(steps <= np.timedelta64(0))
        if back.size:
            r = int(back[0]) + 1
            raise OrderingError(f"{path}: row {r + 2}: timestamp {raw_dates.iloc[r]!r} "
                                f"does not follow {raw_dates.iloc[r - 1]!r}")

    channels = [c for c in frame.columns if c != date_column]
    values = np.empty((len(frame), len(channels)), dtype=np.float64)
    for j, col in enumerate(channels):
        parsed = pd.to_numeric(frame[col].str.strip(), errors="coerce").to_numpy(dtype=np.float64)
        bad = np.flatnonzero(~np.isfinite(parsed))
        if bad.size:
            r = int(bad[0])
            raise IngestionError(f"{path}: row {r + 2}, column {col!r}: "
                                 f"unparsable value {frame[col].iloc[r]!r}")
        values[:, j] = parsed
    return RawSeries(stamps, values, tuple(channels), frequency)


@dataclass(frozen=True)
class SplitRanges:
    """Half-open ``[start, stop)`` target ranges for train/val/test."""

    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]

    def __getitem__(self, name: str) -> tuple[int, int]:
        return getattr(self, name)

    def lengths(self) -> tuple[int, int, int]:
        return tuple(b - a for a, b in (self.train, self.val, self.test))

    def window_range(self, name: str, lookback: int) -> tuple[int, int]:
        """Range to window for ``name``: val/test reach back ``lookback`` points
        into the preceding split so their first target starts at the border."""
        start, stop = self[name]
        if name != "train":
            start = max(0, start - lookback)
        return start, stop


def split(T: int, ratios=(0.7, 0.1, 0.2), min_points: int = 1) -> SplitRanges:
    """Contiguous train/val/test ranges by ratio (test and train floored)."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_train = int(T * ratios[0])
    n_test = int(T * ratios[2])
    n_val = T - n_train - n_test
    return _check_split(SplitRanges((0, n_train), (n_train, n_train + n_val),
                                    (n_train + n_val, T)), T, min_points)


def ett_split(T: int, minute: bool = False, min_points: int = 1) -> SplitRanges:
    """The 12/4/4-month ETT borders (hourly: 8640/2880/2880 points)."""
    month = 30 * 24 * (4 if minute else 1)
    a, b, c = 12 * month, 16 * month, 20 * month
    if T < c:
        raise ConfigError(f"ETT borders need {c} points, series has {T}")
    return _check_split(SplitRanges((0, a), (a, b), (b, c)), T, min_points)


def _check_split(r: SplitRanges, T: int, min_points: int) -> SplitRanges:
    for name, n in zip(SPLITS, r.lengths()):
        if n < max(1, min_points):
            raise ConfigError(f"{name} split holds {n} points, needs at least {max(1, min_points)}")
    return r


def split_for(dataset_id: str | None, T: int, convention: str = "auto", ratios=(0.7, 0.1, 0.2),
              min_points: int = 1) -> SplitRanges:
    if convention == "auto":
        convention = DATASETS.get(dataset_id or "", {}).get("split", "ratio")
    if convention == "ratio":
        return split(T, ratios, min_points)
    if convention in ("ett-hour", "ett-minute"):
        return ett_split(T, convention == "ett-minute", min_points)
    raise ConfigError(f"unknown split convention {convention!r}")


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


def fit_scaler(values: np.ndarray, train_range: tuple[int, int]) -> Scaler:
    a, b = train_range
    if b <= a:
        raise ConfigError("cannot fit a scaler on an empty training range")
    train = values[a:b]
    mu = train.mean(axis=0)
    sigma = train.std(axis=0)
    flat = np.flatnonzero(~(sigma > 0))
    if flat.size:
        raise DegenerateChannelError(f"channel {int(flat[0])} has zero variance on the training range")
    return Scaler(mu, sigma)


def fit_apply_scaler(values: np.ndarray, train_range: tuple[int, int]):
    """Standardize every channel with training-range statistics."""
    scaler = fit_scaler(values, train_range)
    return scaler.transform(values), scaler


@dataclass(frozen=True)
class WindowedDataset:
    inputs: np.ndarray   # N x L x C
    targets: np.ndarray  # N x H x C
    split: str
    offsets: np.ndarray  # source index of each input's first point

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def lookback(self) -> int:
        return self.inputs.shape[1]

    @property
    def horizon(self) -> int:
        return self.targets.shape[1]

    @property
    def channels(self) -> int:
        return self.inputs.shape[2]

    def subset(self, indices) -> "WindowedDataset":
        idx = np.asarray(indices)
        return WindowedDataset(self.inputs[idx], self.targets[idx], self.split, self.offsets[idx])


def make_windows(values: np.ndarray, window_range: tuple[int, int], lookback: int, horizon: int,
                 stride: int = 1, split: str = "train") -> WindowedDataset:
    """All ``(lookback, horizon)`` pairs inside ``window_range``.

    Inputs and targets are read-only views into ``values``.
    """
    if lookback <= 0 or horizon <= 0:
        raise ParameterError(f"lookback and horizon must be positive, got L={lookback}, H={horizon}")
    if stride <= 0:
        raise ParameterError(f"stride must be positive, got {stride}")
    start, stop = window_range
    seg = values[start:stop]
    if seg.ndim == 1:
        seg = seg[:, None]
    span = lookback + horizon
    if seg.shape[0] < span:
        raise ConfigError(f"{split} range holds {seg.shape[0]} points, needs L+H={span}")
    views = np.lib.stride_tricks.sliding_window_view(seg, span, axis=0)[::stride]
    views = np.moveaxis(views, -1, 1)  # N x span x C
    offsets = start + np.arange(0, seg.shape[0] - span + 1, stride)
    return WindowedDataset(views[:, :lookback], views[:, lookback:], split, offsets)


def batch_iter(dataset: WindowedDataset, batch_size: int, shuffle: bool = False, seed: int = 0,
               epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(inputs, targets)`` batches covering every sample once.

    The shuffled order depends only on ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise ParameterError(f"batch_size must be at least 1, got {batch_size}")
    n = len(dataset)
    order = make_rng(seed, "shuffle", epoch).permutation(n) if shuffle else np.arange(n)
    for i in range(0, n, batch_size):
        idx = order[i:i + batch_size]
        yield dataset.inputs[idx], dataset.targets[idx]


@dataclass
class PreparedData:
    """Standardized series with its split and scaler, ready for windowing."""

    values: np.ndarray
    ranges: SplitRanges
    scaler: Scaler
    dataset_id: str | None = None
    channel_names: tuple[str, ...] = ()
    windows: dict = field(default_factory=dict)

    def windowed(self, name: str, lookback: int, horizon: int) -> WindowedDataset:
        key = (name, lookback, horizon)
        if key not in self.windows:
            self.windows[key] = make_windows(self.values, self.ranges.window_range(name, lookback),
                                             lookback, horizon, split=name)
        return self.windows[key]

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256(np.ascontiguousarray(self.values).tobytes())
        h.update(repr(self.ranges).encode())
        return h.hexdigest()[:16]


def prepare(series: RawSeries | np.ndarray, dataset_id: str | None = None, convention: str = "auto",
            ratios=(0.7, 0.1, 0.2), min_points: int = 1) -> PreparedData:
    values = series.values if isinstance(series, RawSeries) else np.asarray(series, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    ranges = split_for(dataset_id, values.shape[0], convention, ratios, min_points)
    scaled, scaler = fit_apply_scaler(values, ranges.train)
    names = series.channel_names if isinstance(series, RawSeries) else tuple(
        f"ch{i}" for i in range(values.shape[1]))
    return PreparedData(scaled, ranges, scaler, dataset_id, names)
