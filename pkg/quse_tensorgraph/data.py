"""Series ingestion, chronological splitting, windowing and synthetic data."""
import csv
import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import DataError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (0.7, 0.1, 0.2)
SYNTH_GAMMA = 0.3
SYNTH_PERIOD = 288  # one day of 5-minute steps
SYNTH_RADIUS = 0.5


class Split(enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True)
class SeriesTable:
    values: np.ndarray  # steps x N x D
    stations: Tuple[str, ...]
    timestamps: Optional[pd.DatetimeIndex] = None
    units: str = ""
    imputed: int = 0

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValidationError(
                f"series values must be steps x nodes x features, got shape {self.values.shape}"
            )
        if len(self.stations) != self.values.shape[1]:
            raise ValidationError(
                f"{len(self.stations)} station ids for {self.values.shape[1]} nodes"
            )
        if self.timestamps is not None and not self.timestamps.is_monotonic_increasing:
            raise DataError("timestamps must be strictly increasing")
        if self.timestamps is not None and self.timestamps.has_duplicates:
            raise DataError("timestamps must be strictly increasing")

    @property
    def num_steps(self) -> int:
        return self.values.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray  # N x D
    std: np.ndarray  # N x D

    @classmethod
    def fit(cls, segment: np.ndarray) -> "NormalizationStats":
        mean = segment.mean(axis=0)
        std = segment.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(mean=mean, std=std)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def invert(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


@dataclass(frozen=True)
class WindowedDataset:
    x: np.ndarray  # b x l x N x D, normalized
    y: np.ndarray  # b x T' x N x D, normalized
    split: Split
    stats: NormalizationStats
    start: int = 0  # index of the segment's first step in the full series
    segment: np.ndarray = field(default=None, repr=False)  # normalized steps of the split

    @property
    def empty(self) -> bool:
        return self.x.shape[0] == 0

    @property
    def window(self) -> int:
        return self.x.shape[1]

    @property
    def horizon(self) -> int:
        return self.y.shape[1]

    def target_steps(self) -> np.ndarray:
        """Global step index of every target, shape b x T'."""
        first = self.start + self.window + np.arange(self.x.shape[0])
        return first[:, None] + np.arange(self.horizon)[None, :]


def _check_rectangular(path: Union[str, Path]) -> None:
    # the parser pads short rows silently, so widths are checked up front
    try:
        with open(path, newline="") as handle:
            rows = [(number, len(row)) for number, row in enumerate(csv.reader(handle), 1) if row]
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: file is empty")
    width = rows[0][1]
    for number, size in rows:
        if size != width:
            raise DataError(f"{path}: ragged row {number} has {size} cells, expected {width}")


def load_csv(
    path: Union[str, Path],
    timestamp_column: Optional[str] = None,
    units: str = "",
) -> SeriesTable:
    """Read a station-per-column CSV, one row per time step.

    Empty cells are carried forward from the last observation and fall back
    to zero when nothing precedes them.
    """
    _check_rectangular(path)
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"{path}: {exc}") from exc

    timestamps = None
    if timestamp_column is not None:
        if timestamp_column not in raw.columns:
            raise DataError(f"{path}: no timestamp column {timestamp_column!r}")
        try:
            timestamps = pd.DatetimeIndex(pd.to_datetime(raw.pop(timestamp_column)))
        except (ValueError, TypeError) as exc:
            raise DataError(f"{path}: unreadable timestamps ({exc})") from exc

    stripped = raw.apply(lambda col: col.str.strip())
    numeric = stripped.apply(pd.to_numeric, errors="coerce")
    bad = (numeric.isna() & (stripped != "")) | np.isinf(numeric)
    if bad.any().any():
        row, col = np.argwhere(bad.to_numpy())[0]
        raise DataError(
            f"{path}: cell {raw.iat[row, col]!r} at row {row + 2}, "
            f"column {raw.columns[col]!r} is not a finite number"
        )
    missing = int(numeric.isna().to_numpy().sum())
    if missing:
        logger.warning("Imputed %d missing cells in %s", missing, path)
    filled = numeric.ffill().fillna(0.0)
    values = filled.to_numpy(dtype=np.float64)[:, :, None]
    return SeriesTable(
        values=np.ascontiguousarray(values),
        stations=tuple(str(c) for c in raw.columns),
        timestamps=timestamps,
        units=units,
        imputed=missing,
    )


def _split_lengths(steps: int, fractions: Sequence[float]) -> Tuple[int, int, int]:
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValidationError(f"split fractions must be three non-negative numbers, got {fractions}")
    if not np.isclose(sum(fractions), 1.0):
        raise ValidationError(f"split fractions must sum to 1, got {sum(fractions)}")
    train = int(round(steps * fractions[0]))
    val = int(round(steps * fractions[1]))
    if fractions[2] == 0:
        val = steps - train
    return train, val, steps - train - val


def _windows(segment: np.ndarray, window: int, horizon: int) -> Tuple[np.ndarray, np.ndarray]:
    count = max(segment.shape[0] - window - horizon + 1, 0)
    idx = np.arange(count)[:, None]
    x = segment[idx + np.arange(window)[None, :]]
    y = segment[idx + window + np.arange(horizon)[None, :]]
    shape = segment.shape[1:]
    return x.reshape((count, window) + shape), y.reshape((count, horizon) + shape)


def window_split(
    series: SeriesTable,
    window: int,
    horizon: int,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
) -> Tuple[WindowedDataset, WindowedDataset, WindowedDataset]:
    """Chronological train/val/test split, then stride-1 windows per split.

    Normalization statistics come from the train segment only. Windows never
    straddle a split boundary.
    """
    if window < 1 or horizon < 1:
        raise ValidationError(f"window and horizon must be positive, got {window}, {horizon}")
    steps = series.num_steps
    lengths = _split_lengths(steps, fractions)
    needed = window + horizon
    if lengths[0] < needed:
        minimum = int(np.ceil(needed / fractions[0])) if fractions[0] > 0 else needed
        raise DataError(
            f"series of {steps} steps is too short for a training window; "
            f"need at least {minimum} steps for window {window} and horizon {horizon}"
        )

    bounds = np.cumsum((0,) + lengths)
    stats = NormalizationStats.fit(series.values[: lengths[0]])
    normalized = stats.apply(series.values)
    datasets = []
    for split, lo, hi in zip(Split, bounds[:-1], bounds[1:]):
        segment = np.ascontiguousarray(normalized[lo:hi])
        x, y = _windows(segment, window, horizon)
        dataset = WindowedDataset(x=x, y=y, split=split, stats=stats, start=int(lo), segment=segment)
        if dataset.empty:
            logger.warning("The %s split is empty", split.value)
        datasets.append(dataset)
    return tuple(datasets)


def concat_windows(dataset: WindowedDataset) -> np.ndarray:
    """Rebuild the normalized split segment from its stride-1 windows."""
    if dataset.empty:
        return np.empty((0,) + dataset.x.shape[2:])
    head = dataset.x[:, 0]
    tail = np.concatenate([dataset.x[-1, 1:], dataset.y[-1]], axis=0)
    return np.concatenate([head, tail], axis=0)


def random_geometric_graph(n_nodes: int, rng: np.random.Generator, radius: float = SYNTH_RADIUS) -> np.ndarray:
    points = rng.uniform(size=(n_nodes, 2))
    dist = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=-1)
    adjacency = (dist < radius).astype(np.float64)
    np.fill_diagonal(adjacency, 0.0)
    # link every node to its nearest neighbour so no row is empty
    masked = dist + np.diag(np.full(n_nodes, np.inf))
    nearest = masked.argmin(axis=1)
    adjacency[np.arange(n_nodes), nearest] = 1.0
    adjacency[nearest, np.arange(n_nodes)] = 1.0
    return adjacency


def synth_diffusion(
    n_nodes: int,
    steps: int,
    seed: int = 0,
    noise: float = 0.05,
    amplitude: float = 1.0,
    period: int = SYNTH_PERIOD,
    gamma: float = SYNTH_GAMMA,
    initial: Optional[np.ndarray] = None,
) -> Tuple[SeriesTable, np.ndarray]:
    """Diffusion on a random geometric graph plus a daily sinusoid.

    The latent state follows ``z(t+1) = (1 - gamma) z(t) + gamma P z(t) + noise``
    with ``P`` the row-normalized adjacency; the observed series is
    ``z(t)`` plus a per-node phase-shifted sinusoid of the given amplitude.
    Returns the table and the generator adjacency.
    """
    if n_nodes < 2:
        raise ValidationError(f"synthetic data needs at least 2 nodes, got {n_nodes}")
    if steps < 1:
        raise ValidationError(f"synthetic data needs at least 1 step, got {steps}")
    rng = np.random.default_rng(seed)
    adjacency = random_geometric_graph(n_nodes, rng)
    transition = adjacency / adjacency.sum(axis=1, keepdims=True)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_nodes)
    state = rng.normal(size=n_nodes) if initial is None else np.array(initial, dtype=np.float64)
    if state.shape != (n_nodes,):
        raise ValidationError(f"initial state must have {n_nodes} entries, got {state.shape}")
    shocks = rng.normal(scale=noise, size=(steps, n_nodes)) if noise > 0 else np.zeros((steps, n_nodes))

    latent = np.empty((steps, n_nodes))
    for t in range(steps):
        latent[t] = state
        state = (1.0 - gamma) * state + gamma * (transition @ state) + shocks[t]
    clock = np.arange(steps)[:, None]
    values = latent + amplitude * np.sin(2.0 * np.pi * clock / period + phases[None, :])
    table = SeriesTable(
        values=np.ascontiguousarray(values[:, :, None]),
        stations=tuple(f"s{i}" for i in range(n_nodes)),
        units="synthetic",
    )
    return table, adjacency
