"""Performance-counter alignment and vectorization.

Heterogeneous counter time series are aligned onto a uniform grid,
then each counter column is summarized by three statistics (normalized
first-order gradient, mean, population std), producing a fixed 21-float
vector that supports similarity search across incidents.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AllSeriesEmpty, NonFiniteInput, ZeroVector

CANONICAL_COUNTERS: tuple[str, ...] = (
    "cpu_util",
    "mem_util",
    "net_rx_bytes",
    "net_tx_bytes",
    "blk_io_ops",
    "op_latency_avg",
    "socket_errors",
)

N_COUNTERS = len(CANONICAL_COUNTERS)
FEATURES_PER_COUNTER = 3  # grad, mean, std
VECTOR_DIM = N_COUNTERS * FEATURES_PER_COUNTER  # 21

_COUNTER_COLUMN = {name: j for j, name in enumerate(CANONICAL_COUNTERS)}


@dataclass(frozen=True)
class TelemetrySeries:
    """One counter's samples: strictly increasing timestamps, finite values.

    An empty series is legal and means the counter was not observed.
    """

    counter_id: str
    samples: tuple[tuple[float, float], ...]
    unit: str = ""

    def __post_init__(self):
        if self.counter_id not in _COUNTER_COLUMN:
            raise ValueError(
                f"unknown counter {self.counter_id!r}; expected one of {CANONICAL_COUNTERS}"
            )
        samples = tuple((float(t), float(v)) for t, v in self.samples)
        object.__setattr__(self, "samples", samples)
        prev = -math.inf
        for t, v in samples:
            if not (math.isfinite(t) and math.isfinite(v)):
                raise NonFiniteInput(
                    f"non-finite sample ({t}, {v}) in counter {self.counter_id!r}"
                )
            if t <= prev:
                raise ValueError(
                    f"timestamps not strictly increasing in counter {self.counter_id!r}"
                )
            prev = t

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class AlignedMatrix:
    """T uniform timestamps x 7 canonical counter columns.

    ``mask[t, c]`` is True where the cell was imputed: either the counter
    had no series at all (zero-filled) or the grid point falls outside the
    counter's observed span (nearest-value fill). Imputed cells always
    carry finite values, never NaN.
    """

    grid: np.ndarray
    values: np.ndarray
    mask: np.ndarray

    @property
    def n_rows(self) -> int:
        return len(self.grid)


@dataclass(frozen=True)
class TelemetryVector:
    """21 floats in counter-major blocks of (grad, mean, std)."""

    components: np.ndarray

    def __post_init__(self):
        comp = np.asarray(self.components, dtype=np.float64)
        if comp.shape != (VECTOR_DIM,):
            raise ValueError(f"expected {VECTOR_DIM} components, got {comp.shape}")
        if not np.isfinite(comp).all():
            raise NonFiniteInput("telemetry vector has non-finite components")
        object.__setattr__(self, "components", comp)


@dataclass(frozen=True)
class NormalizationStats:
    """Per-dimension mean and population std over a vector population.

    Dimensions whose std is exactly zero are recorded with scale 1 so
    z-scoring never divides by zero.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_vectors(cls, vectors: list[TelemetryVector] | list[np.ndarray]) -> "NormalizationStats":
        mat = np.asarray(
            [np.asarray(getattr(v, "components", v), dtype=np.float64) for v in vectors]
        )
        mean = mat.mean(axis=0)
        std = mat.std(axis=0)
        std = np.where(std == 0.0, 1.0, std)
        return cls(mean=mean, std=std)


def align(series_set: list[TelemetrySeries], grid_step: float) -> AlignedMatrix:
    """Interpolate a set of counter series onto one uniform grid.

    The grid starts at the earliest timestamp over non-empty series and
    covers through the latest one, spaced ``grid_step`` seconds apart.
    Interior points are linearly interpolated; points outside a counter's
    observed span take the nearest observed value and are masked; counters
    with no series are zero-filled and fully masked.

    Raises AllSeriesEmpty when no series has any sample, ValueError for a
    non-positive step or for two series claiming the same counter.
    """
    if grid_step <= 0:
        raise ValueError(f"grid_step must be positive, got {grid_step}")
    by_counter: dict[str, TelemetrySeries] = {}
    for s in series_set:
        if s.counter_id in by_counter:
            raise ValueError(f"duplicate series for counter {s.counter_id!r}")
        by_counter[s.counter_id] = s

    non_empty = [s for s in by_counter.values() if len(s) > 0]
    if not non_empty:
        raise AllSeriesEmpty("no telemetry series has any sample")

    start = min(s.samples[0][0] for s in non_empty)
    end = max(s.samples[-1][0] for s in non_empty)
    span = end - start
    # Cover [start, end]: last grid point may overshoot end by < grid_step.
    steps = max(0, math.ceil(span / grid_step - 1e-9))
    grid = start + grid_step * np.arange(steps + 1, dtype=np.float64)

    t_rows = len(grid)
    values = np.zeros((t_rows, N_COUNTERS), dtype=np.float64)
    mask = np.ones((t_rows, N_COUNTERS), dtype=bool)
    for name, col in _COUNTER_COLUMN.items():
        series = by_counter.get(name)
        if series is None or len(series) == 0:
            continue  # stays zero-filled, fully masked
        ts = np.asarray([t for t, _ in series.samples], dtype=np.float64)
        vs = np.asarray([v for _, v in series.samples], dtype=np.float64)
        values[:, col] = np.interp(grid, ts, vs)
        tol = 1e-9 * max(1.0, abs(ts[0]), abs(ts[-1]))
        mask[:, col] = (grid < ts[0] - tol) | (grid > ts[-1] + tol)
    return AlignedMatrix(grid=grid, values=values, mask=mask)


def vectorize(m: AlignedMatrix) -> TelemetryVector:
    """Summarize an aligned matrix as 21 floats.

    Per counter column: normalized first-order gradient (mean of
    successive differences divided by the column's range, zero when the
    column is constant or has a single row), arithmetic mean, and
    population standard deviation.
    """
    if m.n_rows < 1:
        raise ValueError("aligned matrix must have at least one row")
    out = np.empty(VECTOR_DIM, dtype=np.float64)
    for col in range(N_COUNTERS):
        column = m.values[:, col]
        mean = float(column.mean())
        std = float(column.std())
        value_range = float(column.max() - column.min())
        if m.n_rows == 1 or value_range == 0.0:
            grad = 0.0
        else:
            grad = float(np.diff(column).mean() / value_range)
        out[3 * col : 3 * col + 3] = (grad, mean, std)
    return TelemetryVector(components=out)


def telemetry_similarity(
    a: TelemetryVector, b: TelemetryVector, stats: NormalizationStats
) -> float:
    """Cosine similarity of the two z-score-normalized vectors, in [-1, 1].

    Raises ZeroVector when either vector normalizes to all zeros; callers
    ranking candidates should treat that pair as incomparable.
    """
    za = (np.asarray(a.components, dtype=np.float64) - stats.mean) / stats.std
    zb = (np.asarray(b.components, dtype=np.float64) - stats.mean) / stats.std
    na = float(np.linalg.norm(za))
    nb = float(np.linalg.norm(zb))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("z-scored telemetry vector is all zeros")
    sim = float(np.dot(za, zb) / (na * nb))
    return max(-1.0, min(1.0, sim))


# --- ingestion ----------------------------------------------------------

_CSV_HEADER = ("timestamp", "counter", "value")


def read_telemetry_csv(text: str) -> list[TelemetrySeries]:
    """Parse ``timestamp,counter,value`` CSV into one series per counter."""
    reader = csv.reader(io.StringIO(text))
    rows = [r for r in reader if r and any(cell.strip() for cell in r)]
    if not rows:
        return []
    header = tuple(c.strip().lower() for c in rows[0])
    if header != _CSV_HEADER:
        raise ValueError(f"expected header {_CSV_HEADER}, got {header}")
    return _series_from_rows(
        (row[0], row[1], row[2]) for row in rows[1:]
    )


def read_telemetry_json(payload: str | list) -> list[TelemetrySeries]:
    """Parse a JSON array of {timestamp, counter, value} objects."""
    data = json.loads(payload) if isinstance(payload, str) else payload
    if not isinstance(data, list):
        raise ValueError("telemetry JSON must be an array of objects")
    return _series_from_rows(
        (obj["timestamp"], obj["counter"], obj["value"]) for obj in data
    )


def _series_from_rows(rows) -> list[TelemetrySeries]:
    grouped: dict[str, list[tuple[float, float]]] = {}
    for ts, counter, value in rows:
        counter = str(counter).strip()
        grouped.setdefault(counter, []).append((float(ts), float(value)))
    out = []
    for counter in CANONICAL_COUNTERS:
        if counter in grouped:
            samples = sorted(grouped[counter])
            out.append(TelemetrySeries(counter_id=counter, samples=tuple(samples)))
    unknown = set(grouped) - set(CANONICAL_COUNTERS)
    if unknown:
        raise ValueError(f"unknown counters in telemetry input: {sorted(unknown)}")
    return out


def render_telemetry_csv(series_set: list[TelemetrySeries]) -> str:
    """Render series as the canonical CSV ingestion format."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_CSV_HEADER)
    for s in series_set:
        for t, v in s.samples:
            writer.writerow([repr(t), s.counter_id, repr(v)])
    return buf.getvalue()
