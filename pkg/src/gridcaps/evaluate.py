"""Scoring and aggregation: accuracy, relative improvement, per-cell
vehicle-distribution forecasts, and prediction-error ratios."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .capsnet import ModelConfig, ModelParams, batch_histories, predict_batch
from .ingest import FrameSet, TrajectoryFrame


@dataclass(frozen=True)
class PredictionRecord:
    vehicle_id: str
    time: int
    predicted: int
    actual: int


@dataclass
class AccuracyReport:
    percent: float  # unrounded; render with 2 decimals
    samples: int
    per_window: dict[int, "AccuracyReport"] | None = None


@dataclass
class DistributionForecast:
    """Vehicle counts per cell at one time unit; counts always sum to total."""

    time: int | None
    counts: np.ndarray  # int64, length = cell count
    vehicles: int


@dataclass
class ErrorRatioReport:
    """Per-cell |predicted - actual| / actual; cells with zero actual count
    are flagged undefined rather than reported as infinite."""

    ratios: np.ndarray  # float, NaN where undefined
    defined: np.ndarray  # bool mask


def accuracy(records: list[PredictionRecord]) -> AccuracyReport:
    """Percentage of records whose predicted cell equals the actual cell."""
    if not records:
        raise ValueError("accuracy needs at least one prediction record")
    hits = sum(1 for r in records if r.predicted == r.actual)
    return AccuracyReport(percent=100.0 * hits / len(records), samples=len(records))


def ima(p_model: float, p_baseline: float) -> float:
    """Relative accuracy improvement over a baseline, in percent."""
    if p_baseline <= 0.0:
        raise ValueError(f"baseline accuracy must be positive, got {p_baseline}")
    return 100.0 * (p_model - p_baseline) / p_baseline


def distribution(
    records: list[PredictionRecord],
    num_cells: int,
    time_k: int | None = None,
    which: str = "predicted",
) -> DistributionForecast:
    """Count vehicles per cell from the records of one time unit.

    With time_k omitted, all records must share one time stamp; pass the
    bucket start explicitly when aggregating wider windows.
    """
    if which not in ("predicted", "actual"):
        raise ValueError(f"which must be 'predicted' or 'actual', got {which!r}")
    if time_k is None and records:
        times = {r.time for r in records}
        if len(times) > 1:
            raise ValueError(f"records span {len(times)} time stamps; pass time_k explicitly")
        time_k = times.pop()
    counts = np.zeros(num_cells, dtype=np.int64)
    for r in records:
        counts[getattr(r, which)] += 1
    return DistributionForecast(time=time_k, counts=counts, vehicles=len(records))


def error_ratio(predicted: DistributionForecast, actual: DistributionForecast) -> ErrorRatioReport:
    if predicted.counts.shape != actual.counts.shape:
        raise ValueError(
            f"cell-count mismatch: {predicted.counts.shape} vs {actual.counts.shape}"
        )
    defined = actual.counts > 0
    ratios = np.full(actual.counts.shape, np.nan)
    ratios[defined] = (
        np.abs(predicted.counts[defined] - actual.counts[defined]) / actual.counts[defined]
    )
    return ErrorRatioReport(ratios=ratios, defined=defined)


def persistence_baseline(frame: TrajectoryFrame) -> int:
    """Trivial stay-put predictor: the most recently visited cell."""
    return frame.cells[-1]


def records_from_frameset(
    params: ModelParams, config: ModelConfig, frames: FrameSet, batch_size: int = 256
) -> list[PredictionRecord]:
    """Model predictions for every frame, paired with the true next cells."""
    cells, labels, times = frames.cells_array(), frames.labels_array(), frames.times_array()
    out = []
    for lo in range(0, len(frames), batch_size):
        hist = batch_histories(cells[lo : lo + batch_size], config.grid_count)
        preds = predict_batch(params, config, hist)
        for i, p in enumerate(preds):
            f = frames.frames[lo + i]
            out.append(PredictionRecord(f.vehicle_id, int(times[lo + i]), int(p), int(labels[lo + i])))
    return out


def persistence_records(frames: FrameSet) -> list[PredictionRecord]:
    return [
        PredictionRecord(f.vehicle_id, f.frame_time, persistence_baseline(f), f.label)
        for f in frames.frames
    ]


@dataclass
class RollingBucket:
    start: int
    predicted: DistributionForecast
    actual: DistributionForecast


def rolling_evaluation(
    frames: FrameSet,
    params: ModelParams,
    config: ModelConfig,
    bucket_seconds: int = 300,
) -> list[RollingBucket]:
    """Predicted vs actual per-cell vehicle counts in consecutive time buckets.

    Buckets tile [min frame time, max frame time]; empty buckets are emitted
    with zero vehicles.
    """
    if bucket_seconds < 1:
        raise ValueError(f"bucket_seconds must be >= 1, got {bucket_seconds}")
    if len(frames) == 0:
        return []
    g = frames.grid_spec.num_cells
    records = records_from_frameset(params, config, frames)
    t0 = min(r.time for r in records)
    t_max = max(r.time for r in records)
    n_buckets = (t_max - t0) // bucket_seconds + 1
    per_bucket: list[list[PredictionRecord]] = [[] for _ in range(n_buckets)]
    for r in records:
        per_bucket[(r.time - t0) // bucket_seconds].append(r)
    out = []
    for b, recs in enumerate(per_bucket):
        start = t0 + b * bucket_seconds
        out.append(
            RollingBucket(
                start=start,
                predicted=distribution(recs, g, time_k=start, which="predicted"),
                actual=distribution(recs, g, time_k=start, which="actual"),
            )
        )
    return out
