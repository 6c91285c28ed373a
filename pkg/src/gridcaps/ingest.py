"""Trajectory ingestion: dataset adapters, grid conversion, windowing, splits.

Adapters parse raw GPS datasets into RawTrajectory lists; those are mapped
onto a GridSpec, cut into fixed-length history windows with next-cell
labels, and split chronologically for training.

Supported inputs:
  * canonical CSV  -- vehicle_id,trip_id,timestamp,longitude,latitude
  * Porto-style CSV -- TRIP_ID, TIMESTAMP (epoch s), POLYLINE ([[lon,lat],...])
  * Grab-style CSV  -- ID, Mode, Device, Latitude, Longitude, Timestamp,
                       Accuracy Level, Bearing, Speed (case-insensitive)
  * synthetic walks -- seeded generator for desk-scale experiments
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .geogrid import BoundingBox, GeoPoint, GridSpec, build_grid_spec, grid_center, locate
from .tensorcore import load_checkpoint, save_checkpoint

PORTO_SAMPLE_SECONDS = 15


@dataclass
class RawTrajectory:
    vehicle_id: str
    trip_id: str
    points: list[tuple[int, GeoPoint]]  # (timestamp, fix), timestamps non-decreasing


@dataclass
class GridTrajectory:
    vehicle_id: str
    trip_id: str
    cells: list[tuple[int, int]]  # (timestamp, cell index)


@dataclass(frozen=True)
class TrajectoryFrame:
    """One supervised sample: a window of visited cells plus the next cell."""

    vehicle_id: str
    trip_id: str
    cells: tuple[int, ...]  # history, oldest first
    label: int
    frame_time: int  # timestamp of the label step

    def history(self, num_cells: int) -> np.ndarray:
        """Binary history matrix, one one-hot column per window step."""
        m = np.zeros((num_cells, len(self.cells)), dtype=np.float64)
        m[list(self.cells), range(len(self.cells))] = 1.0
        return m


@dataclass
class FrameSet:
    frames: list[TrajectoryFrame]
    grid_spec: GridSpec
    window: int

    def __len__(self) -> int:
        return len(self.frames)

    def cells_array(self) -> np.ndarray:
        return np.array([f.cells for f in self.frames], dtype=np.int64).reshape(
            len(self.frames), self.window
        )

    def labels_array(self) -> np.ndarray:
        return np.array([f.label for f in self.frames], dtype=np.int64)

    def times_array(self) -> np.ndarray:
        return np.array([f.frame_time for f in self.frames], dtype=np.int64)


@dataclass
class DatasetSplit:
    train: FrameSet
    validation: FrameSet
    test: FrameSet
    policy: str


@dataclass
class ParseStats:
    records_total: int = 0
    records_skipped: int = 0
    points_total: int = 0
    points_skipped: int = 0
    points_filtered: int = 0


@dataclass
class ParseResult:
    trajectories: list[RawTrajectory] = field(default_factory=list)
    stats: ParseStats = field(default_factory=ParseStats)


def _open_rows(source):
    if hasattr(source, "read"):
        return csv.DictReader(source), None
    f = open(source, "r", encoding="utf-8", newline="")
    return csv.DictReader(f), f


# ------------------------------------------------------------- canonical

CANONICAL_HEADER = ["vehicle_id", "trip_id", "timestamp", "longitude", "latitude"]


def parse_canonical(source) -> ParseResult:
    """Read the canonical one-point-per-row CSV; rows grouped by (vehicle, trip)."""
    reader, handle = _open_rows(source)
    try:
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != CANONICAL_HEADER:
            raise DataError(
                f"canonical CSV must have header {','.join(CANONICAL_HEADER)}, "
                f"got {reader.fieldnames}"
            )
        res = ParseResult()
        groups: dict[tuple[str, str], list[tuple[int, GeoPoint]]] = {}
        for row in reader:
            res.stats.points_total += 1
            try:
                key = (row["vehicle_id"], row["trip_id"])
                pt = (int(row["timestamp"]), GeoPoint(float(row["longitude"]), float(row["latitude"])))
            except (TypeError, ValueError, KeyError):
                res.stats.points_skipped += 1
                continue
            groups.setdefault(key, []).append(pt)
        for (veh, trip) in sorted(groups):
            pts = sorted(groups[(veh, trip)], key=lambda tp: tp[0])
            res.trajectories.append(RawTrajectory(veh, trip, pts))
        res.stats.records_total = len(groups)
        return res
    finally:
        if handle is not None:
            handle.close()


def write_canonical(trajectories: list[RawTrajectory], path):
    """Serialize trajectories as canonical CSV (sorted by vehicle, trip)."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CANONICAL_HEADER)
        for t in sorted(trajectories, key=lambda t: (t.vehicle_id, t.trip_id)):
            for ts, p in t.points:
                w.writerow([t.vehicle_id, t.trip_id, ts, repr(p.lon), repr(p.lat)])


# ----------------------------------------------------------------- porto

def _parse_polyline(text: str, stats: ParseStats) -> list[tuple[int, float, float]] | None:
    """Parse a bracketed [[lon,lat],...] list; bad pairs are dropped and counted.

    Returns (original_index, lon, lat) triples so synthetic timestamps keep
    their slot even when an earlier pair was dropped; None when the whole
    field is unusable.
    """
    out = []

    def keep(k, pair):
        try:
            lon, lat = float(pair[0]), float(pair[1])
            GeoPoint(lon, lat)  # range check
        except (TypeError, ValueError, IndexError):
            stats.points_skipped += 1
            return
        out.append((k, lon, lat))

    try:
        pairs = json.loads(text)
        if not isinstance(pairs, list):
            return None
        for k, pair in enumerate(pairs):
            stats.points_total += 1
            keep(k, pair if isinstance(pair, (list, tuple)) else [None])
        return out
    except json.JSONDecodeError:
        pass
    # tolerant fallback: split on pair boundaries and salvage parsable pairs
    body = text.strip()
    if not (body.startswith("[") and body.endswith("]")):
        return None
    body = body[1:-1].strip()
    if not body:
        return out
    for k, token in enumerate(body.split("],")):
        stats.points_total += 1
        keep(k, token.strip().strip("[]").split(","))
    return out


def parse_porto(source) -> ParseResult:
    """Parse Porto-style trip records; one trajectory per POLYLINE.

    Fixes get synthetic timestamps TIMESTAMP + 15 s * slot. Records whose
    polylines cannot be read at all are skipped and counted; empty polylines
    produce no trajectory.
    """
    reader, handle = _open_rows(source)
    try:
        cols = reader.fieldnames or []
        missing = [c for c in ("TRIP_ID", "TIMESTAMP", "POLYLINE") if c not in cols]
        if missing:
            raise DataError(f"Porto CSV is missing required field(s): {', '.join(missing)}")
        res = ParseResult()
        for row in reader:
            res.stats.records_total += 1
            try:
                start = int(float(row["TIMESTAMP"]))
            except (TypeError, ValueError):
                res.stats.records_skipped += 1
                continue
            triples = _parse_polyline(row["POLYLINE"] or "", res.stats)
            if triples is None:
                res.stats.records_skipped += 1
                continue
            if not triples:
                continue
            vehicle = row.get("TAXI_ID") or row["TRIP_ID"]
            points = [
                (start + PORTO_SAMPLE_SECONDS * k, GeoPoint(lon, lat)) for k, lon, lat in triples
            ]
            res.trajectories.append(RawTrajectory(str(vehicle), str(row["TRIP_ID"]), points))
        return res
    finally:
        if handle is not None:
            handle.close()


# ------------------------------------------------------------------ grab

GRAB_REQUIRED = ["id", "latitude", "longitude", "timestamp"]


def parse_grab(
    source,
    device: str | None = None,
    mode: str | None = None,
    max_accuracy: float | None = None,
    resample_period: int | None = None,
) -> ParseResult:
    """Parse Grab-style per-fix records, grouped by trajectory ID.

    Headers match case-insensitively. Optional filters keep only fixes from
    one device type / travel mode and below an accuracy radius. Because the
    source sampling interval is irregular, `resample_period` (seconds)
    optionally re-grids each trajectory onto a fixed period using the
    nearest preceding fix.
    """
    reader, handle = _open_rows(source)
    try:
        cols = {c.strip().lower(): c for c in (reader.fieldnames or [])}
        missing = [c for c in GRAB_REQUIRED if c not in cols]
        if missing:
            raise DataError(f"Grab CSV is missing required field(s): {', '.join(missing)}")

        def get(row, name):
            src = cols.get(name)
            return row.get(src) if src else None

        res = ParseResult()
        groups: dict[str, list[tuple[int, GeoPoint]]] = {}
        for row in reader:
            res.stats.points_total += 1
            if device is not None:
                dev = get(row, "device")
                if dev is None or dev.strip().lower() != device.strip().lower():
                    res.stats.points_filtered += 1
                    continue
            if mode is not None:
                m = get(row, "mode")
                if m is None or m.strip().lower() != mode.strip().lower():
                    res.stats.points_filtered += 1
                    continue
            if max_accuracy is not None:
                try:
                    if float(get(row, "accuracy level")) > max_accuracy:
                        res.stats.points_filtered += 1
                        continue
                except (TypeError, ValueError):
                    res.stats.points_filtered += 1
                    continue
            try:
                tid = get(row, "id")
                if not tid:
                    raise ValueError("empty ID")
                pt = (
                    int(float(get(row, "timestamp"))),
                    GeoPoint(float(get(row, "longitude")), float(get(row, "latitude"))),
                )
            except (TypeError, ValueError):
                res.stats.points_skipped += 1
                continue
            groups.setdefault(tid, []).append(pt)
        res.stats.records_total = len(groups)
        for tid in sorted(groups):
            pts = sorted(groups[tid], key=lambda tp: tp[0])
            if resample_period:
                pts = _resample_nearest_preceding(pts, resample_period)
            res.trajectories.append(RawTrajectory(tid, tid, pts))
        return res
    finally:
        if handle is not None:
            handle.close()


def _resample_nearest_preceding(points, period: int):
    """Re-grid onto t0, t0+period, ... using the latest fix at or before each tick."""
    t0, t_last = points[0][0], points[-1][0]
    out = []
    j = 0
    t = t0
    while t <= t_last:
        while j + 1 < len(points) and points[j + 1][0] <= t:
            j += 1
        out.append((t, points[j][1]))
        t += period
    return out


# -------------------------------------------------------- grid conversion

def to_grid_trajectory(
    raw: RawTrajectory, spec: GridSpec, oob_policy: str = "drop_point"
) -> GridTrajectory | None:
    """Map fixes to cell indices. Consecutive duplicates are kept: a parked
    vehicle still occupies its cell every step.

    oob_policy: "drop_point" removes out-of-bbox fixes; "drop_trip" discards
    the whole trajectory on the first out-of-bbox fix.
    """
    if oob_policy not in ("drop_point", "drop_trip"):
        raise ValueError(f"unknown oob_policy {oob_policy!r}")
    cells = []
    for ts, p in raw.points:
        if spec.bbox.contains(p):
            cells.append((ts, locate(spec, p)))
        elif oob_policy == "drop_trip":
            return None
    if not cells:
        return None
    return GridTrajectory(raw.vehicle_id, raw.trip_id, cells)


def segment(traj: GridTrajectory, window: int) -> list[TrajectoryFrame]:
    """Slide a stride-1 window over the cell sequence.

    Every position with `window` history steps before it yields one frame,
    so a trajectory of N cells yields max(0, N - window) frames.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    frames = []
    seq = traj.cells
    for k in range(window, len(seq)):
        frames.append(
            TrajectoryFrame(
                vehicle_id=traj.vehicle_id,
                trip_id=traj.trip_id,
                cells=tuple(c for _, c in seq[k - window : k]),
                label=seq[k][1],
                frame_time=seq[k][0],
            )
        )
    return frames


def build_frameset(trajectories, spec: GridSpec, window: int) -> FrameSet:
    """Segment every trajectory and assemble frames in deterministic order."""
    frames = []
    for traj in trajectories:
        frames.extend(segment(traj, window))
    frames.sort(key=lambda f: (f.vehicle_id, f.trip_id, f.frame_time))
    return FrameSet(frames=frames, grid_spec=spec, window=window)


# ------------------------------------------------------------------ split

def split(frames: FrameSet, policy: dict, val_fraction: float) -> DatasetSplit:
    """Partition frames chronologically into train/validation/test.

    policy: {"kind": "by_fraction", "fraction": f} takes the chronologically
    first floor(f*I) frames as the training pool; {"kind": "by_time",
    "train_end": t1, "test_start": t2} pools frames before t1 and tests from
    t2 on. The chronologically last floor(val_fraction*pool) of the pool
    becomes validation.
    """
    if not (0.0 < val_fraction < 1.0):
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    ordered = sorted(frames.frames, key=lambda f: (f.frame_time, f.vehicle_id, f.trip_id))
    kind = policy.get("kind")
    if kind == "by_fraction":
        f = policy["fraction"]
        if not (0.0 < f < 1.0):
            raise ValueError(f"fraction must be in (0, 1), got {f}")
        cut = int(len(ordered) * f)
        pool, test = ordered[:cut], ordered[cut:]
        desc = f"by_fraction({f}, val={val_fraction})"
    elif kind == "by_time":
        t1, t2 = policy["train_end"], policy["test_start"]
        if t1 > t2:
            raise ValueError(f"train_end {t1} must not exceed test_start {t2}")
        pool = [fr for fr in ordered if fr.frame_time < t1]
        test = [fr for fr in ordered if fr.frame_time >= t2]
        desc = f"by_time(train_end={t1}, test_start={t2}, val={val_fraction})"
    else:
        raise ValueError(f"unknown split policy {kind!r}")
    n_val = int(len(pool) * val_fraction)
    train, val = pool[: len(pool) - n_val], pool[len(pool) - n_val :]
    for name, part in (("train", train), ("validation", val), ("test", test)):
        if not part:
            raise DataError(f"split produced an empty {name} partition ({desc})")
    mk = lambda part: FrameSet(frames=part, grid_spec=frames.grid_spec, window=frames.window)
    return DatasetSplit(train=mk(train), validation=mk(val), test=mk(test), policy=desc)


# -------------------------------------------------------------- synthetic

def synth_generate(
    spec: GridSpec,
    n_vehicles: int,
    steps: int,
    locality_bias: float,
    seed: int,
    interval: int = 15,
    start_time: int = 0,
    mean_dwell: float = 8.0,
) -> list[RawTrajectory]:
    """Seeded random walk emitting grid-center fixes every `interval` seconds.

    At every step a vehicle moves to a 4-neighbour cell with probability
    `locality_bias`, otherwise it stays put. Moves and stays come in runs: a
    two-state go/dwell chain (stationary go probability = locality_bias,
    mean dwell length `mean_dwell`) with a persistent heading that reverses
    at the border, so the next cell is mostly determined by the recent
    history, as real road traffic is. Headings are redrawn when a dwell ends.
    """
    if not (0.0 <= locality_bias <= 1.0):
        raise ValueError(f"locality_bias must be in [0, 1], got {locality_bias}")
    if mean_dwell < 1.0:
        raise ValueError(f"mean_dwell must be >= 1, got {mean_dwell}")
    lb = locality_bias
    if lb == 0.0:
        q_go_to_dwell, q_dwell_to_go = 1.0, 0.0
    elif lb == 1.0:
        q_go_to_dwell, q_dwell_to_go = 0.0, 1.0
    else:
        q_dwell_to_go = 1.0 / mean_dwell
        q_go_to_dwell = q_dwell_to_go * (1.0 - lb) / lb
        if q_go_to_dwell > 1.0:  # very stay-heavy: stretch dwells instead
            q_go_to_dwell = 1.0
            q_dwell_to_go = lb / (1.0 - lb)

    deltas = ((1, 0), (-1, 0), (0, 1), (0, -1))  # row/col steps: N, S, E, W
    rng = np.random.default_rng(seed)
    out = []
    for v in range(n_vehicles):
        row = int(rng.integers(0, spec.n_lat))
        col = int(rng.integers(0, spec.n_lon))
        heading = int(rng.integers(0, 4))
        going = bool(rng.random() < lb)
        cells = [row * spec.n_lon + col]
        for _ in range(steps - 1):
            u = rng.random()
            if going:
                if u < q_go_to_dwell:
                    going = False
            else:
                if u < q_dwell_to_go:
                    going = True
                    heading = int(rng.integers(0, 4))
            if going:
                dr, dc = deltas[heading]
                if not (0 <= row + dr < spec.n_lat and 0 <= col + dc < spec.n_lon):
                    heading ^= 1  # bounce: N<->S, E<->W
                    dr, dc = deltas[heading]
                if 0 <= row + dr < spec.n_lat and 0 <= col + dc < spec.n_lon:
                    row, col = row + dr, col + dc
            cells.append(row * spec.n_lon + col)
        points = [
            (start_time + interval * k, grid_center(spec, c)) for k, c in enumerate(cells)
        ]
        out.append(RawTrajectory(f"veh{v:04d}", "t0", points))
    return out


# ------------------------------------------------------------ persistence

FRAMESET_FORMAT = "gridcaps-frameset-v1"


def save_frameset(fs: FrameSet, path):
    """Persist a FrameSet as a binary container plus a JSON sidecar."""
    path = Path(path)
    vehicles = sorted({f.vehicle_id for f in fs.frames})
    trips = sorted({f.trip_id for f in fs.frames})
    vidx = {v: i for i, v in enumerate(vehicles)}
    tidx = {t: i for i, t in enumerate(trips)}
    arrays = {
        "cells": fs.cells_array(),
        "labels": fs.labels_array(),
        "times": fs.times_array(),
        "vehicle_idx": np.array([vidx[f.vehicle_id] for f in fs.frames], dtype=np.int64),
        "trip_idx": np.array([tidx[f.trip_id] for f in fs.frames], dtype=np.int64),
    }
    meta = {
        "format": FRAMESET_FORMAT,
        "grid": fs.grid_spec.to_dict(),
        "window": fs.window,
        "frames": len(fs.frames),
        "vehicles": vehicles,
        "trips": trips,
    }
    save_checkpoint(path, arrays, meta)
    sidecar = {
        "format": FRAMESET_FORMAT,
        "data_file": path.name,
        "grid": fs.grid_spec.to_dict(),
        "num_cells": fs.grid_spec.num_cells,
        "window": fs.window,
        "frames": len(fs.frames),
    }
    with open(f"{path}.json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


def load_frameset(path) -> FrameSet:
    arrays, meta = load_checkpoint(path)
    if meta.get("format") != FRAMESET_FORMAT:
        raise DataError(f"{path}: not a persisted frame set (format={meta.get('format')!r})")
    spec = GridSpec.from_dict(meta["grid"])
    vehicles, trips = meta["vehicles"], meta["trips"]
    frames = [
        TrajectoryFrame(
            vehicle_id=vehicles[arrays["vehicle_idx"][i]],
            trip_id=trips[arrays["trip_idx"][i]],
            cells=tuple(int(c) for c in arrays["cells"][i]),
            label=int(arrays["labels"][i]),
            frame_time=int(arrays["times"][i]),
        )
        for i in range(int(meta["frames"]))
    ]
    return FrameSet(frames=frames, grid_spec=spec, window=int(meta["window"]))


def infer_bbox(trajectories: list[RawTrajectory]) -> BoundingBox:
    """Bounding box from data extrema (used by the auto-grid mode)."""
    lons, lats = [], []
    for t in trajectories:
        for _, p in t.points:
            lons.append(p.lon)
            lats.append(p.lat)
    if not lons:
        raise DataError("cannot infer a bounding box from zero points")
    return BoundingBox(min(lons), max(lons), min(lats), max(lats))
