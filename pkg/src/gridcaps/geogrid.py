"""Grid-map geometry: maps GPS fixes onto a rectangular grid of equal cells.

All indices are 0-based and row-major with the origin at the south-west
corner (minimum longitude, minimum latitude). Human-facing reports add 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class GridError(ValueError):
    """Invalid grid geometry or an index/point outside the grid."""


@dataclass(frozen=True)
class GeoPoint:
    """A GPS fix: longitude (x) and latitude (y), in degrees."""

    lon: float
    lat: float

    def __post_init__(self):
        if not (-180.0 <= self.lon <= 180.0):
            raise GridError(f"longitude {self.lon} outside [-180, 180]")
        if not (-90.0 <= self.lat <= 90.0):
            raise GridError(f"latitude {self.lat} outside [-90, 90]")


@dataclass(frozen=True)
class BoundingBox:
    lo_min: float
    lo_max: float
    la_min: float
    la_max: float

    def __post_init__(self):
        if not (self.lo_min < self.lo_max):
            raise GridError(f"degenerate longitude extent [{self.lo_min}, {self.lo_max}]")
        if not (self.la_min < self.la_max):
            raise GridError(f"degenerate latitude extent [{self.la_min}, {self.la_max}]")

    def contains(self, p: GeoPoint) -> bool:
        return (self.lo_min <= p.lon <= self.lo_max) and (self.la_min <= p.lat <= self.la_max)


@dataclass(frozen=True)
class GridSpec:
    """A bounding box split into n_lon x n_lat equal rectangular cells."""

    bbox: BoundingBox
    n_lon: int
    n_lat: int

    def __post_init__(self):
        if self.n_lon < 1 or self.n_lat < 1:
            raise GridError(f"grid counts must be >= 1, got {self.n_lon} x {self.n_lat}")

    @property
    def cell_width(self) -> float:
        return (self.bbox.lo_max - self.bbox.lo_min) / self.n_lon

    @property
    def cell_height(self) -> float:
        return (self.bbox.la_max - self.bbox.la_min) / self.n_lat

    @property
    def num_cells(self) -> int:
        return self.n_lon * self.n_lat

    def to_dict(self) -> dict:
        b = self.bbox
        return {
            "lo_min": b.lo_min,
            "lo_max": b.lo_max,
            "la_min": b.la_min,
            "la_max": b.la_max,
            "n_lon": self.n_lon,
            "n_lat": self.n_lat,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        bbox = BoundingBox(d["lo_min"], d["lo_max"], d["la_min"], d["la_max"])
        return cls(bbox=bbox, n_lon=int(d["n_lon"]), n_lat=int(d["n_lat"]))


def build_grid_spec(bbox: BoundingBox, n_lon: int, n_lat: int) -> GridSpec:
    """Validate and assemble a GridSpec over `bbox` with n_lon x n_lat cells."""
    return GridSpec(bbox=bbox, n_lon=int(n_lon), n_lat=int(n_lat))


def locate(spec: GridSpec, p: GeoPoint) -> int:
    """Map an in-bbox point to its 0-based row-major cell index.

    Points exactly on the max boundary clamp into the last row/column so the
    closed bbox is fully covered. Points outside the bbox raise GridError.
    """
    if not spec.bbox.contains(p):
        raise GridError(
            f"point ({p.lon}, {p.lat}) outside bbox "
            f"[{spec.bbox.lo_min}, {spec.bbox.lo_max}] x [{spec.bbox.la_min}, {spec.bbox.la_max}]"
        )
    col = min(int(math.floor((p.lon - spec.bbox.lo_min) / spec.cell_width)), spec.n_lon - 1)
    row = min(int(math.floor((p.lat - spec.bbox.la_min) / spec.cell_height)), spec.n_lat - 1)
    return row * spec.n_lon + col


def one_hot(spec: GridSpec, idx: int) -> np.ndarray:
    """Binary vector of length num_cells with a single 1 at `idx`."""
    if not (0 <= idx < spec.num_cells):
        raise GridError(f"cell index {idx} outside [0, {spec.num_cells})")
    v = np.zeros(spec.num_cells, dtype=np.float64)
    v[idx] = 1.0
    return v


def grid_center(spec: GridSpec, idx: int) -> GeoPoint:
    """Geometric center of cell `idx`."""
    if not (0 <= idx < spec.num_cells):
        raise GridError(f"cell index {idx} outside [0, {spec.num_cells})")
    row, col = divmod(idx, spec.n_lon)
    lon = spec.bbox.lo_min + (col + 0.5) * spec.cell_width
    lat = spec.bbox.la_min + (row + 0.5) * spec.cell_height
    return GeoPoint(lon=lon, lat=lat)
