"""Candidate pruning: EPE-scaled radius filter plus heading window.

Given a GPS fix with its estimated position error and the camera heading,
the reference database shrinks to the records within th * EPE meters of the
fix whose stored heading lies within the view window of the query heading,
both predicates strict, matching the filter's inequalities exactly. A grid
spatial index accelerates the radius stage; a linear scan over the manifest
always produces the identical set, and tests hold the two equivalent.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import NamedTuple

from .dataset import ImageRecord, Manifest
from .geodesy import (
    EarthModel,
    GeoPoint,
    SPHERE,
    great_circle_distance,
    heading_difference,
    meters_per_degree,
)
from .gnss import GpsFix

DEFAULT_CELL_M = 48.0


@dataclass(frozen=True)
class RetrievalConfig:
    """Pruning thresholds.

    th scales the EPE into the search radius (1.2 leaves headroom for the
    fix error estimate itself being a ~98% bound); view_window_k is the
    half-width of the accepted heading window in degrees.
    """

    th: float = 1.2
    view_window_k: float = 15.0
    max_candidates: int = 100

    def __post_init__(self) -> None:
        if not (self.th > 0):
            raise ValueError(f"th must be > 0, got {self.th!r}")
        if not (0 < self.view_window_k <= 180):
            raise ValueError(
                f"view_window_k must be in (0, 180], got {self.view_window_k!r}"
            )
        if self.max_candidates < 1:
            raise ValueError(f"max_candidates must be >= 1, got {self.max_candidates!r}")


class CandidateItem(NamedTuple):
    record: ImageRecord
    distance_m: float
    heading_delta_deg: float


@dataclass(frozen=True)
class CandidateSet:
    """Records surviving both filters, nearest first (ties by id)."""

    items: list[CandidateItem]
    query_fix: GpsFix
    epe_m: float

    def __len__(self) -> int:
        return len(self.items)

    def ids(self) -> list[str]:
        return [item.record.id for item in self.items]


@dataclass
class GridIndex:
    """Lat/lon grid over manifest records for radius queries.

    Cells are sized in degrees from a meter parameter at the region-center
    latitude. Every record lands in exactly one bucket; the query applies
    the exact distance predicate after the bucket scan, so cell size never
    affects results, only speed.
    """

    cell_lat_deg: float
    cell_lon_deg: float
    points: list[GeoPoint]
    buckets: dict[tuple[int, int], list[int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.points)

    def _cell_of(self, point: GeoPoint) -> tuple[int, int]:
        return (
            int(math.floor(point.lat / self.cell_lat_deg)),
            int(math.floor(point.lon / self.cell_lon_deg)),
        )


def build_grid_index(
    manifest: Manifest, cell_m: float = DEFAULT_CELL_M, model: EarthModel = SPHERE
) -> GridIndex:
    """Bucket every manifest record by its grid cell."""
    if not (cell_m > 0):
        raise ValueError(f"cell_m must be > 0, got {cell_m!r}")
    m_lat, m_lon = meters_per_degree(manifest.region_center.lat, model)
    index = GridIndex(
        cell_lat_deg=cell_m / m_lat,
        cell_lon_deg=cell_m / m_lon,
        points=[rec.point for rec in manifest.records],
        buckets=defaultdict(list),
    )
    for i, point in enumerate(index.points):
        index.buckets[index._cell_of(point)].append(i)
    index.buckets = dict(index.buckets)
    return index


def _cap_bounding_box(
    center: GeoPoint, radius_m: float, model: EarthModel
) -> tuple[float, float, float, float] | None:
    """Lat/lon bounds of the spherical cap, or None when no box is usable."""
    ang = radius_m / model.radius_m
    if ang >= math.pi:
        return None
    dlat = math.degrees(ang)
    lat_min = center.lat - dlat
    lat_max = center.lat + dlat
    if lat_min <= -90.0 or lat_max >= 90.0:
        return None
    # Maximum longitude extent of a spherical cap (reached slightly poleward
    # of the center): asin(sin(angular radius) / cos(latitude)).
    sin_ang = math.sin(ang)
    cos_lat = math.cos(math.radians(center.lat))
    if cos_lat <= sin_ang:
        return None
    dlon = math.degrees(math.asin(sin_ang / cos_lat))
    lon_min = center.lon - dlon
    lon_max = center.lon + dlon
    if lon_min < -180.0 or lon_max >= 180.0:
        return None
    return lat_min, lat_max, lon_min, lon_max


def radius_query(
    index: GridIndex, center: GeoPoint, radius_m: float, model: EarthModel = SPHERE
) -> list[int]:
    """Indices of records strictly within radius_m of center, ascending.

    Scans the buckets intersecting the cap's bounding box, then applies the
    exact strict distance predicate, so the result equals a linear scan. A
    box that would cross the antimeridian or a pole falls back to scanning
    every bucket (correct, merely slower; city-scale data never hits it).
    """
    if radius_m <= 0 or not index.points:
        return []
    box = _cap_bounding_box(center, radius_m, model)
    if box is None:
        candidate_indices = (i for bucket in index.buckets.values() for i in bucket)
    else:
        lat_min, lat_max, lon_min, lon_max = box
        row_lo = int(math.floor(lat_min / index.cell_lat_deg))
        row_hi = int(math.floor(lat_max / index.cell_lat_deg))
        col_lo = int(math.floor(lon_min / index.cell_lon_deg))
        col_hi = int(math.floor(lon_max / index.cell_lon_deg))
        candidate_indices = (
            i
            for row in range(row_lo, row_hi + 1)
            for col in range(col_lo, col_hi + 1)
            for i in index.buckets.get((row, col), ())
        )
    hits = [
        i
        for i in candidate_indices
        if great_circle_distance(index.points[i], center, model) < radius_m
    ]
    hits.sort()
    return hits


def filter_candidates(
    manifest: Manifest,
    fix: GpsFix,
    epe_m: float,
    query_heading_deg: float,
    config: RetrievalConfig = RetrievalConfig(),
    index: GridIndex | None = None,
    model: EarthModel = SPHERE,
) -> CandidateSet:
    """Prune the manifest to the records matching both query predicates.

    Keeps records with distance-to-fix strictly below th * epe_m AND
    heading difference strictly below view_window_k, sorted by distance
    (ties by id) and truncated to the max_candidates nearest. An EPE of 0
    yields an empty set. Passing a prebuilt GridIndex accelerates the
    radius stage without changing the result.
    """
    if epe_m < 0:
        raise ValueError(f"epe_m must be >= 0, got {epe_m!r}")
    radius = config.th * epe_m
    if index is not None:
        in_radius = radius_query(index, fix.point, radius, model)
    else:
        in_radius = [
            i
            for i, rec in enumerate(manifest.records)
            if great_circle_distance(rec.point, fix.point, model) < radius
        ]
    items = []
    for i in in_radius:
        rec = manifest.records[i]
        delta = heading_difference(rec.heading_deg, query_heading_deg)
        if delta < config.view_window_k:
            d = great_circle_distance(rec.point, fix.point, model)
            items.append(CandidateItem(rec, d, delta))
    items.sort(key=lambda item: (item.distance_m, item.record.id))
    return CandidateSet(items=items[: config.max_candidates], query_fix=fix, epe_m=epe_m)
