"""End-to-end localization: GPS short-circuit, retrieval, verification, export.

A query enters as an image plus a GPS fix and camera heading. When the
fix's estimated error is already below the database granularity the fix is
returned untouched (refining a 3 m fix against panoramas ~12 m apart cannot
help). Otherwise the database is pruned by radius and heading, the
survivors are geometrically verified, and the winner's panorama coordinates
replace the fix. When no candidate clears the inlier gate, the raw fix
is returned with an explicit fallback mode rather than a silently wrong
answer.
"""

from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import MutableMapping, Sequence

import numpy as np

from .dataset import ImageRecord, Manifest, load_manifest, save_manifest, with_descriptor_path
from .features import (
    DescriptorSet,
    extract_descriptors,
    load_descriptors,
    load_image,
    normalize_image,
    save_descriptors,
)
from .geodesy import EarthModel, GeoPoint, SPHERE, great_circle_distance, meters_per_degree
from .gnss import DEFAULT_ERROR_MODEL, ErrorModel, GpsFix, InvalidFixError, estimated_position_error
from .matching import MatchConfig, score_candidates
from .retrieval import CandidateSet, GridIndex, RetrievalConfig, build_grid_index, filter_candidates
from .synth import MANIFEST_NAME, QUERIES_NAME

MODE_GPS_ONLY = "gps-only"
MODE_RETRIEVAL = "retrieval"
MODE_FALLBACK = "retrieval-failed-fallback"


class MissingTruthError(KeyError):
    """A query's ground-truth record id is absent from the manifest."""


@dataclass(frozen=True)
class PipelineConfig:
    """All knobs of the localization pipeline in one place.

    skip_epe_m is the GPS short-circuit: estimated errors below it return
    the raw fix, since panorama spacing (~12 m) bounds what retrieval could
    improve.
    """

    error_model: ErrorModel = DEFAULT_ERROR_MODEL
    retrieval: RetrievalConfig = RetrievalConfig()
    match: MatchConfig = MatchConfig()
    skip_epe_m: float = 12.0

    def __post_init__(self) -> None:
        if self.skip_epe_m < 0:
            raise ValueError(f"skip_epe_m must be >= 0, got {self.skip_epe_m!r}")

    @classmethod
    def from_dict(cls, obj: dict) -> "PipelineConfig":
        """Build a config from a flat JSON-style dict of overrides."""
        return cls(
            error_model=ErrorModel(
                uere_m=obj.get("uere_m", DEFAULT_ERROR_MODEL.uere_m),
                confidence_factor=obj.get(
                    "confidence_factor", DEFAULT_ERROR_MODEL.confidence_factor
                ),
            ),
            retrieval=RetrievalConfig(
                th=obj.get("th", 1.2),
                view_window_k=obj.get("view_window_k", 15.0),
                max_candidates=obj.get("max_candidates", 100),
            ),
            match=MatchConfig(
                ratio_threshold=obj.get("ratio_threshold", 0.8),
                ransac_iterations=obj.get("ransac_iterations", 2000),
                inlier_threshold_px=obj.get("inlier_threshold_px", 3.0),
                min_inliers=obj.get("min_inliers", 12),
                rng_seed=obj.get("rng_seed", 0),
            ),
            skip_epe_m=obj.get("skip_epe_m", 12.0),
        )


@dataclass(frozen=True)
class LocalizationResult:
    """Outcome of one localization call.

    mode is "retrieval" only when a candidate passed the inlier gate; then
    position is that record's panorama coordinates and best_record_id /
    inlier_count are set. In every other mode position is the fix itself.
    """

    mode: str
    position: GeoPoint
    epe_m: float
    best_record_id: str | None
    inlier_count: int | None
    candidates_considered: int
    timings_ms: dict[str, float] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "lat": self.position.lat,
            "lon": self.position.lon,
            "epe_m": self.epe_m,
            "best_record_id": self.best_record_id,
            "inlier_count": self.inlier_count,
            "candidates_considered": self.candidates_considered,
            "timings_ms": {k: round(v, 3) for k, v in self.timings_ms.items()},
        }


def _descriptors_for_record(
    rec: ImageRecord,
    dataset_root: Path,
    cache: MutableMapping[str, DescriptorSet] | None,
) -> DescriptorSet:
    if cache is not None and rec.id in cache:
        return cache[rec.id]
    if rec.descriptor_path is not None:
        path = dataset_root / rec.descriptor_path
        if not path.exists():
            raise FileNotFoundError(
                f"record {rec.id!r}: descriptor file {path} is missing"
            )
        dset = load_descriptors(path, image_id=rec.id)
    else:
        image = load_image(dataset_root / rec.image_path)
        dset = extract_descriptors(normalize_image(image), image_id=rec.id)
    if cache is not None:
        cache[rec.id] = dset
    return dset


def _query_descriptors(query_image: np.ndarray | str | Path) -> DescriptorSet:
    if isinstance(query_image, (str, Path)):
        arr = load_image(query_image)
        image_id = Path(query_image).stem
    else:
        arr = np.asarray(query_image)
        image_id = "query"
    return extract_descriptors(normalize_image(arr), image_id=image_id)


def locate(
    query_image: np.ndarray | str | Path,
    fix: GpsFix,
    query_heading_deg: float,
    manifest: Manifest,
    index: GridIndex | None,
    config: PipelineConfig = PipelineConfig(),
    dataset_root: str | Path = ".",
    workers: int = 1,
    descriptor_cache: MutableMapping[str, DescriptorSet] | None = None,
    model: EarthModel = SPHERE,
) -> tuple[LocalizationResult, CandidateSet | None]:
    """Localize one query; returns the result and the candidate set used.

    Steps: estimate the position error from the fix; short-circuit to the
    raw fix when it is below config.skip_epe_m; otherwise prune the
    manifest, verify the survivors, and adopt the best record's panorama
    coordinates when its inlier count reaches config.match.min_inliers.
    Deterministic for a fixed config seed, serial or parallel.
    """
    if fix.fix_quality == 0:
        raise InvalidFixError("cannot localize from a quality-0 fix")
    dataset_root = Path(dataset_root)
    timings: dict[str, float] = {}

    epe = estimated_position_error(fix, config.error_model)
    if epe < config.skip_epe_m:
        return (
            LocalizationResult(
                mode=MODE_GPS_ONLY,
                position=fix.point,
                epe_m=epe,
                best_record_id=None,
                inlier_count=None,
                candidates_considered=0,
                timings_ms=timings,
            ),
            None,
        )

    t0 = time.perf_counter()
    candidates = filter_candidates(
        manifest, fix, epe, query_heading_deg, config.retrieval, index, model
    )
    t1 = time.perf_counter()
    timings["filter"] = (t1 - t0) * 1e3

    query_set = _query_descriptors(query_image)
    scored_input = [
        (item.record.id, _descriptors_for_record(item.record, dataset_root, descriptor_cache), item.distance_m)
        for item in candidates.items
    ]
    t2 = time.perf_counter()
    timings["describe"] = (t2 - t1) * 1e3

    ranking = score_candidates(query_set, scored_input, config.match, workers, timings)

    if ranking and ranking[0][1].inlier_count >= config.match.min_inliers:
        best_id, best = ranking[0]
        rec = manifest.record_by_id(best_id)
        assert rec is not None
        result = LocalizationResult(
            mode=MODE_RETRIEVAL,
            position=rec.point,
            epe_m=epe,
            best_record_id=best_id,
            inlier_count=best.inlier_count,
            candidates_considered=len(candidates),
            timings_ms=timings,
        )
    else:
        result = LocalizationResult(
            mode=MODE_FALLBACK,
            position=fix.point,
            epe_m=epe,
            best_record_id=None,
            inlier_count=None,
            candidates_considered=len(candidates),
            timings_ms=timings,
        )
    return result, candidates


def index_dataset(manifest_path: str | Path) -> Manifest:
    """Extract and store descriptors for every record in a dataset.

    Writes descriptors/<record_id>.vld next to the manifest, points each
    record's descriptor_path at its file, and rewrites the manifest.
    """
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    manifest = load_manifest(manifest_path)
    (root / "descriptors").mkdir(exist_ok=True)
    updated = []
    for rec in manifest.records:
        dset = extract_descriptors(
            normalize_image(load_image(root / rec.image_path)), image_id=rec.id
        )
        rel = f"descriptors/{rec.id}.vld"
        save_descriptors(dset, root / rel)
        updated.append(with_descriptor_path(rec, rel))
    manifest.records = updated
    save_manifest(manifest, manifest_path)
    return manifest


@dataclass(frozen=True)
class QueryCase:
    """One evaluation query: image, fix, heading, and its true record id."""

    query_id: str
    image_path: str
    fix: GpsFix
    heading_deg: float
    truth_record_id: str


def load_queries(dataset_dir: str | Path) -> list[QueryCase]:
    """Read the ground-truth query table written by the synthetic generator."""
    path = Path(dataset_dir) / QUERIES_NAME
    cases = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        cases.append(
            QueryCase(
                query_id=obj["query_id"],
                image_path=obj["image_path"],
                fix=GpsFix(
                    point=GeoPoint(obj["lat"], obj["lon"]),
                    hdop=obj["hdop"],
                    fix_quality=1,
                ),
                heading_deg=obj["heading_deg"],
                truth_record_id=obj["record_id"],
            )
        )
    return cases


@dataclass(frozen=True)
class EvaluationReport:
    """Aggregate localization quality over a query set.

    success_at_12m / success_at_24m are the fractions of queries whose
    final position lies within those distances of the true location. All
    aggregates are 0 for an empty query set.
    """

    per_query: list[dict]
    mean_error_m: float
    median_error_m: float
    success_at_12m: float
    success_at_24m: float
    mode_counts: dict[str, int]

    @property
    def n_queries(self) -> int:
        return len(self.per_query)

    def to_json_dict(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "mean_error_m": self.mean_error_m,
            "median_error_m": self.median_error_m,
            "success_at_12m": self.success_at_12m,
            "success_at_24m": self.success_at_24m,
            "mode_counts": self.mode_counts,
            "per_query": self.per_query,
        }

    def to_json(self) -> str:
        """Canonical JSON: byte-identical for identical results."""
        return json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))

    def table(self) -> str:
        lines = [
            f"{'queries':<22}{self.n_queries}",
            f"{'mean error (m)':<22}{self.mean_error_m:.3f}",
            f"{'median error (m)':<22}{self.median_error_m:.3f}",
            f"{'success @ 12 m':<22}{self.success_at_12m:.3f}",
            f"{'success @ 24 m':<22}{self.success_at_24m:.3f}",
        ]
        for mode in sorted(self.mode_counts):
            lines.append(f"{'mode ' + mode:<22}{self.mode_counts[mode]}")
        return "\n".join(lines)


def evaluate(
    dataset_dir: str | Path,
    queries: Sequence[QueryCase] | None = None,
    config: PipelineConfig = PipelineConfig(),
    workers: int = 1,
    manifest: Manifest | None = None,
    index: GridIndex | None = None,
    model: EarthModel = SPHERE,
) -> EvaluationReport:
    """Localize every query against the dataset and report error metrics.

    queries default to the dataset's own ground-truth table. Each query's
    error is the great-circle distance from the localization result to the
    true record's panorama position; a truth id missing from the manifest
    raises MissingTruthError naming the query. The report contains no
    timings, so identical inputs yield byte-identical to_json() output.
    """
    dataset_dir = Path(dataset_dir)
    if manifest is None:
        manifest = load_manifest(dataset_dir / MANIFEST_NAME)
    if index is None:
        index = build_grid_index(manifest)
    if queries is None:
        queries = load_queries(dataset_dir)

    cache: dict[str, DescriptorSet] = {}
    per_query: list[dict] = []
    errors: list[float] = []
    mode_counts: dict[str, int] = {}
    for case in queries:
        truth = manifest.record_by_id(case.truth_record_id)
        if truth is None:
            raise MissingTruthError(
                f"query {case.query_id!r}: truth record {case.truth_record_id!r} "
                f"is not in the manifest"
            )
        result, _ = locate(
            dataset_dir / case.image_path,
            case.fix,
            case.heading_deg,
            manifest,
            index,
            config,
            dataset_root=dataset_dir,
            workers=workers,
            descriptor_cache=cache,
            model=model,
        )
        error_m = great_circle_distance(result.position, truth.point, model)
        errors.append(error_m)
        mode_counts[result.mode] = mode_counts.get(result.mode, 0) + 1
        per_query.append(
            {
                "query_id": case.query_id,
                "image_path": case.image_path,
                "mode": result.mode,
                "lat": result.position.lat,
                "lon": result.position.lon,
                "best_record_id": result.best_record_id,
                "inlier_count": result.inlier_count,
                "candidates_considered": result.candidates_considered,
                "error_m": error_m,
            }
        )

    n = len(errors)
    return EvaluationReport(
        per_query=per_query,
        mean_error_m=statistics.fmean(errors) if n else 0.0,
        median_error_m=statistics.median(errors) if n else 0.0,
        success_at_12m=sum(e <= 12.0 for e in errors) / n if n else 0.0,
        success_at_24m=sum(e <= 24.0 for e in errors) / n if n else 0.0,
        mode_counts=mode_counts,
    )


def _circle_ring(
    center: GeoPoint, radius_m: float, segments: int, model: EarthModel
) -> list[list[float]]:
    """Closed counterclockwise ring approximating a circle, as [lon, lat]."""
    m_lat, m_lon = meters_per_degree(center.lat, model)
    ring = []
    for i in range(segments):
        ang = 2.0 * math.pi * i / segments
        ring.append(
            [
                center.lon + radius_m * math.cos(ang) / m_lon,
                center.lat + radius_m * math.sin(ang) / m_lat,
            ]
        )
    ring.append(list(ring[0]))
    return ring


def export_geojson(
    result: LocalizationResult,
    candidate_set: CandidateSet | None,
    path: str | Path,
    segments: int = 64,
    model: EarthModel = SPHERE,
) -> None:
    """Write the localization as an RFC 7946 FeatureCollection.

    Features: the fix position (role "fix"), a polygon approximating the
    EPE circle with `segments` segments (role "epe-circle"), one point per
    candidate (role "candidate"), and the best match (role "best") when
    retrieval succeeded.
    """
    fix_point = candidate_set.query_fix.point if candidate_set is not None else result.position
    features: list[dict] = [
        {
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [fix_point.lon, fix_point.lat]},
            "properties": {"role": "fix", "epe_m": result.epe_m},
        },
        {
            "type": "Feature",
            "geometry": {
                "type": "Polygon",
                "coordinates": [_circle_ring(fix_point, result.epe_m, segments, model)],
            },
            "properties": {"role": "epe-circle", "radius_m": result.epe_m},
        },
    ]
    if candidate_set is not None:
        for item in candidate_set.items:
            features.append(
                {
                    "type": "Feature",
                    "geometry": {
                        "type": "Point",
                        "coordinates": [item.record.point.lon, item.record.point.lat],
                    },
                    "properties": {
                        "role": "candidate",
                        "record_id": item.record.id,
                        "distance_m": item.distance_m,
                        "heading_delta_deg": item.heading_delta_deg,
                    },
                }
            )
        if result.best_record_id is not None:
            best = next(
                item.record
                for item in candidate_set.items
                if item.record.id == result.best_record_id
            )
            features.append(
                {
                    "type": "Feature",
                    "geometry": {
                        "type": "Point",
                        "coordinates": [best.point.lon, best.point.lat],
                    },
                    "properties": {
                        "role": "best",
                        "record_id": best.id,
                        "inlier_count": result.inlier_count,
                    },
                }
            )
    collection = {"type": "FeatureCollection", "features": features}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(collection, fh, indent=2)
        fh.write("\n")
