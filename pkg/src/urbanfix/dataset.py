"""The geotagged reference database: records, manifests, URLs, providers.

A reference database is a set of street-view images, each stamped with the
panorama coordinate it was captured from and the camera heading. Every
panorama site contributes 12 images covering the full circle in 30-degree
heading steps. Manifests are JSON Lines: one header object with the region,
then one record object per line; streamable and diff-friendly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Protocol

from .geodesy import EarthModel, GeoPoint, SPHERE, great_circle_distance, normalize_heading

HEADING_STEP_DEG = 30.0
HEADINGS_PER_SITE = 12
DEFAULT_PITCH_DEG = 10.0
DEFAULT_FOV_DEG = 60.0

STREETVIEW_ENDPOINT = "http://maps.googleapis.com/maps/api/streetview"

#: Environment variable holding the street-view API key; never stored in
#: manifests or other artifacts.
API_KEY_ENV = "URBANFIX_SV_KEY"

_RECORD_KEYS = {"id", "pano_id", "lat", "lon", "heading_deg", "pitch_deg", "fov_deg",
                "image_path", "descriptor_path"}


class ManifestError(ValueError):
    """A manifest file violates the format or an invariant.

    line is 1-based when the failure is tied to a specific line.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class DuplicateRecordIdError(ManifestError):
    """Two records share an id."""


class OutOfRegionError(ManifestError):
    """A record lies outside the manifest's declared region."""


class ProviderError(RuntimeError):
    """A panorama provider failed to produce its site list."""


@dataclass(frozen=True)
class PanoramaSite:
    """One street-view capture location."""

    pano_id: str
    point: GeoPoint

    def __post_init__(self) -> None:
        if not self.pano_id:
            raise ValueError("pano_id must be non-empty")


@dataclass(frozen=True)
class ImageRecord:
    """One geotagged, heading-stamped reference image."""

    id: str
    pano_id: str
    point: GeoPoint
    heading_deg: float
    pitch_deg: float = DEFAULT_PITCH_DEG
    fov_deg: float = DEFAULT_FOV_DEG
    image_path: str = ""
    descriptor_path: str | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("record id must be non-empty")
        if not (self.fov_deg > 0):
            raise ValueError(f"fov_deg must be positive, got {self.fov_deg!r}")
        object.__setattr__(self, "heading_deg", normalize_heading(self.heading_deg))


@dataclass
class Manifest:
    """An ordered reference database with its covering region.

    Record ids must be distinct and every record must lie within 1.01x the
    region radius of the center (the 1% slack absorbs provider rounding).
    """

    records: list[ImageRecord] = field(default_factory=list)
    region_center: GeoPoint = GeoPoint(0.0, 0.0)
    region_radius_m: float = 0.0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self, model: EarthModel = SPHERE) -> None:
        seen: set[str] = set()
        for rec in self.records:
            if rec.id in seen:
                raise DuplicateRecordIdError(f"duplicate record id {rec.id!r}")
            seen.add(rec.id)
            d = great_circle_distance(rec.point, self.region_center, model)
            if d > self.region_radius_m * 1.01:
                raise OutOfRegionError(
                    f"record {rec.id!r} lies {d:.1f} m from the region center, "
                    f"beyond radius {self.region_radius_m:.1f} m"
                )

    def record_by_id(self, record_id: str) -> ImageRecord | None:
        for rec in self.records:
            if rec.id == record_id:
                return rec
        return None


def enumerate_headings(
    site: PanoramaSite,
    pitch_deg: float = DEFAULT_PITCH_DEG,
    fov_deg: float = DEFAULT_FOV_DEG,
) -> list[ImageRecord]:
    """The 12 heading-stamped records of one panorama site.

    Headings are 0, 30, ..., 330 in ascending order; ids are deterministic,
    of the form "<pano_id>_h<heading zero-padded to 3 digits>".
    """
    records = []
    for i in range(HEADINGS_PER_SITE):
        heading = i * HEADING_STEP_DEG
        rec_id = f"{site.pano_id}_h{int(heading):03d}"
        records.append(
            ImageRecord(
                id=rec_id,
                pano_id=site.pano_id,
                point=site.point,
                heading_deg=heading,
                pitch_deg=pitch_deg,
                fov_deg=fov_deg,
                image_path=f"images/{rec_id}.png",
            )
        )
    return records


def _fmt_angle(value: float) -> str:
    """Angles print without a trailing .0 so heading 0 renders as "0"."""
    return format(value, "g")


def build_streetview_url(
    record: ImageRecord, size: tuple[int, int], api_key: str
) -> str:
    """The exact street-view request URL for one record.

    size is (width, height) in pixels; latitude and longitude are printed
    to 6 decimal places. The api_key must be non-empty.
    """
    if not api_key:
        raise ValueError("api_key must be non-empty")
    w, h = size
    return (
        f"{STREETVIEW_ENDPOINT}?size={w}x{h}"
        f"&location={record.point.lat:.6f},{record.point.lon:.6f}"
        f"&fov={_fmt_angle(record.fov_deg)}"
        f"&heading={_fmt_angle(record.heading_deg)}"
        f"&pitch={_fmt_angle(record.pitch_deg)}"
        f"&sensor=true&key={api_key}"
    )


def _record_to_json(rec: ImageRecord) -> dict:
    obj = {
        "id": rec.id,
        "pano_id": rec.pano_id,
        "lat": rec.point.lat,
        "lon": rec.point.lon,
        "heading_deg": rec.heading_deg,
        "pitch_deg": rec.pitch_deg,
        "fov_deg": rec.fov_deg,
        "image_path": rec.image_path,
    }
    if rec.descriptor_path is not None:
        obj["descriptor_path"] = rec.descriptor_path
    return obj


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    """Write a manifest as JSON Lines (header object, then one record per line)."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "region_lat": manifest.region_center.lat,
            "region_lon": manifest.region_center.lon,
            "region_radius_m": manifest.region_radius_m,
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in manifest.records:
            fh.write(json.dumps(_record_to_json(rec), sort_keys=True) + "\n")


def _parse_line(raw: str, line_no: int) -> dict:
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"invalid JSON: {exc.msg}", line_no) from None
    if not isinstance(obj, dict):
        raise ManifestError("expected a JSON object", line_no)
    return obj


def _load_record(obj: dict, line_no: int) -> ImageRecord:
    unknown = set(obj) - _RECORD_KEYS
    if unknown:
        raise ManifestError(f"unknown record keys {sorted(unknown)}", line_no)
    try:
        return ImageRecord(
            id=obj["id"],
            pano_id=obj["pano_id"],
            point=GeoPoint(float(obj["lat"]), float(obj["lon"])),
            heading_deg=float(obj["heading_deg"]),
            pitch_deg=float(obj["pitch_deg"]),
            fov_deg=float(obj["fov_deg"]),
            image_path=obj["image_path"],
            descriptor_path=obj.get("descriptor_path"),
        )
    except KeyError as exc:
        raise ManifestError(f"missing record key {exc.args[0]!r}", line_no) from None
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"bad record field: {exc}", line_no) from None


def load_manifest(path: str | Path, model: EarthModel = SPHERE) -> Manifest:
    """Read and validate a JSON Lines manifest.

    Blank lines are ignored; an empty file loads as an empty manifest with
    zero records (center (0, 0), radius 0). The first invariant violation
    (bad JSON, unknown or missing keys, a duplicate id, a record outside the
    region) raises a ManifestError naming the offending line.
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    numbered = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip()]
    if not numbered:
        return Manifest()

    header_no, header_raw = numbered[0]
    header = _parse_line(header_raw, header_no)
    try:
        center = GeoPoint(float(header["region_lat"]), float(header["region_lon"]))
        radius = float(header["region_radius_m"])
    except KeyError as exc:
        raise ManifestError(f"missing header key {exc.args[0]!r}", header_no) from None
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"bad header field: {exc}", header_no) from None

    records: list[ImageRecord] = []
    seen: set[str] = set()
    for line_no, raw in numbered[1:]:
        rec = _load_record(_parse_line(raw, line_no), line_no)
        if rec.id in seen:
            raise DuplicateRecordIdError(f"duplicate record id {rec.id!r}", line_no)
        seen.add(rec.id)
        d = great_circle_distance(rec.point, center, model)
        if d > radius * 1.01:
            raise OutOfRegionError(
                f"record {rec.id!r} lies {d:.1f} m from the region center, "
                f"beyond radius {radius:.1f} m",
                line_no,
            )
        records.append(rec)
    return Manifest(records=records, region_center=center, region_radius_m=radius)


class PanoramaProvider(Protocol):
    """Source of candidate panorama sites for a region."""

    def sites(self, center: GeoPoint, radius_m: float) -> Iterable[PanoramaSite]: ...


@dataclass(frozen=True)
class FilePanoramaProvider:
    """Reads sites from a JSON Lines file of {"pano_id", "lat", "lon"}."""

    path: str | Path

    def sites(self, center: GeoPoint, radius_m: float) -> Iterable[PanoramaSite]:
        try:
            raw = Path(self.path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ProviderError(f"cannot read site list {self.path}: {exc}") from exc
        out = []
        for i, line in enumerate(raw.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(
                    PanoramaSite(obj["pano_id"], GeoPoint(float(obj["lat"]), float(obj["lon"])))
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ProviderError(f"{self.path}:{i}: bad site entry: {exc}") from None
        return out


class HttpPanoramaProvider:
    """Placeholder for live panorama discovery against the metadata API.

    Live discovery needs network access and an API key; this build ships
    only the interface. Use FilePanoramaProvider with an exported site list.
    """

    def sites(self, center: GeoPoint, radius_m: float) -> Iterable[PanoramaSite]:
        raise ProviderError(
            "live panorama discovery is not bundled; supply a site list file "
            "via FilePanoramaProvider"
        )


def discover_panoramas(
    center: GeoPoint,
    radius_m: float,
    provider: PanoramaProvider,
    model: EarthModel = SPHERE,
) -> list[PanoramaSite]:
    """Sites strictly within radius_m of center, deduplicated by pano_id.

    Provider order is preserved; the first occurrence of a pano_id wins.
    A radius of 0 yields an empty list (the distance predicate is strict).
    """
    out: list[PanoramaSite] = []
    seen: set[str] = set()
    for site in provider.sites(center, radius_m):
        if site.pano_id in seen:
            continue
        if great_circle_distance(site.point, center, model) < radius_m:
            seen.add(site.pano_id)
            out.append(site)
    return out


def with_descriptor_path(record: ImageRecord, descriptor_path: str) -> ImageRecord:
    """Copy of a record pointing at a stored descriptor file."""
    return replace(record, descriptor_path=descriptor_path)
