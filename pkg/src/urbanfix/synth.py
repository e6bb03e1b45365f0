"""Deterministic synthetic street dataset with planted ground truth.

Stands in for live street-view data: panoramas along a straight street at a
fixed spacing, one pseudo-random textured facade image per heading, and
optional queries made by homography-warping a source image and perturbing
its fix within the expected GPS error. Every byte is a pure function of the
seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .dataset import ImageRecord, Manifest, PanoramaSite, enumerate_headings, save_manifest
from .features import NORMALIZED_HEIGHT, NORMALIZED_WIDTH
from .geodesy import EarthModel, GeoPoint, SPHERE, great_circle_distance, meters_per_degree, normalize_heading, offset_point
from .gnss import GpsFix

MANIFEST_NAME = "manifest.jsonl"
QUERIES_NAME = "queries.jsonl"


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the generated street.

    The default origin sits on the equator, where eastward placement keeps
    nominal panorama spacing metrically exact; the placement is additionally
    calibrated so the computed distance between panoramas i and j is never
    below |i - j| * spacing_m (strict radius predicates then behave
    identically on every platform).
    """

    street_length_m: float = 120.0
    spacing_m: float = 12.0
    origin: GeoPoint = GeoPoint(0.0, -87.6298)
    n_queries: int = 0
    fix_hdop: float = 2.0
    fix_offset_max_m: float = 15.0
    heading_noise_max_deg: float = 5.0
    pixel_noise_sigma: float = 2.0

    def __post_init__(self) -> None:
        if not (self.street_length_m >= 0):
            raise ValueError("street_length_m must be >= 0")
        if not (self.spacing_m > 0):
            raise ValueError("spacing_m must be > 0")
        if self.n_queries < 0:
            raise ValueError("n_queries must be >= 0")

    @property
    def n_panoramas(self) -> int:
        return int(math.floor(self.street_length_m / self.spacing_m)) + 1


def _calibrated_lon_step(
    origin: GeoPoint, spacing_m: float, n_panoramas: int, model: EarthModel
) -> float:
    """Eastward longitude step whose k-step distances all land >= k*spacing."""
    _, m_per_deg_lon = meters_per_degree(origin.lat, model)
    step = spacing_m / m_per_deg_lon
    for _ in range(64):
        worst = 0.0
        for k in range(1, n_panoramas):
            p = GeoPoint(origin.lat, origin.lon + k * step)
            d = great_circle_distance(origin, p, model)
            worst = max(worst, (k * spacing_m - d) / (k * spacing_m))
        if worst <= 0.0:
            return step
        step *= 1.0 + worst + 2e-16
    raise RuntimeError("panorama spacing calibration did not converge")


def street_sites(spec: SyntheticSpec, model: EarthModel = SPHERE) -> list[PanoramaSite]:
    """Panorama sites along the street, ids p0000, p0001, ..."""
    n = spec.n_panoramas
    step = _calibrated_lon_step(spec.origin, spec.spacing_m, n, model) if n > 1 else 0.0
    return [
        PanoramaSite(f"p{k:04d}", GeoPoint(spec.origin.lat, spec.origin.lon + k * step))
        for k in range(n)
    ]


def street_manifest(spec: SyntheticSpec, model: EarthModel = SPHERE) -> Manifest:
    """Manifest of the full street: 12 heading records per panorama site."""
    sites = street_sites(spec, model)
    records: list[ImageRecord] = []
    for site in sites:
        records.extend(enumerate_headings(site))
    center = sites[len(sites) // 2].point
    radius = max(
        (great_circle_distance(center, r.point, model) for r in records), default=0.0
    )
    return Manifest(records=records, region_center=center, region_radius_m=radius + 1.0)


def _render_facade(rng: np.random.Generator) -> np.ndarray:
    """One pseudo-random textured facade, uint8 (300, 400)."""
    h, w = NORMALIZED_HEIGHT, NORMALIZED_WIDTH
    img = np.tile(np.linspace(70.0, 190.0, h)[:, None], (1, w))
    img += rng.uniform(-30.0, 30.0)
    for _ in range(40):
        rw = int(rng.integers(8, 80))
        rh = int(rng.integers(8, 80))
        x0 = int(rng.integers(0, w - rw))
        y0 = int(rng.integers(0, h - rh))
        img[y0 : y0 + rh, x0 : x0 + rw] += rng.uniform(-75.0, 75.0)
    img = gaussian_filter(img, sigma=2.0)
    return np.clip(img, 0.0, 255.0).astype(np.uint8)


def _random_query_warp(rng: np.random.Generator) -> np.ndarray:
    """Near-identity homography mapping source pixels to query pixels.

    Translation dominates (up to one descriptor stride plus a few pixels);
    rotation and perspective stay small enough that the displacement field
    varies by under ~2 px across the frame, which keeps grid-sampled
    correspondences consistent with a single homography at verification
    thresholds.
    """
    dx = 16.0 * rng.integers(-1, 2) + rng.uniform(-2.5, 2.5)
    dy = 16.0 * rng.integers(-1, 2) + rng.uniform(-2.5, 2.5)
    theta = math.radians(rng.uniform(-0.2, 0.2))
    p1, p2 = rng.uniform(-3e-6, 3e-6, size=2)
    cx, cy = NORMALIZED_WIDTH / 2.0, NORMALIZED_HEIGHT / 2.0
    to_center = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    rot = np.array(
        [
            [math.cos(theta), -math.sin(theta), 0.0],
            [math.sin(theta), math.cos(theta), 0.0],
            [p1, p2, 1.0],
        ]
    )
    back = np.array([[1, 0, cx + dx], [0, 1, cy + dy], [0, 0, 1.0]])
    return back @ rot @ to_center


def warp_image(img: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Apply a homography by inverse bilinear sampling with edge clamping."""
    h, w = img.shape
    inv = np.linalg.inv(matrix)
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    denom = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    sx = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / denom
    sy = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / denom
    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    src = img.astype(np.float64)
    top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
    bot = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _perturbed_fix(
    rng: np.random.Generator, truth: GeoPoint, spec: SyntheticSpec
) -> GpsFix:
    r = rng.uniform(0.0, spec.fix_offset_max_m)
    ang = rng.uniform(0.0, 2.0 * math.pi)
    point = offset_point(truth, r * math.cos(ang), r * math.sin(ang))
    return GpsFix(point=point, hdop=spec.fix_hdop, fix_quality=1)


def generate_synthetic_dataset(
    spec: SyntheticSpec,
    out_dir: str | Path,
    seed: int,
    model: EarthModel = SPHERE,
) -> tuple[Manifest, list[dict]]:
    """Render the street dataset (and queries) under out_dir.

    Writes images/<record_id>.png for every record, manifest.jsonl, and,
    when spec.n_queries > 0, queries/q<n>.png plus queries.jsonl mapping
    each query to its source record id and perturbed fix. Identical
    (spec, seed) produce byte-identical output.

    Returns the manifest and the list of query ground-truth rows.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifest = street_manifest(spec, model)

    rendered: list[np.ndarray] = []
    for idx, rec in enumerate(manifest.records):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1, idx]))
        img = _render_facade(rng)
        rendered.append(img)
        Image.fromarray(img, mode="L").save(out / rec.image_path)
    save_manifest(manifest, out / MANIFEST_NAME)

    rows: list[dict] = []
    if spec.n_queries > 0:
        (out / "queries").mkdir(exist_ok=True)
        for q in range(spec.n_queries):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 2, q]))
            rec_idx = int(rng.integers(0, len(manifest.records)))
            rec = manifest.records[rec_idx]
            warped = warp_image(rendered[rec_idx].astype(np.float64), _random_query_warp(rng))
            warped += rng.normal(0.0, spec.pixel_noise_sigma, size=warped.shape)
            query_img = np.clip(warped, 0.0, 255.0).astype(np.uint8)
            image_path = f"queries/q{q:04d}.png"
            Image.fromarray(query_img, mode="L").save(out / image_path)
            fix = _perturbed_fix(rng, rec.point, spec)
            heading = normalize_heading(
                rec.heading_deg
                + rng.uniform(-spec.heading_noise_max_deg, spec.heading_noise_max_deg)
            )
            rows.append(
                {
                    "query_id": f"q{q:04d}",
                    "image_path": image_path,
                    "record_id": rec.id,
                    "lat": fix.point.lat,
                    "lon": fix.point.lon,
                    "hdop": fix.hdop,
                    "heading_deg": heading,
                }
            )
        with open(out / QUERIES_NAME, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return manifest, rows
