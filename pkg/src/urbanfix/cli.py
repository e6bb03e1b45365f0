"""Command-line interface: synth, index, locate, eval, fetch."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import dataset as ds
from . import pipeline as pl
from .geodesy import GeoPoint
from .gnss import GpsFix, parse_gga
from .retrieval import build_grid_index
from .synth import MANIFEST_NAME, SyntheticSpec, generate_synthetic_dataset


def _cmd_synth(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(
        street_length_m=args.length_m,
        spacing_m=args.spacing_m,
        n_queries=args.queries,
    )
    manifest, rows = generate_synthetic_dataset(spec, args.out, args.seed)
    print(
        json.dumps(
            {
                "out": str(args.out),
                "panoramas": spec.n_panoramas,
                "records": len(manifest.records),
                "queries": len(rows),
            },
            sort_keys=True,
        )
    )
    return 0


def _cmd_index(args: argparse.Namespace) -> int:
    manifest = pl.index_dataset(args.manifest)
    print(json.dumps({"indexed": len(manifest.records)}, sort_keys=True))
    return 0


def _fix_from_args(args: argparse.Namespace) -> GpsFix:
    if args.nmea is not None:
        return parse_gga(args.nmea)
    if args.lat is None or args.lon is None or args.hdop is None:
        raise SystemExit("locate: provide either --nmea or all of --lat/--lon/--hdop")
    return GpsFix(point=GeoPoint(args.lat, args.lon), hdop=args.hdop, fix_quality=1)


def _cmd_locate(args: argparse.Namespace) -> int:
    manifest_path = Path(args.manifest)
    manifest = ds.load_manifest(manifest_path)
    index = build_grid_index(manifest)
    config = pl.PipelineConfig.from_dict(
        {
            "uere_m": args.uere,
            "th": args.th,
            "view_window_k": args.view_window,
            "max_candidates": args.max_candidates,
            "ratio_threshold": args.ratio_threshold,
            "ransac_iterations": args.ransac_iters,
            "inlier_threshold_px": args.inlier_px,
            "min_inliers": args.min_inliers,
            "rng_seed": args.seed,
            "skip_epe_m": args.skip_epe,
        }
    )
    fix = _fix_from_args(args)
    result, candidates = pl.locate(
        args.query,
        fix,
        args.heading,
        manifest,
        index,
        config,
        dataset_root=manifest_path.parent,
        workers=args.workers,
    )
    if args.geojson is not None:
        pl.export_geojson(result, candidates, args.geojson)
    print(json.dumps(result.to_json_dict(), sort_keys=True))
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    overrides = {}
    if args.config is not None:
        overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
    config = pl.PipelineConfig.from_dict(overrides)
    report = pl.evaluate(args.dataset, config=config, workers=args.workers)
    print(report.to_json())
    print(report.table(), file=sys.stderr)
    return 0


def _cmd_fetch(args: argparse.Namespace) -> int:
    try:
        lat_s, lon_s = args.center.split(",")
        center = GeoPoint(float(lat_s), float(lon_s))
    except ValueError:
        raise SystemExit(f"fetch: bad --center {args.center!r}, expected LAT,LON")
    provider = ds.FilePanoramaProvider(args.sites)
    sites = ds.discover_panoramas(center, args.radius_m, provider)
    records = [rec for site in sites for rec in ds.enumerate_headings(site)]
    api_key = os.environ.get(ds.API_KEY_ENV, "")
    urls = [
        ds.build_streetview_url(rec, (args.width, args.height), api_key or "YOUR_API_KEY")
        for rec in records
    ]
    if not args.download:
        for url in urls:
            print(url)
        return 0

    if not api_key:
        raise SystemExit(f"fetch --download requires the {ds.API_KEY_ENV} environment variable")
    if args.out is None:
        raise SystemExit("fetch --download requires --out DIR")
    import time
    import urllib.request

    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for rec, url in zip(records, urls):
        with urllib.request.urlopen(url) as resp:
            (out / rec.image_path).write_bytes(resp.read())
        time.sleep(args.delay_s)
    manifest = ds.Manifest(
        records=records, region_center=center, region_radius_m=args.radius_m
    )
    ds.save_manifest(manifest, out / MANIFEST_NAME)
    print(json.dumps({"downloaded": len(records), "out": str(out)}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="urbanfix",
        description="Sensor-assisted visual localization against a geotagged "
        "street-view database",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic street dataset")
    p_synth.add_argument("--out", required=True, type=Path)
    p_synth.add_argument("--length-m", required=True, type=float)
    p_synth.add_argument("--spacing-m", default=12.0, type=float)
    p_synth.add_argument("--seed", default=0, type=int)
    p_synth.add_argument("--queries", default=0, type=int)
    p_synth.set_defaults(func=_cmd_synth)

    p_index = sub.add_parser("index", help="extract and store descriptors for all records")
    p_index.add_argument("--manifest", required=True, type=Path)
    p_index.set_defaults(func=_cmd_index)

    p_locate = sub.add_parser("locate", help="localize one query image")
    p_locate.add_argument("--manifest", required=True, type=Path)
    p_locate.add_argument("--query", required=True, type=Path)
    p_locate.add_argument("--lat", type=float)
    p_locate.add_argument("--lon", type=float)
    p_locate.add_argument("--hdop", type=float)
    p_locate.add_argument("--nmea", type=str)
    p_locate.add_argument("--heading", required=True, type=float)
    p_locate.add_argument("--uere", default=10.2, type=float)
    p_locate.add_argument("--th", default=1.2, type=float)
    p_locate.add_argument("--view-window", default=15.0, type=float)
    p_locate.add_argument("--ratio-threshold", default=0.8, type=float)
    p_locate.add_argument("--ransac-iters", default=2000, type=int)
    p_locate.add_argument("--inlier-px", default=3.0, type=float)
    p_locate.add_argument("--min-inliers", default=12, type=int)
    p_locate.add_argument("--skip-epe", default=12.0, type=float)
    p_locate.add_argument("--max-candidates", default=100, type=int)
    p_locate.add_argument("--seed", default=0, type=int)
    p_locate.add_argument("--workers", default=1, type=int)
    p_locate.add_argument("--geojson", type=Path)
    p_locate.set_defaults(func=_cmd_locate)

    p_eval = sub.add_parser("eval", help="evaluate localization over a query set")
    p_eval.add_argument("--dataset", required=True, type=Path)
    p_eval.add_argument("--config", type=Path)
    p_eval.add_argument("--workers", default=1, type=int)
    p_eval.set_defaults(func=_cmd_eval)

    p_fetch = sub.add_parser("fetch", help="list (or download) street-view request URLs")
    p_fetch.add_argument("--center", required=True)
    p_fetch.add_argument("--radius-m", required=True, type=float)
    p_fetch.add_argument("--sites", required=True, type=Path)
    p_fetch.add_argument("--download", action="store_true")
    p_fetch.add_argument("--out", type=Path)
    p_fetch.add_argument("--width", default=1400, type=int)
    p_fetch.add_argument("--height", default=1200, type=int)
    p_fetch.add_argument("--delay-s", default=0.2, type=float)
    p_fetch.set_defaults(func=_cmd_fetch)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
