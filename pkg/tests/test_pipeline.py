import json

import pytest

from urbanfix.dataset import Manifest
from urbanfix.features import ImageFormatError
from urbanfix.geodesy import GeoPoint, great_circle_distance
from urbanfix.gnss import GpsFix, InvalidFixError
from urbanfix.pipeline import (
    MODE_FALLBACK,
    MODE_GPS_ONLY,
    MODE_RETRIEVAL,
    MissingTruthError,
    PipelineConfig,
    QueryCase,
    evaluate,
    export_geojson,
    load_queries,
    locate,
)
from urbanfix.retrieval import build_grid_index


@pytest.fixture(scope="module")
def indexed(street_dataset):
    manifest = street_dataset["manifest"]
    return manifest, build_grid_index(manifest)


def excise_truth(manifest: Manifest, queries) -> Manifest:
    truth_ids = {q.truth_record_id for q in queries}
    return Manifest(
        records=[r for r in manifest.records if r.id not in truth_ids],
        region_center=manifest.region_center,
        region_radius_m=manifest.region_radius_m,
    )


class TestLocate:
    def test_gps_short_circuit(self, street_dataset, indexed):
        manifest, index = indexed
        fix = GpsFix(point=manifest.records[0].point, hdop=0.5, fix_quality=1)
        query = street_dataset["queries"][0]
        result, candidates = locate(
            street_dataset["root"] / query.image_path, fix, 0.0, manifest, index,
            dataset_root=street_dataset["root"],
        )
        assert result.mode == MODE_GPS_ONLY
        assert result.epe_m == pytest.approx(10.2)
        assert result.position == fix.point
        assert result.candidates_considered == 0
        assert result.best_record_id is None and result.inlier_count is None
        assert candidates is None

    def test_retrieval_success(self, street_dataset, indexed):
        manifest, index = indexed
        case = street_dataset["queries"][0]
        result, candidates = locate(
            street_dataset["root"] / case.image_path, case.fix, case.heading_deg,
            manifest, index, dataset_root=street_dataset["root"],
        )
        truth = manifest.record_by_id(case.truth_record_id)
        assert result.mode == MODE_RETRIEVAL
        assert result.best_record_id == case.truth_record_id
        assert result.position == truth.point
        assert result.inlier_count >= 12
        assert result.candidates_considered == len(candidates)
        assert candidates.epe_m == result.epe_m

    def test_fallback_when_truth_excised(self, street_dataset, indexed):
        manifest, index = indexed
        case = street_dataset["queries"][0]
        excised = excise_truth(manifest, street_dataset["queries"])
        result, _ = locate(
            street_dataset["root"] / case.image_path, case.fix, case.heading_deg,
            excised, build_grid_index(excised), dataset_root=street_dataset["root"],
        )
        assert result.mode == MODE_FALLBACK
        assert result.position == case.fix.point
        assert result.best_record_id is None

    def test_invalid_fix(self, street_dataset, indexed):
        manifest, index = indexed
        case = street_dataset["queries"][0]
        bad = GpsFix(point=case.fix.point, hdop=case.fix.hdop, fix_quality=0)
        with pytest.raises(InvalidFixError):
            locate(
                street_dataset["root"] / case.image_path, bad, 0.0, manifest, index,
                dataset_root=street_dataset["root"],
            )

    def test_unreadable_query_image(self, street_dataset, indexed, tmp_path):
        manifest, index = indexed
        case = street_dataset["queries"][0]
        junk = tmp_path / "junk.png"
        junk.write_bytes(b"not an image")
        with pytest.raises(ImageFormatError):
            locate(
                junk, case.fix, case.heading_deg, manifest, index,
                dataset_root=street_dataset["root"],
            )

    def test_missing_descriptor_file(self, street_dataset, indexed, tmp_path):
        from dataclasses import replace

        manifest, _ = indexed
        case = street_dataset["queries"][0]
        broken_records = [
            replace(r, descriptor_path="descriptors/absent.vld")
            for r in manifest.records
        ]
        broken = Manifest(
            records=broken_records,
            region_center=manifest.region_center,
            region_radius_m=manifest.region_radius_m,
        )
        with pytest.raises(FileNotFoundError):
            locate(
                street_dataset["root"] / case.image_path, case.fix, case.heading_deg,
                broken, build_grid_index(broken), dataset_root=street_dataset["root"],
            )

    def test_position_always_fix_or_panorama(self, street_dataset, indexed):
        manifest, index = indexed
        panorama_points = {r.point for r in manifest.records}
        for case in street_dataset["queries"][:10]:
            result, _ = locate(
                street_dataset["root"] / case.image_path, case.fix, case.heading_deg,
                manifest, index, dataset_root=street_dataset["root"],
            )
            assert result.position == case.fix.point or result.position in panorama_points
            if result.mode == MODE_RETRIEVAL:
                assert result.inlier_count >= 12
            else:
                assert result.position == case.fix.point

    def test_result_json_keys(self, street_dataset, indexed):
        manifest, index = indexed
        case = street_dataset["queries"][1]
        result, _ = locate(
            street_dataset["root"] / case.image_path, case.fix, case.heading_deg,
            manifest, index, dataset_root=street_dataset["root"],
        )
        obj = result.to_json_dict()
        assert list(obj) == [
            "mode", "lat", "lon", "epe_m", "best_record_id", "inlier_count",
            "candidates_considered", "timings_ms",
        ]
        assert {"filter", "describe", "match", "verify"} <= set(obj["timings_ms"])


class TestEvaluate:
    def test_subset_all_succeed(self, street_dataset):
        report = evaluate(
            street_dataset["root"], queries=street_dataset["queries"][:10]
        )
        assert report.n_queries == 10
        assert report.success_at_12m == 1.0
        assert report.mode_counts.get(MODE_RETRIEVAL, 0) == 10
        assert report.mean_error_m < 1.0
        truth = {q.query_id: q.truth_record_id for q in street_dataset["queries"][:10]}
        for row in report.per_query:
            # The planted record sits at the true location, so a correct win
            # adopts its coordinates exactly.
            if row["best_record_id"] == truth[row["query_id"]]:
                assert row["error_m"] == 0.0

    def test_zero_queries(self, street_dataset):
        report = evaluate(street_dataset["root"], queries=[])
        assert report.n_queries == 0
        assert report.mean_error_m == 0.0
        assert report.median_error_m == 0.0
        assert report.success_at_12m == 0.0
        assert report.mode_counts == {}
        assert json.loads(report.to_json())["per_query"] == []

    def test_missing_truth_names_query(self, street_dataset):
        case = street_dataset["queries"][0]
        bogus = QueryCase(
            query_id=case.query_id,
            image_path=case.image_path,
            fix=case.fix,
            heading_deg=case.heading_deg,
            truth_record_id="p9999_h000",
        )
        with pytest.raises(MissingTruthError) as exc_info:
            evaluate(street_dataset["root"], queries=[bogus])
        assert case.query_id in str(exc_info.value)

    def test_report_json_deterministic(self, street_dataset):
        queries = street_dataset["queries"][:5]
        a = evaluate(street_dataset["root"], queries=queries).to_json()
        b = evaluate(street_dataset["root"], queries=queries).to_json()
        assert a == b

    def test_table_renders(self, street_dataset):
        report = evaluate(street_dataset["root"], queries=street_dataset["queries"][:3])
        table = report.table()
        assert "success @ 12 m" in table
        assert "mode retrieval" in table

    def test_load_queries(self, street_dataset):
        queries = load_queries(street_dataset["root"])
        assert len(queries) == 100
        assert queries[0].query_id == "q0000"
        assert queries[0].fix.fix_quality == 1


class TestExportGeojson:
    def geojson_oracle(self, path):
        """Parse every geometry with shapely as an independent check."""
        from shapely.geometry import shape

        obj = json.loads(path.read_text())
        assert obj["type"] == "FeatureCollection"
        shapes = []
        for feature in obj["features"]:
            geom = shape(feature["geometry"])
            assert geom.is_valid
            shapes.append((feature["properties"]["role"], geom))
        return obj, shapes

    def test_gps_only_two_features(self, street_dataset, indexed, tmp_path):
        manifest, index = indexed
        case = street_dataset["queries"][0]
        fix = GpsFix(point=case.fix.point, hdop=0.5, fix_quality=1)
        result, candidates = locate(
            street_dataset["root"] / case.image_path, fix, case.heading_deg,
            manifest, index, dataset_root=street_dataset["root"],
        )
        out = tmp_path / "gps.geojson"
        export_geojson(result, candidates, out)
        obj, shapes = self.geojson_oracle(out)
        assert len(obj["features"]) == 2
        assert [role for role, _ in shapes] == ["fix", "epe-circle"]

    def test_retrieval_feature_count(self, street_dataset, indexed, tmp_path):
        manifest, index = indexed
        case = street_dataset["queries"][0]
        result, candidates = locate(
            street_dataset["root"] / case.image_path, case.fix, case.heading_deg,
            manifest, index, dataset_root=street_dataset["root"],
        )
        assert result.mode == MODE_RETRIEVAL
        out = tmp_path / "hit.geojson"
        export_geojson(result, candidates, out)
        obj, shapes = self.geojson_oracle(out)
        assert len(obj["features"]) == 2 + len(candidates) + 1
        roles = [role for role, _ in shapes]
        assert roles.count("candidate") == len(candidates)
        assert roles.count("best") == 1

    def test_circle_ring_closed_and_sized(self, street_dataset, indexed, tmp_path):
        manifest, index = indexed
        case = street_dataset["queries"][0]
        result, candidates = locate(
            street_dataset["root"] / case.image_path, case.fix, case.heading_deg,
            manifest, index, dataset_root=street_dataset["root"],
        )
        out = tmp_path / "ring.geojson"
        export_geojson(result, candidates, out)
        obj = json.loads(out.read_text())
        ring = obj["features"][1]["geometry"]["coordinates"][0]
        assert len(ring) == 65
        assert ring[0] == ring[-1]
        for lon, lat in ring[:-1]:
            d = great_circle_distance(GeoPoint(lat, lon), case.fix.point)
            assert d == pytest.approx(result.epe_m, rel=0.01)


class TestPipelineConfig:
    def test_from_dict_defaults(self):
        config = PipelineConfig.from_dict({})
        assert config.error_model.uere_m == 10.2
        assert config.retrieval.th == 1.2
        assert config.match.ratio_threshold == 0.8
        assert config.skip_epe_m == 12.0

    def test_from_dict_overrides(self):
        config = PipelineConfig.from_dict(
            {"uere_m": 5.0, "th": 2.0, "ratio_threshold": 1.8, "rng_seed": 42,
             "skip_epe_m": 0.0}
        )
        assert config.error_model.uere_m == 5.0
        assert config.retrieval.th == 2.0
        assert config.match.ratio_threshold == 1.8
        assert config.match.rng_seed == 42
        assert config.skip_epe_m == 0.0

    def test_negative_skip_rejected(self):
        with pytest.raises(ValueError):
            PipelineConfig(skip_epe_m=-1.0)
