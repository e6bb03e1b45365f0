import json
from urllib.parse import parse_qs, urlparse

import pytest
from hypothesis import given, settings, strategies as st

from urbanfix.dataset import (
    DuplicateRecordIdError,
    FilePanoramaProvider,
    HttpPanoramaProvider,
    ImageRecord,
    Manifest,
    ManifestError,
    OutOfRegionError,
    PanoramaSite,
    ProviderError,
    build_streetview_url,
    discover_panoramas,
    enumerate_headings,
    load_manifest,
    save_manifest,
)
from urbanfix.geodesy import GeoPoint, great_circle_distance, offset_point

CENTER = GeoPoint(41.8781, -87.6298)


def make_manifest(n_sites: int = 3) -> Manifest:
    records = []
    for k in range(n_sites):
        site = PanoramaSite(f"p{k:04d}", offset_point(CENTER, 20.0 * k, 0.0))
        records.extend(enumerate_headings(site))
    return Manifest(records=records, region_center=CENTER, region_radius_m=500.0)


class TestEnumerateHeadings:
    def test_twelve_records(self):
        site = PanoramaSite("p0001", CENTER)
        records = enumerate_headings(site)
        assert len(records) == 12
        assert [r.heading_deg for r in records] == [30.0 * i for i in range(12)]

    def test_ids_and_coordinates(self):
        site = PanoramaSite("p0001", CENTER)
        records = enumerate_headings(site)
        assert records[0].id == "p0001_h000"
        assert records[1].id == "p0001_h030"
        assert records[-1].id == "p0001_h330"
        assert all(r.point == site.point for r in records)
        assert all(r.pano_id == "p0001" for r in records)

    def test_headings_distinct_sorted(self):
        records = enumerate_headings(PanoramaSite("x", CENTER))
        headings = [r.heading_deg for r in records]
        assert headings == sorted(set(headings))

    def test_deterministic(self):
        site = PanoramaSite("p0002", CENTER)
        assert enumerate_headings(site) == enumerate_headings(site)

    def test_defaults_pitch_fov(self):
        rec = enumerate_headings(PanoramaSite("p", CENTER))[0]
        assert rec.pitch_deg == 10.0
        assert rec.fov_deg == 60.0


class TestStreetviewUrl:
    def test_template_exact(self):
        rec = ImageRecord(
            id="r", pano_id="p", point=GeoPoint(41.8781, -87.6298),
            heading_deg=10.0, pitch_deg=10.0, fov_deg=60.0, image_path="x.png",
        )
        url = build_streetview_url(rec, (1400, 1200), "KEY123")
        assert url == (
            "http://maps.googleapis.com/maps/api/streetview?size=1400x1200"
            "&location=41.878100,-87.629800&fov=60&heading=10&pitch=10"
            "&sensor=true&key=KEY123"
        )

    def test_zero_heading(self):
        rec = ImageRecord(
            id="r", pano_id="p", point=CENTER, heading_deg=0.0, image_path="x.png"
        )
        assert "&heading=0&" in build_streetview_url(rec, (640, 480), "k")

    def test_empty_key_rejected(self):
        rec = ImageRecord(id="r", pano_id="p", point=CENTER, heading_deg=0.0,
                          image_path="x.png")
        with pytest.raises(ValueError):
            build_streetview_url(rec, (640, 480), "")

    def test_parses_as_url_with_roundtrip_params(self):
        rec = ImageRecord(
            id="r", pano_id="p", point=GeoPoint(-33.8650, 151.2094),
            heading_deg=270.0, pitch_deg=10.0, fov_deg=60.0, image_path="x.png",
        )
        url = build_streetview_url(rec, (1400, 1200), "secret")
        parsed = urlparse(url)
        assert parsed.scheme == "http"
        assert parsed.netloc == "maps.googleapis.com"
        q = parse_qs(parsed.query)
        assert q["size"] == ["1400x1200"]
        assert q["location"] == ["-33.865000,151.209400"]
        assert q["fov"] == ["60"]
        assert q["heading"] == ["270"]
        assert q["pitch"] == ["10"]
        assert q["sensor"] == ["true"]
        assert q["key"] == ["secret"]


class TestManifestRoundtrip:
    def test_save_load_equal(self, tmp_path):
        manifest = make_manifest()
        path = tmp_path / "m.jsonl"
        save_manifest(manifest, path)
        loaded = load_manifest(path)
        assert loaded.records == manifest.records
        assert loaded.region_center == manifest.region_center
        assert loaded.region_radius_m == manifest.region_radius_m

    def test_descriptor_path_preserved(self, tmp_path):
        manifest = make_manifest(1)
        manifest.records = [
            r if i else ImageRecord(
                id=r.id, pano_id=r.pano_id, point=r.point, heading_deg=r.heading_deg,
                pitch_deg=r.pitch_deg, fov_deg=r.fov_deg, image_path=r.image_path,
                descriptor_path="descriptors/x.vld",
            )
            for i, r in enumerate(manifest.records)
        ]
        path = tmp_path / "m.jsonl"
        save_manifest(manifest, path)
        loaded = load_manifest(path)
        assert loaded.records[0].descriptor_path == "descriptors/x.vld"
        assert loaded.records[1].descriptor_path is None

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        manifest = load_manifest(path)
        assert manifest.records == []

    def test_duplicate_id_names_line(self, tmp_path):
        manifest = make_manifest(1)
        path = tmp_path / "m.jsonl"
        save_manifest(manifest, path)
        lines = path.read_text().splitlines()
        # Header is line 1; replicate record line 6 at line 7.
        lines[6] = lines[5]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DuplicateRecordIdError) as exc_info:
            load_manifest(path)
        assert exc_info.value.line == 7
        assert "line 7" in str(exc_info.value)

    def test_out_of_region_names_line(self, tmp_path):
        manifest = make_manifest(1)
        path = tmp_path / "m.jsonl"
        save_manifest(manifest, path)
        lines = path.read_text().splitlines()
        bad = json.loads(lines[3])
        bad["lat"] = bad["lat"] + 1.0
        lines[3] = json.dumps(bad, sort_keys=True)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(OutOfRegionError) as exc_info:
            load_manifest(path)
        assert exc_info.value.line == 4

    def test_bad_json_names_line(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(
            '{"region_lat": 0.0, "region_lon": 0.0, "region_radius_m": 10.0}\n{oops\n'
        )
        with pytest.raises(ManifestError) as exc_info:
            load_manifest(path)
        assert exc_info.value.line == 2

    def test_missing_header_key(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"region_lat": 0.0}\n')
        with pytest.raises(ManifestError) as exc_info:
            load_manifest(path)
        assert exc_info.value.line == 1

    def test_missing_record_key(self, tmp_path):
        path = tmp_path / "m.jsonl"
        header = {"region_lat": 0.0, "region_lon": 0.0, "region_radius_m": 10.0}
        path.write_text(json.dumps(header) + "\n" + '{"id": "a"}\n')
        with pytest.raises(ManifestError) as exc_info:
            load_manifest(path)
        assert exc_info.value.line == 2

    @settings(max_examples=25, deadline=None)
    @given(
        st.lists(
            st.tuples(
                st.floats(-200, 200), st.floats(-200, 200),
                st.floats(0, 359.999), st.booleans(),
            ),
            max_size=12,
        )
    )
    def test_roundtrip_property(self, tmp_path_factory, offsets):
        records = [
            ImageRecord(
                id=f"r{i:03d}",
                pano_id=f"p{i:03d}",
                point=offset_point(CENTER, east, north),
                heading_deg=heading,
                image_path=f"images/r{i:03d}.png",
                descriptor_path=f"descriptors/r{i:03d}.vld" if with_desc else None,
            )
            for i, (east, north, heading, with_desc) in enumerate(offsets)
        ]
        manifest = Manifest(records=records, region_center=CENTER, region_radius_m=400.0)
        path = tmp_path_factory.mktemp("prop") / "m.jsonl"
        save_manifest(manifest, path)
        assert load_manifest(path) == manifest

    def test_constructor_validates_duplicates(self):
        rec = enumerate_headings(PanoramaSite("p", CENTER))[0]
        with pytest.raises(DuplicateRecordIdError):
            Manifest(records=[rec, rec], region_center=CENTER, region_radius_m=100.0)


class TestDiscoverPanoramas:
    def write_sites(self, tmp_path, entries):
        path = tmp_path / "sites.jsonl"
        path.write_text(
            "".join(json.dumps(e) + "\n" for e in entries), encoding="utf-8"
        )
        return path

    def test_radius_filter(self, tmp_path):
        entries = [
            {"pano_id": f"s{i}", "lat": offset_point(CENTER, d, 0.0).lat,
             "lon": offset_point(CENTER, d, 0.0).lon}
            for i, d in enumerate([10.0, 40.0, 90.0, 200.0, 500.0])
        ]
        path = self.write_sites(tmp_path, entries)
        sites = discover_panoramas(CENTER, 100.0, FilePanoramaProvider(path))
        assert [s.pano_id for s in sites] == ["s0", "s1", "s2"]
        for s in sites:
            assert great_circle_distance(s.point, CENTER) < 100.0

    def test_zero_radius(self, tmp_path):
        path = self.write_sites(tmp_path, [{"pano_id": "a", "lat": CENTER.lat,
                                            "lon": CENTER.lon}])
        assert discover_panoramas(CENTER, 0.0, FilePanoramaProvider(path)) == []

    def test_duplicate_pano_id(self, tmp_path):
        entries = [
            {"pano_id": "dup", "lat": CENTER.lat, "lon": CENTER.lon},
            {"pano_id": "dup", "lat": CENTER.lat + 1e-5, "lon": CENTER.lon},
        ]
        path = self.write_sites(tmp_path, entries)
        sites = discover_panoramas(CENTER, 100.0, FilePanoramaProvider(path))
        assert len(sites) == 1
        assert sites[0].point == CENTER

    def test_missing_file(self, tmp_path):
        with pytest.raises(ProviderError):
            discover_panoramas(
                CENTER, 10.0, FilePanoramaProvider(tmp_path / "absent.jsonl")
            )

    def test_bad_entry(self, tmp_path):
        path = tmp_path / "sites.jsonl"
        path.write_text('{"pano_id": "a"}\n')
        with pytest.raises(ProviderError):
            discover_panoramas(CENTER, 10.0, FilePanoramaProvider(path))

    def test_http_provider_is_stub(self):
        with pytest.raises(ProviderError):
            discover_panoramas(CENTER, 10.0, HttpPanoramaProvider())


class TestImageRecord:
    def test_heading_normalized(self):
        rec = ImageRecord(id="r", pano_id="p", point=CENTER, heading_deg=-30.0,
                          image_path="x.png")
        assert rec.heading_deg == 330.0

    def test_bad_fov(self):
        with pytest.raises(ValueError):
            ImageRecord(id="r", pano_id="p", point=CENTER, heading_deg=0.0,
                        fov_deg=0.0, image_path="x.png")

    def test_empty_id(self):
        with pytest.raises(ValueError):
            ImageRecord(id="", pano_id="p", point=CENTER, heading_deg=0.0,
                        image_path="x.png")
