import json

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trapline.annotate import render_overlays
from trapline.context import (
    MockVlmEndpoint,
    ObservationRecord,
    SceneContext,
    TimeOfDay,
    VlmClient,
    VlmEndpointConfig,
    fuse,
    number_word,
    parse_scene,
)
from trapline.domain import BoundingBox, Detection
from trapline.errors import EmptyResponse, EndpointUnreachable
from trapline.fixtures import STANDARD_SCENES, write_scenes
from trapline.ingest import scan_directory


@pytest.fixture
def described(tmp_path, taxonomy):
    """Describe each standard fixture image through the mock endpoint."""
    write_scenes(tmp_path, STANDARD_SCENES)
    manifest = scan_directory(tmp_path)
    endpoint = MockVlmEndpoint.from_manifest(manifest)
    out = {}
    with VlmClient(VlmEndpointConfig(), transport=endpoint.transport()) as client:
        for asset in manifest.assets:
            dets = [Detection(BoundingBox.from_list(a.box.as_list()), a.label, 0.9) for a in asset.sidecar]
            annotated = render_overlays(asset.asset_id, asset.read_bytes(), dets)
            out[asset.stem] = client.describe(annotated)
    return out


def test_describe_zebra_night(described):
    text = described["02_zebra_night"]
    assert "Equus quagga" in text and "SA08" in text and "dark" in text


def test_describe_wildebeest_and_zebra(described):
    text = described["03_wildebeest_zebra"]
    assert "four Connochaetes taurinus" in text and "two Equus quagga" in text


def test_describe_empty_response():
    endpoint = MockVlmEndpoint({}, fixed_text="")
    with VlmClient(VlmEndpointConfig(), transport=endpoint.transport()) as client:
        with pytest.raises(EmptyResponse):
            client.describe(b"\x89PNG")


def test_describe_trims_only_trailing_whitespace():
    endpoint = MockVlmEndpoint({}, fixed_text="  A zebra.  \n")
    with VlmClient(VlmEndpointConfig(), transport=endpoint.transport()) as client:
        assert client.describe(b"x") == "  A zebra."


def test_describe_unreachable():
    with VlmClient(VlmEndpointConfig(base_url="http://127.0.0.1:9", timeout=0.5)) as client:
        with pytest.raises(EndpointUnreachable):
            client.describe(b"x")


def test_describe_wire_protocol():
    seen = {}

    def handler(request):
        seen.update(path=request.url.path, body=json.loads(request.content))
        return httpx.Response(200, json={"text": "ok"})

    with VlmClient(VlmEndpointConfig(prompt="look"), transport=httpx.MockTransport(handler)) as client:
        client.describe(b"img")
    assert seen["path"] == "/v1/describe"
    assert seen["body"]["prompt"] == "look" and seen["body"]["image_b64"] == "aW1n"


# --------------------------------------------------------------------------- parsing


def test_parse_counts_and_habitat():
    scene = parse_scene("There are four Connochaetes taurinus and two Equus quagga on a grassy hill.")
    assert [(s.label.scientific_name, s.count) for s in scene.species_read] == [
        ("Connochaetes taurinus", 4), ("Equus quagga", 2)
    ]
    assert "grass" in scene.habitat_features


def test_parse_night_with_stamp():
    raw = "The image was taken in the dark among trees and grass. 25/05/2022 05:29:28 WED"
    scene = parse_scene(raw)
    assert scene.time_of_day is TimeOfDay.NIGHT
    assert scene.metadata_text == "25/05/2022 05:29:28 WED"
    assert {"trees", "grass"} <= set(scene.habitat_features)


def test_parse_nothing_recognizable():
    scene = parse_scene("nothing recognizable")
    assert scene == SceneContext(raw_text="nothing recognizable")


def test_parse_common_names_digits_and_negation():
    scene = parse_scene("Three zebras and 12 impala are visible; there is no water and no lion.")
    counts = {s.label.scientific_name: s.count for s in scene.species_read}
    assert counts == {"Equus quagga": 3, "Aepyceros melampus": 12}
    assert "water" not in scene.habitat_features


def test_number_words():
    assert [number_word(n) for n in (1, 4, 20)] == ["one", "four", "twenty"]
    assert number_word(21) == "21"


@given(st.text(max_size=200))
def test_parse_is_total_and_keeps_raw(raw):
    scene = parse_scene(raw)
    assert scene.raw_text == raw
    assert all(s.count >= 1 for s in scene.species_read)
    assert parse_scene(raw) == scene


# --------------------------------------------------------------------------- fusion


def test_fuse_agreeing_zebra(det):
    obs = fuse([det("zebra")], parse_scene("A zebra stands in the grass."), "a")
    assert obs.counts() == {"Equus quagga": 1}
    assert obs.discrepancies == ()


def test_fuse_detector_is_authoritative():
    obs = fuse([], parse_scene("A lion rests."), "a")
    assert obs.counts() == {}
    assert obs.discrepancies == ("Panthera leo",)


def test_fuse_multi_species(det):
    dets = [det("wildebeest")] * 4 + [det("zebra")] * 2
    obs = fuse(dets, parse_scene("Some animals."), "a")
    assert obs.counts() == {"Connochaetes taurinus": 4, "Equus quagga": 2}


def test_fuse_parses_stamp(det):
    obs = fuse([det("zebra")], parse_scene("Taken in the dark. SA08 25/05/2022 05:29:28 WED"), "a")
    assert obs.capture.camera_id == "SA08"


@given(st.text(max_size=120), st.lists(st.sampled_from(["zebra", "lion", "rhino"]), max_size=6))
def test_counts_depend_only_on_detections(taxonomy, text, names):
    dets = [Detection(BoundingBox(0, 0, 5, 5), taxonomy.lookup(n), 0.9) for n in names]
    base = fuse(dets, parse_scene("four lions and a zebra"), "a")
    other = fuse(dets, parse_scene(text), "a")
    assert base.species_counts == other.species_counts


def test_observation_round_trip(det):
    obs = fuse([det("zebra"), det("lion")], parse_scene("A zebra at night. SA08 25/05/2022 05:29:28 WED"), "a")
    assert ObservationRecord.from_dict(json.loads(json.dumps(obs.to_dict()))) == obs


def test_ocr_error_mode_is_seeded(tmp_path):
    write_scenes(tmp_path, STANDARD_SCENES)
    manifest = scan_directory(tmp_path)
    a = MockVlmEndpoint.from_manifest(manifest, ocr_error=True, error_rate=0.5, seed=1)
    b = MockVlmEndpoint.from_manifest(manifest, ocr_error=True, error_rate=0.5, seed=1)
    for asset in manifest.assets:
        png = render_overlays(asset.asset_id, asset.read_bytes(), []).png
        assert a.compose(png) == b.compose(png)
