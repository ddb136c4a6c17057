import json
from datetime import datetime, timezone

import pytest
from hypothesis import given
from hypothesis import strategies as st

from trapline.errors import RootNotFound, SchemaViolation, UnknownClass
from trapline.fixtures import STANDARD_SCENES, write_scenes
from trapline.ingest import apportion, load_ground_truth, parse_ground_truth, scan_directory, split_dataset

FIXED = datetime(2024, 10, 23, tzinfo=timezone.utc)


def test_scan_empty_directory(tmp_path):
    manifest = scan_directory(tmp_path, clock=lambda: FIXED)
    assert len(manifest) == 0
    assert manifest.created_at == FIXED


def test_scan_missing_root(tmp_path):
    with pytest.raises(RootNotFound):
        scan_directory(tmp_path / "nope")


def test_scan_skips_non_images(tmp_path):
    write_scenes(tmp_path, STANDARD_SCENES[:1])
    (tmp_path / "notes.txt").write_text("not an image")
    manifest = scan_directory(tmp_path)
    assert len(manifest) == 1
    assert len(manifest.warnings) == 1
    assert "notes.txt" in manifest.warnings[0]


def test_scan_fixture_is_lexicographic(tmp_path):
    write_scenes(tmp_path, STANDARD_SCENES)
    manifest = scan_directory(tmp_path, workers=3)
    names = [a.path.name for a in manifest.assets]
    assert len(names) == 10
    assert names == sorted(names)
    rhino = manifest.assets[0]
    assert [a.label.scientific_name for a in rhino.sidecar] == ["Rhinocerotidae"] * 3
    assert (rhino.width, rhino.height) == (640, 480)


def test_scan_deduplicates_by_content(tmp_path):
    (path,) = write_scenes(tmp_path, STANDARD_SCENES[:1])
    (tmp_path / "copy.png").write_bytes(path.read_bytes())
    manifest = scan_directory(tmp_path)
    assert len(manifest) == 1
    assert any("duplicate" in w for w in manifest.warnings)


def test_split_examples():
    assert split_dataset([f"a{i}" for i in range(41_111)], (0.8, 0.1, 0.1), 3).sizes() == (32_889, 4_111, 4_111)
    assert split_dataset([f"a{i}" for i in range(10)], (0.8, 0.1, 0.1), 3).sizes() == (8, 1, 1)
    ids = [f"a{i}" for i in range(7)]
    split = split_dataset(ids, (1, 0, 0), 0)
    assert split.train == frozenset(ids) and not split.validation and not split.test


def test_split_is_seeded():
    ids = [f"a{i}" for i in range(100)]
    assert split_dataset(ids, seed=5) == split_dataset(ids, seed=5)
    assert split_dataset(ids, seed=5).train != split_dataset(ids, seed=6).train


def test_split_rejects_bad_ratios():
    with pytest.raises(ValueError):
        split_dataset(["a"], (0.5, 0.5, 0.5), 0)


def test_stratified_split_covers_everything(tmp_path):
    write_scenes(tmp_path, STANDARD_SCENES)
    manifest = scan_directory(tmp_path)
    split = split_dataset(manifest, (0.5, 0.25, 0.25), 1, stratify=True)
    assert split.train | split.validation | split.test == {a.asset_id for a in manifest.assets}


@given(
    st.integers(min_value=0, max_value=5000),
    st.lists(st.integers(min_value=0, max_value=100), min_size=3, max_size=3).filter(lambda w: sum(w) > 0),
)
def test_apportion_conserves_and_stays_within_one(n, weights):
    ratios = [w / sum(weights) for w in weights]
    sizes = apportion(n, ratios)
    assert sum(sizes) == n
    for size, r in zip(sizes, ratios):
        assert abs(size - n * r) < 1 + 1e-9


@given(st.integers(min_value=1, max_value=400), st.integers(min_value=0, max_value=2**31))
def test_split_partitions(n, seed):
    ids = [f"x{i}" for i in range(n)]
    split = split_dataset(ids, (0.8, 0.1, 0.1), seed)
    parts = (split.train, split.validation, split.test)
    assert sum(map(len, parts)) == n
    assert set().union(*parts) == set(ids)
    assert not (split.train & split.validation or split.train & split.test or split.validation & split.test)


def test_ground_truth_one_zebra(tmp_path):
    path = tmp_path / "z.gt.json"
    path.write_text(json.dumps({"image": "z.png", "objects": [{"class": "Equus quagga", "bbox": [1, 2, 30, 40]}]}))
    (ann,) = load_ground_truth(path)
    assert ann.label.scientific_name == "Equus quagga"
    assert ann.box.as_list() == [1, 2, 30, 40]


def test_ground_truth_blank():
    assert parse_ground_truth({"objects": []}) == []


@pytest.mark.parametrize(
    "obj",
    [
        {"class": "Equus quagga", "bbox": [30, 2, 10, 40]},
        {"class": "Equus quagga", "bbox": [1, 2, 3]},
        {"bbox": [1, 2, 3, 4]},
    ],
)
def test_ground_truth_schema_violations(obj):
    with pytest.raises(SchemaViolation):
        parse_ground_truth({"objects": [obj]})


def test_ground_truth_unknown_class():
    with pytest.raises(UnknownClass):
        parse_ground_truth({"objects": [{"class": "unicorn", "bbox": [1, 2, 3, 4]}]})
