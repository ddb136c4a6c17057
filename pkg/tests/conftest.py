from __future__ import annotations

from pathlib import Path

import pytest

from trapline.app.config import load_config
from trapline.domain import BoundingBox, Detection, default_taxonomy
from trapline.fixtures import STANDARD_SCENES, build_fixture

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def taxonomy():
    return default_taxonomy()


@pytest.fixture
def det(taxonomy):
    def make(name: str, box=(10, 10, 60, 60), conf: float = 0.9) -> Detection:
        return Detection(BoundingBox(*map(float, box)), taxonomy.lookup(name), conf)

    return make


@pytest.fixture
def standard_fixture(tmp_path):
    return build_fixture(tmp_path / "fx", STANDARD_SCENES)


@pytest.fixture
def standard_config(standard_fixture):
    return load_config(standard_fixture.config)


@pytest.fixture(scope="session")
def completed_run(tmp_path_factory):
    """A finished pipeline run over the standard fixture, shared read-only."""
    from trapline.app.pipeline import run_pipeline

    layout = build_fixture(tmp_path_factory.mktemp("run") / "fx", STANDARD_SCENES)
    cfg = load_config(layout.config)
    manifest = run_pipeline(cfg)
    return layout, cfg, manifest
