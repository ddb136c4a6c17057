"""Orchestration, persistence, configuration, CLI and HTTP service."""

from trapline.app.config import PipelineConfig, load_config
from trapline.app.pipeline import AssetStatus, RunManifest, run_pipeline
from trapline.app.store import RunStore, StoreRecord

__all__ = [
    "AssetStatus",
    "PipelineConfig",
    "RunManifest",
    "RunStore",
    "StoreRecord",
    "load_config",
    "run_pipeline",
]
