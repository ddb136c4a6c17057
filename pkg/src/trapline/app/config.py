"""Pipeline configuration: a JSON file, with relative paths resolved against it."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Any

from trapline.context import DEFAULT_PROMPT, VlmEndpointConfig
from trapline.detect import DEFAULT_CONFIDENCE_THRESHOLD, DetectorEndpointConfig, DetectorNoise
from trapline.errors import FatalConfig

ENV_VAR = "TRAPLINE_CONFIG"


@dataclass(frozen=True)
class DetectorSettings:
    base_url: str = "http://localhost:8000"
    model_name: str = "yolov10x"
    timeout: float = 30.0
    confidence_threshold: float = DEFAULT_CONFIDENCE_THRESHOLD
    mock: bool = False
    noise: dict | None = None

    def endpoint(self) -> DetectorEndpointConfig:
        return DetectorEndpointConfig(self.base_url, self.model_name, self.timeout, self.confidence_threshold)

    def mock_noise(self, seed: int) -> DetectorNoise | None:
        if not self.noise:
            return None
        return DetectorNoise(**{"seed": seed, **self.noise})


@dataclass(frozen=True)
class VlmSettings:
    base_url: str = "http://localhost:8001"
    timeout: float = 60.0
    prompt: str = DEFAULT_PROMPT
    mock: bool = False
    ocr_error: bool = False
    error_rate: float = 0.5

    def endpoint(self) -> VlmEndpointConfig:
        return VlmEndpointConfig(self.base_url, self.timeout, self.prompt)


@dataclass(frozen=True)
class RetrySettings:
    attempts: int = 3
    base_delay: float = 0.05
    max_delay: float = 2.0


@dataclass(frozen=True)
class PipelineConfig:
    images: Path
    output_root: Path
    corpus: Path | None = None
    detector: DetectorSettings = field(default_factory=DetectorSettings)
    vlm: VlmSettings = field(default_factory=VlmSettings)
    retry: RetrySettings = field(default_factory=RetrySettings)
    embedder: dict | None = None  # {"base_url", "dimension", "model"}; default is local trigrams
    generator_url: str | None = None
    chunk_size: int = 800
    overlap: int = 80
    max_docs: int = 20
    k_passages: int = 4
    iou_threshold: float = 0.5
    questions: tuple[str, ...] = ("Q1", "Q2", "Q3", "Q4", "Q5", "Q6", "Q7", "Q8", "Q9", "Q10")
    synthesize: bool = True
    report_title: str = "Wildlife Species Report"
    workers: int = 4
    seed: int = 0
    run_date: str | None = None
    source: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.workers < 1:
            raise FatalConfig("workers must be >= 1")
        if self.chunk_size <= 0 or not 0 <= self.overlap < self.chunk_size:
            raise FatalConfig("need chunk_size > 0 and 0 <= overlap < chunk_size")
        if self.retry.attempts < 1:
            raise FatalConfig("retry.attempts must be >= 1")
        if self.run_date is not None:
            try:
                date.fromisoformat(self.run_date)
            except ValueError as exc:
                raise FatalConfig(f"run_date must be YYYY-MM-DD, got {self.run_date!r}") from exc

    def replace(self, **changes: Any) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def check_paths(self) -> None:
        """Referenced inputs must exist when a run starts."""
        if not self.images.is_dir():
            raise FatalConfig(f"images directory not found: {self.images}")
        if self.corpus is not None and not self.corpus.is_dir():
            raise FatalConfig(f"corpus directory not found: {self.corpus}")

    def snapshot(self) -> dict:
        """Config as recorded in run artifacts.

        Input paths are written relative to the config file so that the same
        config yields the same record wherever it is run; the output root is
        where the record lives and is left out.
        """
        base = self.source.parent if self.source else None

        def rel(p: Path | None) -> str | None:
            if p is None:
                return None
            if base is not None:
                try:
                    return Path(os.path.relpath(p, base)).as_posix()
                except ValueError:
                    pass
            return p.as_posix()

        return {
            "images": rel(self.images),
            "corpus": rel(self.corpus),
            "detector": dataclasses.asdict(self.detector),
            "vlm": dataclasses.asdict(self.vlm),
            "retry": dataclasses.asdict(self.retry),
            "embedder": self.embedder,
            "generator_url": self.generator_url,
            "chunk_size": self.chunk_size,
            "overlap": self.overlap,
            "max_docs": self.max_docs,
            "k_passages": self.k_passages,
            "iou_threshold": self.iou_threshold,
            "questions": list(self.questions),
            "synthesize": self.synthesize,
            "report_title": self.report_title,
            "seed": self.seed,
            "run_date": self.run_date,
        }


def _section(cls, data: Any, name: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise FatalConfig(f"'{name}' must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise FatalConfig(f"unknown keys in '{name}': {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise FatalConfig(f"invalid '{name}': {exc}") from exc


def config_from_dict(data: dict, base: Path | None = None, source: Path | None = None) -> PipelineConfig:
    if not isinstance(data, dict):
        raise FatalConfig("config must be a JSON object")
    base = base or Path.cwd()

    def path(key: str, required: bool) -> Path | None:
        value = data.get(key)
        if value is None:
            if required:
                raise FatalConfig(f"config lacks '{key}'")
            return None
        return (base / value).resolve()

    scalars = {f.name for f in dataclasses.fields(PipelineConfig)} - {
        "images", "output_root", "corpus", "detector", "vlm", "retry", "source"
    }
    unknown = set(data) - scalars - {"images", "output_root", "corpus", "detector", "vlm", "retry"}
    if unknown:
        raise FatalConfig(f"unknown config keys: {sorted(unknown)}")
    kwargs = {k: data[k] for k in scalars if k in data}
    if "questions" in kwargs:
        kwargs["questions"] = tuple(kwargs["questions"])
    try:
        return PipelineConfig(
            images=path("images", True),
            output_root=path("output_root", True),
            corpus=path("corpus", False),
            detector=_section(DetectorSettings, data.get("detector"), "detector"),
            vlm=_section(VlmSettings, data.get("vlm"), "vlm"),
            retry=_section(RetrySettings, data.get("retry"), "retry"),
            source=source,
            **kwargs,
        )
    except TypeError as exc:
        raise FatalConfig(f"invalid config: {exc}") from exc


def load_config(path: str | Path | None = None) -> PipelineConfig:
    """Load ``path``, falling back to ``$TRAPLINE_CONFIG``."""
    path = path or os.environ.get(ENV_VAR)
    if not path:
        raise FatalConfig(f"no config given and {ENV_VAR} is unset")
    path = Path(path).resolve()
    if not path.is_file():
        raise FatalConfig(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FatalConfig(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data, base=path.parent, source=path)
