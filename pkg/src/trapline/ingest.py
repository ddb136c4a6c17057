"""Image discovery, ground-truth sidecars and reproducible dataset splits."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

from PIL import Image, UnidentifiedImageError

from trapline.domain import (
    BoundingBox,
    Taxonomy,
    TaxonomyClass,
    class_lookup,
    validate_bbox,
)
from trapline.errors import (
    DegenerateBox,
    EmptyManifest,
    RootNotFound,
    SchemaViolation,
    UnknownClass,
)

log = logging.getLogger(__name__)

GT_SUFFIX = ".gt.json"
SCENE_SUFFIX = ".scene.json"
SIDECAR_SUFFIXES = (GT_SUFFIX, SCENE_SUFFIX)


@dataclass(frozen=True)
class Annotation:
    label: TaxonomyClass
    box: BoundingBox

    def to_dict(self) -> dict:
        return {"class": self.label.scientific_name, "bbox": self.box.as_list()}


@dataclass(frozen=True)
class ImageAsset:
    asset_id: str
    path: Path
    width: int
    height: int
    sidecar: tuple[Annotation, ...] | None = None

    @property
    def stem(self) -> str:
        return self.path.name.rsplit(".", 1)[0]

    def read_bytes(self) -> bytes:
        return self.path.read_bytes()

    def sidecar_path(self, suffix: str) -> Path:
        return self.path.with_name(self.stem + suffix)


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    assets: tuple[ImageAsset, ...]
    created_at: datetime = field(compare=False)
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __len__(self) -> int:
        return len(self.assets)

    def by_id(self) -> dict[str, ImageAsset]:
        return {a.asset_id: a for a in self.assets}

    def to_dict(self) -> dict:
        return {
            "root": str(self.root),
            "created_at": self.created_at.isoformat(),
            "assets": [
                {
                    "asset_id": a.asset_id,
                    "path": a.path.relative_to(self.root).as_posix(),
                    "width": a.width,
                    "height": a.height,
                    "ground_truth": None if a.sidecar is None else [x.to_dict() for x in a.sidecar],
                }
                for a in self.assets
            ],
            "warnings": list(self.warnings),
        }


@dataclass(frozen=True)
class SplitAssignment:
    train: frozenset[str]
    validation: frozenset[str]
    test: frozenset[str]
    seed: int

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "train": sorted(self.train),
            "validation": sorted(self.validation),
            "test": sorted(self.test),
        }


def asset_id_for(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _probe(path: Path) -> tuple[str, int, int] | str:
    """Return (asset_id, width, height), or a warning string if undecodable."""
    try:
        data = path.read_bytes()
    except OSError as exc:
        return f"{path}: unreadable ({exc})"
    try:
        with Image.open(path) as im:
            im.verify()
        with Image.open(path) as im:
            width, height = im.size
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        return f"{path}: not a decodable image ({exc.__class__.__name__})"
    if width <= 0 or height <= 0:
        return f"{path}: empty image"
    return asset_id_for(data), width, height


def scan_directory(
    root: str | Path,
    *,
    workers: int = 4,
    taxonomy: Taxonomy | None = None,
    clock: Callable[[], datetime] | None = None,
) -> DatasetManifest:
    """Recursively list decodable images under ``root`` in lexicographic path order.

    Non-image files become warnings. Ground-truth sidecars (``<stem>.gt.json``)
    are attached when present.
    """
    root = Path(root)
    if not root.is_dir():
        raise RootNotFound(f"dataset root not found: {root}")
    candidates: list[Path] = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = [d for d in dirnames if not d.startswith(".")]
        for name in filenames:
            if name.startswith(".") or name.endswith(SIDECAR_SUFFIXES):
                continue
            candidates.append(Path(dirpath) / name)
    candidates.sort(key=lambda p: p.relative_to(root).as_posix())

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        probes = list(pool.map(_probe, candidates))

    assets: list[ImageAsset] = []
    warnings: list[str] = []
    seen: dict[str, Path] = {}
    for path, probe in zip(candidates, probes):
        if isinstance(probe, str):
            log.warning(probe)
            warnings.append(probe)
            continue
        asset_id, width, height = probe
        if asset_id in seen:
            msg = f"{path}: duplicate of {seen[asset_id]}, skipped"
            log.warning(msg)
            warnings.append(msg)
            continue
        seen[asset_id] = path
        gt_path = path.with_name(path.name.rsplit(".", 1)[0] + GT_SUFFIX)
        sidecar = None
        if gt_path.exists():
            sidecar = tuple(load_ground_truth(gt_path, width=width, height=height, taxonomy=taxonomy))
        assets.append(ImageAsset(asset_id, path, width, height, sidecar))

    now = (clock or (lambda: datetime.now(timezone.utc)))()
    return DatasetManifest(root=root, assets=tuple(assets), created_at=now, warnings=tuple(warnings))


def parse_ground_truth(
    data: dict,
    *,
    width: float | None = None,
    height: float | None = None,
    taxonomy: Taxonomy | None = None,
) -> list[Annotation]:
    if not isinstance(data, dict) or not isinstance(data.get("objects"), list):
        raise SchemaViolation("sidecar must be an object with an 'objects' array")
    if "image" in data and not isinstance(data["image"], str):
        raise SchemaViolation("'image' must be a string")
    annotations = []
    for i, obj in enumerate(data["objects"]):
        if not isinstance(obj, dict) or not isinstance(obj.get("class"), str):
            raise SchemaViolation(f"objects[{i}]: missing 'class'")
        bbox = obj.get("bbox")
        if (
            not isinstance(bbox, list)
            or len(bbox) != 4
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in bbox)
        ):
            raise SchemaViolation(f"objects[{i}]: bbox must be four numbers")
        box = BoundingBox.from_list(bbox)
        if box.x_max <= box.x_min or box.y_max <= box.y_min or min(bbox) < 0:
            raise SchemaViolation(f"objects[{i}]: invalid bbox {bbox}")
        if width is not None and height is not None:
            try:
                box = validate_bbox(box, width, height)
            except DegenerateBox as exc:
                raise SchemaViolation(f"objects[{i}]: {exc}") from exc
        try:
            label = class_lookup(obj["class"], taxonomy)
        except UnknownClass as exc:
            log.error("objects[%d]: unknown class %r", i, exc.label)
            raise
        annotations.append(Annotation(label, box))
    return annotations


def load_ground_truth(
    path: str | Path,
    *,
    width: float | None = None,
    height: float | None = None,
    taxonomy: Taxonomy | None = None,
) -> list[Annotation]:
    """Read one ``.gt.json`` sidecar. An empty ``objects`` array is a blank image."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"{path}: invalid JSON ({exc})") from exc
    return parse_ground_truth(data, width=width, height=height, taxonomy=taxonomy)


def apportion(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; remainder ties go to earlier ratios."""
    quotas = [n * r for r in ratios]
    sizes = [math.floor(q) for q in quotas]
    leftover = n - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:leftover]:
        sizes[i] += 1
    return sizes


def _fisher_yates(items: list, seed: int) -> list:
    rng = random.Random(seed)
    items = list(items)
    for i in range(len(items) - 1, 0, -1):
        j = rng.randrange(i + 1)
        items[i], items[j] = items[j], items[i]
    return items


def split_dataset(
    manifest: DatasetManifest | Sequence[str],
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    *,
    stratify: bool = False,
) -> SplitAssignment:
    """Seeded shuffle followed by largest-remainder apportionment.

    With ``stratify`` each stratum (first ground-truth class, or blank) is
    apportioned separately; totals then only approximate the global ratios.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    if isinstance(manifest, DatasetManifest):
        ids = [a.asset_id for a in manifest.assets]
        strata = {a.asset_id: (a.sidecar[0].label.scientific_name if a.sidecar else "") for a in manifest.assets}
    else:
        ids = list(manifest)
        strata = {i: "" for i in ids}
    if not ids:
        raise EmptyManifest("cannot split an empty manifest")
    if len(set(ids)) != len(ids):
        raise ValueError("asset ids must be unique")

    groups: dict[str, list[str]] = {}
    for asset_id in ids:
        groups.setdefault(strata[asset_id] if stratify else "", []).append(asset_id)

    parts: list[list[str]] = [[], [], []]
    for offset, key in enumerate(sorted(groups)):
        shuffled = _fisher_yates(groups[key], seed + offset)
        start = 0
        for part, size in zip(parts, apportion(len(shuffled), ratios)):
            part.extend(shuffled[start:start + size])
            start += size
    return SplitAssignment(frozenset(parts[0]), frozenset(parts[1]), frozenset(parts[2]), seed)
