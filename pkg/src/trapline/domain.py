"""Shared vocabulary: taxonomy, boxes, detections and capture stamps."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator

from trapline.errors import DegenerateBox, MalformedStamp, UnknownClass

WEEKDAYS = ("MON", "TUE", "WED", "THU", "FRI", "SAT", "SUN")
STAMP_FORMAT = "%d/%m/%Y %H:%M:%S"


class Kind(str, Enum):
    ANIMAL = "animal"
    PERSON = "person"
    VEHICLE = "vehicle"


@dataclass(frozen=True)
class TaxonomyClass:
    scientific_name: str
    common_name: str
    kind: Kind = Kind.ANIMAL
    aliases: tuple[str, ...] = field(default=(), compare=False)

    def names(self) -> tuple[str, ...]:
        return (self.scientific_name, self.common_name, *self.aliases)

    def __str__(self) -> str:
        return self.scientific_name


def _norm(text: str) -> str:
    return " ".join(text.split()).casefold()


class Taxonomy:
    """An ordered, immutable set of classes with name resolution."""

    def __init__(self, classes: Iterable[TaxonomyClass]):
        self.classes: tuple[TaxonomyClass, ...] = tuple(classes)
        self._by_name: dict[str, TaxonomyClass] = {}
        seen: set[str] = set()
        for cls in self.classes:
            if cls.scientific_name in seen:
                raise ValueError(f"duplicate scientific name {cls.scientific_name!r}")
            seen.add(cls.scientific_name)
        # scientific and common names win over aliases on collision
        for cls in self.classes:
            for alias in cls.aliases:
                self._by_name.setdefault(_norm(alias), cls)
        for cls in self.classes:
            self._by_name[_norm(cls.common_name)] = cls
        for cls in self.classes:
            self._by_name[_norm(cls.scientific_name)] = cls

    @classmethod
    def from_json(cls, path: str | Path) -> "Taxonomy":
        with open(path, encoding="utf-8") as fh:
            return cls._from_rows(json.load(fh))

    @classmethod
    def _from_rows(cls, rows: list[dict]) -> "Taxonomy":
        return cls(
            TaxonomyClass(
                scientific_name=row["scientific_name"],
                common_name=row["common_name"],
                kind=Kind(row.get("kind", "animal")),
                aliases=tuple(row.get("aliases", ())),
            )
            for row in rows
        )

    def lookup(self, label_text: str) -> TaxonomyClass:
        try:
            return self._by_name[_norm(label_text)]
        except KeyError:
            raise UnknownClass(label_text) from None

    def get(self, label_text: str) -> TaxonomyClass | None:
        return self._by_name.get(_norm(label_text))

    def name_index(self) -> list[tuple[str, TaxonomyClass]]:
        """All resolvable names, longest first (for greedy text matching)."""
        pairs = [(name, self._by_name[name]) for name in self._by_name]
        pairs.sort(key=lambda p: (-len(p[0]), p[0]))
        return pairs

    def __iter__(self) -> Iterator[TaxonomyClass]:
        return iter(self.classes)

    def __len__(self) -> int:
        return len(self.classes)

    def __contains__(self, item: object) -> bool:
        return item in self.classes


@lru_cache(maxsize=1)
def default_taxonomy() -> Taxonomy:
    data = resources.files("trapline").joinpath("data/taxonomy.json").read_text("utf-8")
    return Taxonomy._from_rows(json.loads(data))


def class_lookup(label_text: str, taxonomy: Taxonomy | None = None) -> TaxonomyClass:
    """Resolve a scientific or common name (case-insensitive, whitespace-trimmed)."""
    return (taxonomy or default_taxonomy()).lookup(label_text)


@dataclass(frozen=True)
class BoundingBox:
    """Pixel box in corner form; min edges inclusive, max edges exclusive."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return max(0.0, self.width) * max(0.0, self.height)

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_list(cls, values) -> "BoundingBox":
        x_min, y_min, x_max, y_max = (float(v) for v in values)
        return cls(x_min, y_min, x_max, y_max)


def validate_bbox(box: BoundingBox, width: float, height: float) -> BoundingBox:
    """Clamp ``box`` into the image and restore corner ordering.

    Raises DegenerateBox if nothing is left after clamping.
    """
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    x0, x1 = sorted((box.x_min, box.x_max))
    y0, y1 = sorted((box.y_min, box.y_max))
    x0, x1 = min(max(x0, 0.0), width), min(max(x1, 0.0), width)
    y0, y1 = min(max(y0, 0.0), height), min(max(y1, 0.0), height)
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        raise DegenerateBox(f"box {box.as_list()} has zero area inside {width}x{height}")
    clamped = BoundingBox(float(x0), float(y0), float(x1), float(y1))
    return box if clamped == box else clamped


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    label: TaxonomyClass
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "class": self.label.scientific_name,
            "confidence": self.confidence,
            "bbox": self.box.as_list(),
        }

    @classmethod
    def from_dict(cls, data: dict, taxonomy: Taxonomy | None = None) -> "Detection":
        return cls(
            box=BoundingBox.from_list(data["bbox"]),
            label=class_lookup(data["class"], taxonomy),
            confidence=float(data["confidence"]),
        )


@dataclass(frozen=True)
class CaptureMetadata:
    camera_id: str | None
    timestamp: datetime
    weekday_token: str | None = None

    def stamp_text(self) -> str:
        return self.timestamp.strftime(STAMP_FORMAT)

    def to_dict(self) -> dict:
        return {
            "camera_id": self.camera_id,
            "timestamp": self.timestamp.isoformat(),
            "weekday": self.weekday_token,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CaptureMetadata":
        return cls(
            camera_id=data.get("camera_id"),
            timestamp=datetime.fromisoformat(data["timestamp"]),
            weekday_token=data.get("weekday"),
        )


STAMP_RE = re.compile(
    r"(?:(?P<camera>\b[A-Za-z]+\d+[A-Za-z0-9]*)\s+)?"
    r"(?P<date>\b\d{2}/\d{2}/\d{4})\s+(?P<time>\d{2}:\d{2}:\d{2}\b)"
    r"(?:\s+(?P<weekday>[A-Za-z]{3})\b)?"
)


def parse_capture_metadata(text: str) -> CaptureMetadata:
    """Parse a camera overlay stamp such as ``SA08 25/05/2022 05:29:28 WED``.

    The date is day-first. The weekday token is kept as read and never used
    to correct the date.
    """
    if not text or not text.strip():
        raise MalformedStamp("empty stamp")
    for m in STAMP_RE.finditer(text):
        try:
            ts = datetime.strptime(f"{m['date']} {m['time']}", STAMP_FORMAT)
        except ValueError:
            continue
        weekday = m["weekday"].upper() if m["weekday"] else None
        if weekday not in WEEKDAYS:
            weekday = None
        return CaptureMetadata(camera_id=m["camera"], timestamp=ts, weekday_token=weekday)
    raise MalformedStamp(f"no dd/MM/yyyy HH:mm:ss stamp in {text!r}")


def find_stamp(text: str) -> str | None:
    """Return the raw stamp substring (camera id through weekday) if one is present."""
    for m in STAMP_RE.finditer(text):
        try:
            datetime.strptime(f"{m['date']} {m['time']}", STAMP_FORMAT)
        except ValueError:
            continue
        end = m.end() if (m["weekday"] or "").upper() in WEEKDAYS else m.end("time")
        return text[m.start():end]
    return None
