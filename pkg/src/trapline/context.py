"""Vision-language endpoint client, scene-text parsing and observation fusion.

Wire protocol: ``POST {base_url}/v1/describe`` with ``{"image_b64", "prompt"}``
answered by ``{"text": ...}``.
"""

from __future__ import annotations

import base64
import hashlib
import json
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import httpx

from trapline.annotate import AnnotatedImage, decode_png_meta
from trapline.domain import (
    CaptureMetadata,
    Detection,
    Taxonomy,
    TaxonomyClass,
    default_taxonomy,
    find_stamp,
    parse_capture_metadata,
)
from trapline.errors import (
    EmptyResponse,
    EndpointMalformedResponse,
    EndpointTimeout,
    EndpointUnreachable,
    MalformedStamp,
)
from trapline.ingest import SCENE_SUFFIX, DatasetManifest

DEFAULT_PROMPT = (
    "Read the labels on the bounding boxes to identify the animals and count how many "
    "there are of each species. Say whether the image was taken during the day or at "
    "night, describe the habitat, and transcribe any camera stamp shown in the image."
)

NUMBER_WORDS = {
    w: i
    for i, w in enumerate(
        "zero one two three four five six seven eight nine ten eleven twelve thirteen "
        "fourteen fifteen sixteen seventeen eighteen nineteen twenty".split()
    )
}
_WORD_FOR = {v: k for k, v in NUMBER_WORDS.items()}

HABITAT_VOCAB: dict[str, tuple[str, ...]] = {
    "trees": ("tree", "trees", "wooded", "woodland", "woodlands", "forest", "forests", "woods"),
    "grass": ("grass", "grasses", "grassy", "grassland", "grasslands", "savanna", "savannah", "meadow"),
    "bush": ("bush", "bushes", "bushy", "bushland", "shrub", "shrubs", "scrub", "thicket"),
    "water": ("water", "river", "pond", "lake", "waterhole", "watering hole", "stream", "puddle", "water bodies"),
    "road": ("road", "roads", "track", "tracks", "dirt road", "path", "trail"),
    "rock": ("rock", "rocks", "rocky", "boulder", "boulders", "stone", "stones"),
    "structure": ("structure", "structures", "building", "buildings", "fence", "fences", "wall", "hut"),
}
EXTRA_SCENE_TERMS = (
    "hill", "hills", "vegetation", "mud", "sand", "dust", "sky", "fog", "mist", "rain",
    "snow", "shadow", "shadows", "log", "logs", "termite mound", "plain", "plains", "valley",
)
NIGHT_WORDS = ("dark", "darkness", "night", "nighttime", "night-time", "nocturnal", "infrared", "moonlight")
DAY_WORDS = ("day", "daytime", "daylight", "sunny", "sunlight", "sunlit", "daylit")
NEGATIONS = {"no", "not", "without", "none", "never", "nor"}

_CLAUSE_SPLIT = re.compile(r"[.;!?](?=\s|$)|,|\bbut\b", re.IGNORECASE)
_TOKEN = re.compile(r"[A-Za-z0-9]+(?:[-'][A-Za-z0-9]+)*")


class TimeOfDay(str, Enum):
    DAY = "day"
    NIGHT = "night"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class SpeciesRead:
    text: str  # as written in the response (first mention)
    label: TaxonomyClass
    count: int

    def to_dict(self) -> dict:
        return {"text": self.text, "class": self.label.scientific_name, "count": self.count}


@dataclass(frozen=True)
class SceneContext:
    raw_text: str
    species_read: tuple[SpeciesRead, ...] = ()
    time_of_day: TimeOfDay = TimeOfDay.UNKNOWN
    habitat_features: tuple[str, ...] = ()
    habitat_extras: tuple[str, ...] = ()
    metadata_text: str | None = None

    def to_dict(self) -> dict:
        return {
            "species_read": [s.to_dict() for s in self.species_read],
            "time_of_day": self.time_of_day.value,
            "habitat_features": list(self.habitat_features),
            "habitat_extras": list(self.habitat_extras),
            "metadata_text": self.metadata_text,
            "raw_text": self.raw_text,
        }

    @classmethod
    def from_dict(cls, data: dict, taxonomy: Taxonomy | None = None) -> "SceneContext":
        tax = taxonomy or default_taxonomy()
        return cls(
            raw_text=data["raw_text"],
            species_read=tuple(
                SpeciesRead(s["text"], tax.lookup(s["class"]), int(s["count"])) for s in data["species_read"]
            ),
            time_of_day=TimeOfDay(data["time_of_day"]),
            habitat_features=tuple(data["habitat_features"]),
            habitat_extras=tuple(data.get("habitat_extras", ())),
            metadata_text=data.get("metadata_text"),
        )


@dataclass(frozen=True)
class ObservationRecord:
    asset_id: str
    detections: tuple[Detection, ...]
    scene: SceneContext
    capture: CaptureMetadata | None = None
    species_counts: tuple[tuple[TaxonomyClass, int], ...] = ()
    discrepancies: tuple[str, ...] = ()

    def counts(self) -> dict[str, int]:
        return {c.scientific_name: n for c, n in self.species_counts}

    def species(self) -> list[TaxonomyClass]:
        return [c for c, _ in self.species_counts]

    def to_dict(self) -> dict:
        return {
            "asset_id": self.asset_id,
            "detections": [d.to_dict() for d in self.detections],
            "species_counts": self.counts(),
            "discrepancies": list(self.discrepancies),
            "capture": None if self.capture is None else self.capture.to_dict(),
            "scene": self.scene.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict, taxonomy: Taxonomy | None = None) -> "ObservationRecord":
        tax = taxonomy or default_taxonomy()
        return cls(
            asset_id=data["asset_id"],
            detections=tuple(Detection.from_dict(d, tax) for d in data["detections"]),
            scene=SceneContext.from_dict(data["scene"], tax),
            capture=None if data.get("capture") is None else CaptureMetadata.from_dict(data["capture"]),
            species_counts=tuple((tax.lookup(k), int(v)) for k, v in data["species_counts"].items()),
            discrepancies=tuple(data.get("discrepancies", ())),
        )


# --------------------------------------------------------------------------- parsing


def _clauses(text: str) -> list[tuple[int, str]]:
    out, start = [], 0
    for m in _CLAUSE_SPLIT.finditer(text):
        out.append((start, text[start:m.start()]))
        start = m.end()
    out.append((start, text[start:]))
    return out


def _negated(clause: str, pos: int) -> bool:
    return any(tok.lower() in NEGATIONS for tok in _TOKEN.findall(clause[:pos]))


def _term_pattern(terms: Sequence[str]) -> re.Pattern:
    alts = "|".join(re.escape(t) for t in sorted(terms, key=lambda t: (-len(t), t)))
    return re.compile(rf"(?<![A-Za-z0-9])(?:{alts})(?![A-Za-z0-9])", re.IGNORECASE)


_HABITAT_LOOKUP = {term: tag for tag, terms in HABITAT_VOCAB.items() for term in terms}
_HABITAT_RE = _term_pattern(list(_HABITAT_LOOKUP))
_EXTRA_RE = _term_pattern(EXTRA_SCENE_TERMS)
_TIME_RE = _term_pattern(NIGHT_WORDS + DAY_WORDS)


def _species_pattern(taxonomy: Taxonomy) -> re.Pattern:
    alts = "|".join(re.escape(name) for name, _ in taxonomy.name_index())
    return re.compile(rf"(?<![A-Za-z0-9])(?P<name>{alts})(?:es|s)?(?![A-Za-z0-9])", re.IGNORECASE)


_SPECIES_RE_CACHE: dict[int, re.Pattern] = {}


def _pattern_for(tax: Taxonomy) -> re.Pattern:
    pattern = _SPECIES_RE_CACHE.get(id(tax))
    if pattern is None:
        pattern = _SPECIES_RE_CACHE[id(tax)] = _species_pattern(tax)
    return pattern


def species_mentions(text: str, taxonomy: Taxonomy | None = None) -> Counter[TaxonomyClass]:
    """How often each class is named in ``text`` (any name or alias, plurals included)."""
    tax = taxonomy or default_taxonomy()
    out: Counter[TaxonomyClass] = Counter()
    for m in _pattern_for(tax).finditer(text):
        cls = tax.get(m["name"])
        if cls is not None:
            out[cls] += 1
    return out


def _count_before(prefix: str) -> int:
    """Cardinal in the last three words before a mention (default 1)."""
    for tok in reversed(_TOKEN.findall(prefix)[-3:]):
        low = tok.lower()
        if low.isdigit():
            return int(low)
        if low in NUMBER_WORDS:
            return NUMBER_WORDS[low]
    return 1


def parse_scene(raw: str, taxonomy: Taxonomy | None = None) -> SceneContext:
    """Rule-based extraction of species counts, time of day, habitat tags and stamp."""
    tax = taxonomy or default_taxonomy()
    pattern = _pattern_for(tax)

    first_text: dict[TaxonomyClass, str] = {}
    counts: dict[TaxonomyClass, int] = {}
    habitat: dict[str, None] = {}
    extras: dict[str, None] = {}
    time_of_day = TimeOfDay.UNKNOWN

    for _, clause in _clauses(raw):
        last_end = 0
        for m in pattern.finditer(clause):
            if _negated(clause, m.start()):
                continue
            cls = tax.get(m["name"])
            if cls is None:
                continue
            n = _count_before(clause[last_end:m.start()])
            last_end = m.end()
            first_text.setdefault(cls, m.group(0))
            counts[cls] = max(counts.get(cls, 0), max(n, 1))
        for m in _HABITAT_RE.finditer(clause):
            if not _negated(clause, m.start()):
                habitat.setdefault(_HABITAT_LOOKUP[m.group(0).lower()], None)
        for m in _EXTRA_RE.finditer(clause):
            if not _negated(clause, m.start()):
                extras.setdefault(m.group(0).lower(), None)
        if time_of_day is TimeOfDay.UNKNOWN:
            for m in _TIME_RE.finditer(clause):
                if _negated(clause, m.start()):
                    continue
                time_of_day = TimeOfDay.NIGHT if m.group(0).lower() in NIGHT_WORDS else TimeOfDay.DAY
                break

    ordered_habitat = tuple(tag for tag in HABITAT_VOCAB if tag in habitat)
    return SceneContext(
        raw_text=raw,
        species_read=tuple(SpeciesRead(first_text[c], c, counts[c]) for c in first_text),
        time_of_day=time_of_day,
        habitat_features=ordered_habitat,
        habitat_extras=tuple(extras),
        metadata_text=find_stamp(raw),
    )


def fuse(
    detections: Sequence[Detection], scene: SceneContext, asset_id: str = ""
) -> ObservationRecord:
    """Merge detector output with scene context; the detector decides the species counts."""
    counter = Counter(d.label for d in detections)
    species_counts = tuple(sorted(counter.items(), key=lambda kv: kv[0].scientific_name))
    capture = None
    if scene.metadata_text:
        try:
            capture = parse_capture_metadata(scene.metadata_text)
        except MalformedStamp:
            capture = None
    discrepancies = tuple(s.label.scientific_name for s in scene.species_read if s.label not in counter)
    return ObservationRecord(
        asset_id=asset_id,
        detections=tuple(detections),
        scene=scene,
        capture=capture,
        species_counts=species_counts,
        discrepancies=discrepancies,
    )


# --------------------------------------------------------------------------- client


@dataclass(frozen=True)
class VlmEndpointConfig:
    base_url: str = "http://localhost:8001"
    timeout: float = 60.0
    prompt: str = DEFAULT_PROMPT


class VlmClient:
    def __init__(self, cfg: VlmEndpointConfig, *, transport: httpx.BaseTransport | None = None):
        self.cfg = cfg
        self._http = httpx.Client(base_url=cfg.base_url, timeout=cfg.timeout, transport=transport)

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def describe(self, image: AnnotatedImage | bytes, prompt: str | None = None) -> str:
        prompt = prompt or self.cfg.prompt
        if not prompt.strip():
            raise ValueError("prompt must be non-empty")
        png = image.png if isinstance(image, AnnotatedImage) else image
        body = {"image_b64": base64.b64encode(png).decode("ascii"), "prompt": prompt}
        try:
            resp = self._http.post("/v1/describe", json=body)
        except httpx.TimeoutException as exc:
            raise EndpointTimeout(f"vision-language endpoint timed out: {exc}") from exc
        except httpx.TransportError as exc:
            raise EndpointUnreachable(f"vision-language endpoint unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise EndpointMalformedResponse(f"vision-language endpoint returned HTTP {resp.status_code}")
        try:
            text = resp.json()["text"]
        except (ValueError, KeyError, TypeError) as exc:
            raise EndpointMalformedResponse("response lacks 'text'") from exc
        if not isinstance(text, str) or not text.strip():
            raise EmptyResponse("vision-language endpoint returned no text")
        return text.rstrip()


def describe(
    image: AnnotatedImage,
    prompt: str,
    cfg: VlmEndpointConfig,
    *,
    transport: httpx.BaseTransport | None = None,
) -> str:
    with VlmClient(cfg, transport=transport) as client:
        return client.describe(image, prompt)


# --------------------------------------------------------------------------- mock


def number_word(n: int) -> str:
    return _WORD_FOR.get(n, str(n))


def _join(items: Sequence[str]) -> str:
    if len(items) <= 1:
        return "".join(items)
    return ", ".join(items[:-1]) + " and " + items[-1]


def _strip_confidence(label: str) -> str:
    return re.sub(r"\s+\d+(?:\.\d+)?$", "", label.strip())


@dataclass
class MockVlmEndpoint:
    """Fixture-driven stand-in for the vision-language model.

    Reads the detector labels carried in the annotated PNG when they are
    legible and OCR errors are off. Otherwise it falls back to guessing from
    the per-asset scene script, getting each animal wrong with probability
    ``error_rate`` (seeded per asset). Scene scripts follow
    ``{"species": [{"name", "count"}], "time_of_day", "habitat", "stamp"}``.
    """

    scenes: Mapping[str, dict]
    ocr_error: bool = False
    error_rate: float = 0.5
    seed: int = 0
    taxonomy: Taxonomy = field(default_factory=default_taxonomy)
    fixed_text: str | None = None

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, **kwargs) -> "MockVlmEndpoint":
        scenes = {}
        for asset in manifest.assets:
            path = asset.sidecar_path(SCENE_SUFFIX)
            if path.exists():
                scenes[asset.asset_id] = json.loads(path.read_text("utf-8"))
        return cls(scenes, **kwargs)

    def _rng(self, asset_id: str) -> random.Random:
        digest = hashlib.sha256(f"{self.seed}:{asset_id}".encode()).digest()
        return random.Random(int.from_bytes(digest[:8], "big"))

    def _read_labels(self, labels: Sequence[str]) -> str:
        counts = Counter(_strip_confidence(label) for label in labels)
        parts = [f"{number_word(n)} {name}" for name, n in counts.items()]
        noun = "label on the bounding box reads" if len(labels) == 1 else "labels on the bounding boxes read"
        return f"The {noun} {_join(parts)}."

    def _guess(self, asset_id: str, scene: dict) -> str:
        rng = self._rng(asset_id)
        animals = [c for c in self.taxonomy if c.kind.value == "animal"]
        guesses: Counter[str] = Counter()
        unknown = 0
        for entry in scene.get("species", []):
            true = self.taxonomy.lookup(entry["name"])
            for _ in range(int(entry.get("count", 1))):
                if rng.random() >= self.error_rate:
                    guesses[true.common_name.lower()] += 1
                elif rng.random() < 0.5:
                    unknown += 1
                else:
                    others = [c for c in animals if c != true]
                    guesses[others[rng.randrange(len(others))].common_name.lower()] += 1
        sentences = []
        if guesses:
            parts = [f"{number_word(n)} {name}" for name, n in guesses.items()]
            sentences.append(f"The animals appear to be {_join(parts)}.")
        if unknown:
            sentences.append(f"{number_word(unknown).capitalize()} animal(s) could not be identified.")
        if not sentences:
            sentences.append("There are no clearly identifiable animals in the image.")
        return " ".join(sentences)

    def compose(self, png: bytes) -> str:
        if self.fixed_text is not None:
            return self.fixed_text
        asset_id, labels, legible = decode_png_meta(png)
        scene = self.scenes.get(asset_id or "", {})
        if labels and legible and not self.ocr_error:
            parts = [self._read_labels(labels)]
        else:
            parts = [self._guess(asset_id or "", scene)]
        tod = scene.get("time_of_day")
        if tod == "night":
            parts.append("The image was taken in the dark.")
        elif tod == "day":
            parts.append("The image was taken during the day.")
        habitat = list(scene.get("habitat", []))
        if habitat:
            parts.append(f"The environment includes {_join(habitat)}.")
        if scene.get("stamp"):
            parts.append(f"The overlay text reads {scene['stamp']}.")
        return " ".join(parts)

    def handler(self, request: httpx.Request) -> httpx.Response:
        if request.method != "POST" or request.url.path != "/v1/describe":
            return httpx.Response(404, json={"detail": "not found"})
        try:
            body = json.loads(request.content)
            png = base64.b64decode(body["image_b64"], validate=True)
            if not str(body["prompt"]).strip():
                raise ValueError("empty prompt")
        except (ValueError, KeyError, TypeError):
            return httpx.Response(422, json={"detail": "malformed request"})
        return httpx.Response(200, json={"text": self.compose(png)})

    def transport(self) -> httpx.MockTransport:
        return httpx.MockTransport(self.handler)
