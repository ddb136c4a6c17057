"""Detector endpoint client, thresholding, optional NMS and corpus statistics.

Wire protocol: ``POST {base_url}/v1/detect`` with ``{"model", "image_b64"}``
answered by ``{"detections": [{"class", "confidence", "bbox"}]}``.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import random
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import httpx

from trapline.domain import BoundingBox, Detection, Taxonomy, default_taxonomy, validate_bbox
from trapline.errors import (
    DegenerateBox,
    EmptyInput,
    EndpointMalformedResponse,
    EndpointTimeout,
    EndpointUnreachable,
    UnknownClass,
)
from trapline.ingest import GT_SUFFIX, DatasetManifest, ImageAsset, asset_id_for
from trapline.metrics import iou

log = logging.getLogger(__name__)

DEFAULT_CONFIDENCE_THRESHOLD = 0.422


@dataclass(frozen=True)
class DetectorEndpointConfig:
    base_url: str = "http://localhost:8000"
    model_name: str = "yolov10x"
    timeout: float = 30.0
    confidence_threshold: float = DEFAULT_CONFIDENCE_THRESHOLD

    def __post_init__(self):
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must be in [0, 1]")


@dataclass(frozen=True)
class DetectionResult:
    asset_id: str
    detections: tuple[Detection, ...]
    latency_ms: float = field(default=0.0, compare=False)

    @property
    def blank(self) -> bool:
        return not self.detections

    def to_dict(self) -> dict:
        return {
            "asset_id": self.asset_id,
            "blank": self.blank,
            "detections": [d.to_dict() for d in self.detections],
        }


def parse_detections(
    payload: object,
    *,
    width: float,
    height: float,
    threshold: float,
    taxonomy: Taxonomy | None = None,
) -> list[Detection]:
    """Validate a detector response body and apply the confidence cut."""
    if not isinstance(payload, dict) or not isinstance(payload.get("detections"), list):
        raise EndpointMalformedResponse("response lacks a 'detections' array")
    out = []
    for i, raw in enumerate(payload["detections"]):
        try:
            conf = float(raw["confidence"])
            box = BoundingBox.from_list(raw["bbox"])
            name = raw["class"]
        except (KeyError, TypeError, ValueError) as exc:
            raise EndpointMalformedResponse(f"detections[{i}] malformed: {exc}") from exc
        if not 0.0 <= conf <= 1.0:
            raise EndpointMalformedResponse(f"detections[{i}] confidence {conf} outside [0, 1]")
        if conf < threshold:
            continue
        try:
            label = (taxonomy or default_taxonomy()).lookup(name)
        except UnknownClass as exc:
            raise EndpointMalformedResponse(f"detections[{i}]: {exc}") from exc
        try:
            box = validate_bbox(box, width, height)
        except DegenerateBox:
            log.warning("dropping degenerate detection %d (%s)", i, raw["bbox"])
            continue
        out.append(Detection(box, label, conf))
    return out


class DetectorClient:
    """Stateless client; pass ``transport`` to talk to an in-process mock."""

    def __init__(
        self,
        cfg: DetectorEndpointConfig,
        *,
        transport: httpx.BaseTransport | None = None,
        taxonomy: Taxonomy | None = None,
    ):
        self.cfg = cfg
        self.taxonomy = taxonomy
        self._http = httpx.Client(base_url=cfg.base_url, timeout=cfg.timeout, transport=transport)

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def post(self, image: bytes) -> dict:
        body = {"model": self.cfg.model_name, "image_b64": base64.b64encode(image).decode("ascii")}
        try:
            resp = self._http.post("/v1/detect", json=body)
        except httpx.TimeoutException as exc:
            raise EndpointTimeout(f"detector timed out: {exc}") from exc
        except httpx.TransportError as exc:
            raise EndpointUnreachable(f"detector unreachable at {self.cfg.base_url}: {exc}") from exc
        if resp.status_code != 200:
            raise EndpointMalformedResponse(f"detector returned HTTP {resp.status_code}")
        try:
            return resp.json()
        except ValueError as exc:
            raise EndpointMalformedResponse("detector returned invalid JSON") from exc

    def detect(self, asset: ImageAsset, image: bytes | None = None) -> DetectionResult:
        start = time.perf_counter()
        payload = self.post(asset.read_bytes() if image is None else image)
        detections = parse_detections(
            payload,
            width=asset.width,
            height=asset.height,
            threshold=self.cfg.confidence_threshold,
            taxonomy=self.taxonomy,
        )
        latency = (time.perf_counter() - start) * 1000.0
        return DetectionResult(asset.asset_id, tuple(detections), latency)


def detect(
    asset: ImageAsset,
    cfg: DetectorEndpointConfig,
    *,
    transport: httpx.BaseTransport | None = None,
) -> DetectionResult:
    with DetectorClient(cfg, transport=transport) as client:
        return client.detect(asset)


def nms(detections: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class suppression for backends that do not do it themselves."""
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError("iou_threshold must be in [0, 1]")
    kept: list[Detection] = []
    for det in sorted(detections, key=lambda d: -d.confidence):
        if all(k.label != det.label or iou(k.box, det.box) < iou_threshold for k in kept):
            kept.append(det)
    return kept


@dataclass(frozen=True)
class DetectionStats:
    images: int
    observations: int
    blank_images: int | None = None

    @property
    def observations_per_image(self) -> float:
        return self.observations / self.images

    @property
    def blank_fraction(self) -> float | None:
        """Share of images with no detection (needs per-image results)."""
        return None if self.blank_images is None else self.blank_images / self.images

    @property
    def implied_blank_fraction(self) -> float:
        """1 - observations/images: the count-based blank estimate, which treats
        every observation as its own image. Clipped at 0."""
        return max(0.0, 1.0 - self.observations_per_image)

    def to_dict(self) -> dict:
        return {
            "images": self.images,
            "observations": self.observations,
            "observations_per_image": self.observations_per_image,
            "blank_fraction": self.blank_fraction,
            "implied_blank_fraction": self.implied_blank_fraction,
        }


def detection_rate_from_counts(images: int, observations: int, blank_images: int | None = None) -> DetectionStats:
    if images <= 0:
        raise EmptyInput("no images")
    return DetectionStats(images, observations, blank_images)


def detection_rate(results: Iterable[DetectionResult]) -> DetectionStats:
    images = observations = blank = 0
    for r in results:
        images += 1
        observations += len(r.detections)
        blank += r.blank
    if images == 0:
        raise EmptyInput("detection_rate needs at least one result")
    return DetectionStats(images, observations, blank)


# --------------------------------------------------------------------------- mock


@dataclass(frozen=True)
class DetectorNoise:
    """Seeded perturbation applied by the mock endpoint."""

    box_jitter: float = 0.0  # max shift as a fraction of box size
    confidence_sd: float = 0.0
    drop_rate: float = 0.0
    false_positive_rate: float = 0.0
    seed: int = 0


class MockDetectorEndpoint:
    """In-process detector that answers with each image's ground-truth sidecar.

    Images are recognised by content hash. Sidecar objects may carry an
    optional ``confidence`` (default ``default_confidence``). Unknown images
    get an empty response.
    """

    def __init__(
        self,
        responses: Mapping[str, Sequence[dict]],
        *,
        image_sizes: Mapping[str, tuple[int, int]] | None = None,
        noise: DetectorNoise | None = None,
        default_confidence: float = 0.9,
        taxonomy: Taxonomy | None = None,
    ):
        self.responses = {k: [dict(o) for o in v] for k, v in responses.items()}
        self.image_sizes = dict(image_sizes or {})
        self.noise = noise
        self.default_confidence = default_confidence
        self.taxonomy = taxonomy or default_taxonomy()
        self.calls = 0

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, **kwargs) -> "MockDetectorEndpoint":
        responses, sizes = {}, {}
        for asset in manifest.assets:
            gt_path = asset.sidecar_path(GT_SUFFIX)
            objects = []
            if gt_path.exists():
                objects = json.loads(gt_path.read_text("utf-8")).get("objects", [])
            responses[asset.asset_id] = objects
            sizes[asset.asset_id] = (asset.width, asset.height)
        return cls(responses, image_sizes=sizes, **kwargs)

    def respond(self, image: bytes) -> dict:
        asset_id = asset_id_for(image)
        objects = self.responses.get(asset_id, [])
        dets = [
            {
                "class": o["class"],
                "confidence": float(o.get("confidence", self.default_confidence)),
                "bbox": [float(v) for v in o["bbox"]],
            }
            for o in objects
        ]
        if self.noise is not None:
            dets = self._perturb(asset_id, dets)
        return {"detections": dets}

    def _perturb(self, asset_id: str, dets: list[dict]) -> list[dict]:
        n = self.noise
        digest = hashlib.sha256(f"{n.seed}:{asset_id}".encode()).digest()
        rng = random.Random(int.from_bytes(digest[:8], "big"))
        out = []
        for d in dets:
            if rng.random() < n.drop_rate:
                continue
            x0, y0, x1, y1 = d["bbox"]
            w, h = x1 - x0, y1 - y0
            dx = rng.uniform(-n.box_jitter, n.box_jitter) * w
            dy = rng.uniform(-n.box_jitter, n.box_jitter) * h
            conf = min(1.0, max(0.0, d["confidence"] + rng.gauss(0.0, n.confidence_sd)))
            out.append({"class": d["class"], "confidence": conf, "bbox": [x0 + dx, y0 + dy, x1 + dx, y1 + dy]})
        if rng.random() < n.false_positive_rate:
            width, height = self.image_sizes.get(asset_id, (640, 480))
            animals = [c for c in self.taxonomy if c.kind.value == "animal"]
            cls = animals[rng.randrange(len(animals))]
            bw, bh = rng.uniform(0.05, 0.3) * width, rng.uniform(0.05, 0.3) * height
            x0, y0 = rng.uniform(0, width - bw), rng.uniform(0, height - bh)
            out.append({
                "class": cls.scientific_name,
                "confidence": rng.uniform(0.05, 0.6),
                "bbox": [x0, y0, x0 + bw, y0 + bh],
            })
        return out

    def handler(self, request: httpx.Request) -> httpx.Response:
        self.calls += 1
        if request.method != "POST" or request.url.path != "/v1/detect":
            return httpx.Response(404, json={"detail": "not found"})
        try:
            body = json.loads(request.content)
            image = base64.b64decode(body["image_b64"], validate=True)
        except (ValueError, KeyError, TypeError):
            return httpx.Response(422, json={"detail": "malformed request"})
        return httpx.Response(200, json=self.respond(image))

    def transport(self) -> httpx.MockTransport:
        return httpx.MockTransport(self.handler)
