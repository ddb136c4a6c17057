"""End-to-end orchestration: detect, annotate, describe, fuse, ask, report, evaluate.

Assets are processed by a bounded worker pool; results are written by the
calling thread in manifest order, so stores are byte-identical across runs
whatever the scheduling.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from typing import Callable

import httpx

from trapline.annotate import AnnotatedImage, render_overlays
from trapline.app.config import PipelineConfig, RetrySettings
from trapline.app.store import (
    ALPACA_FILE,
    EVAL_FILE,
    MANIFEST_FILE,
    REPORT_FILE,
    TIMINGS_FILE,
    RunStore,
)
from trapline.context import MockVlmEndpoint, ObservationRecord, VlmClient, fuse, parse_scene
from trapline.detect import DetectionResult, DetectorClient, MockDetectorEndpoint
from trapline.errors import EndpointError, FatalConfig, NoFacts, RootNotFound, SchemaViolation, TraplineError, UnknownClass
from trapline.ingest import DatasetManifest, ImageAsset, scan_directory
from trapline.metrics import (
    ConfusionMatrix,
    confusion_matrix,
    evaluate_detections,
    evaluation_report,
    f1_confidence_sweep,
    pair_labels,
)
from trapline.qa import (
    AnswerRecord,
    Question,
    RemoteAnswerer,
    TemplateAnswerer,
    ask,
    get_question,
    subject_name,
)
from trapline.rag import DEFAULT_EMBEDDER, Corpus, RemoteEmbedder, load_corpus
from trapline.report import dumps_alpaca, render_report, synthesize, to_alpaca

log = logging.getLogger(__name__)

OK = "ok"
BLANK = "blank_filtered"
FAILED = "failed"

SWEEP_GRID = tuple(round(i * 0.01, 2) for i in range(101))


@dataclass(frozen=True)
class AssetStatus:
    asset_id: str
    path: str
    status: str
    reason: str | None = None

    def to_dict(self) -> dict:
        d = {"asset_id": self.asset_id, "path": self.path, "status": self.status}
        if self.reason is not None:
            d["reason"] = self.reason
        return d


@dataclass
class RunManifest:
    run_id: str
    config: dict
    statuses: list[AssetStatus]
    totals: dict[str, int] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    report: str | None = None
    path: str | None = None

    @property
    def seed(self) -> int:
        return self.config["seed"]

    @property
    def counts(self) -> dict[str, int]:
        out = {"ingested": len(self.statuses), OK: 0, BLANK: 0, FAILED: 0}
        for s in self.statuses:
            out[s.status] += 1
        return out

    def to_dict(self) -> dict:
        """Deterministic part of the manifest; wall-clock timings live in their own file."""
        return {
            "run_id": self.run_id,
            "seed": self.seed,
            "config": self.config,
            "counts": self.counts,
            "totals": self.totals,
            "statuses": [s.to_dict() for s in self.statuses],
            "warnings": self.warnings,
            "report": self.report,
        }


def with_retry(fn: Callable, retry: RetrySettings, sleep: Callable[[float], None] = time.sleep):
    """Call ``fn``; retriable endpoint errors get exponential backoff."""
    for attempt in range(retry.attempts):
        try:
            return fn()
        except EndpointError as exc:
            if not exc.retriable or attempt == retry.attempts - 1:
                raise
            delay = min(retry.max_delay, retry.base_delay * 2 ** attempt)
            log.info("retrying after %s (attempt %d, %.2fs)", type(exc).__name__, attempt + 1, delay)
            sleep(delay)
    raise AssertionError("unreachable")


def failure_reason(exc: BaseException) -> str:
    return f"{type(exc).__name__}: {exc}"


@dataclass
class AssetOutcome:
    asset: ImageAsset
    status: str
    reason: str | None = None
    detection: DetectionResult | None = None
    annotated: AnnotatedImage | None = None
    observation: ObservationRecord | None = None
    answers: list[AnswerRecord] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    error: BaseException | None = field(default=None, repr=False)


class Pipeline:
    """Clients and shared read-only state for processing assets."""

    def __init__(
        self,
        cfg: PipelineConfig,
        manifest: DatasetManifest,
        *,
        detector_transport: httpx.BaseTransport | None = None,
        vlm_transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.cfg = cfg
        self.manifest = manifest
        self.sleep = sleep
        if detector_transport is None and cfg.detector.mock:
            detector_transport = MockDetectorEndpoint.from_manifest(
                manifest, noise=cfg.detector.mock_noise(cfg.seed)
            ).transport()
        if vlm_transport is None and cfg.vlm.mock:
            vlm_transport = MockVlmEndpoint.from_manifest(
                manifest, ocr_error=cfg.vlm.ocr_error, error_rate=cfg.vlm.error_rate, seed=cfg.seed
            ).transport()
        self.detector = DetectorClient(cfg.detector.endpoint(), transport=detector_transport)
        self.vlm = VlmClient(cfg.vlm.endpoint(), transport=vlm_transport)
        self.corpus = load_corpus(cfg.corpus) if cfg.corpus else Corpus(())
        self.embedder = RemoteEmbedder(**cfg.embedder) if cfg.embedder else DEFAULT_EMBEDDER
        self.answerer = RemoteAnswerer(cfg.generator_url) if cfg.generator_url else TemplateAnswerer()
        try:
            self.questions = [get_question(q) for q in cfg.questions]
        except KeyError as exc:
            raise FatalConfig(str(exc)) from exc

    def close(self) -> None:
        self.detector.close()
        self.vlm.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def answered_at(self) -> datetime:
        if self.cfg.run_date:
            return datetime.combine(date.fromisoformat(self.cfg.run_date), datetime.min.time(), timezone.utc)
        return datetime.now(timezone.utc).replace(microsecond=0)

    def _retry(self, fn):
        return with_retry(fn, self.cfg.retry, self.sleep)

    # individual stages -------------------------------------------------

    def detect(self, asset: ImageAsset, image: bytes | None = None) -> DetectionResult:
        data = asset.read_bytes() if image is None else image
        return self._retry(lambda: self.detector.detect(asset, data))

    def annotate(self, asset: ImageAsset, detection: DetectionResult, image: bytes | None = None) -> AnnotatedImage:
        data = asset.read_bytes() if image is None else image
        return render_overlays(asset.asset_id, data, detection.detections)

    def describe(self, annotated: AnnotatedImage) -> str:
        return self._retry(lambda: self.vlm.describe(annotated))

    def questions_for(self, obs: ObservationRecord) -> list[Question]:
        questions = list(self.questions)
        if self.cfg.synthesize:
            try:
                questions += synthesize(obs)
            except NoFacts:
                pass
        return questions

    def answer(self, obs: ObservationRecord, question: Question) -> AnswerRecord:
        result = self._retry(lambda: ask(
            obs,
            question,
            self.corpus,
            self.embedder,
            self.answerer,
            max_docs=self.cfg.max_docs,
            k_passages=self.cfg.k_passages,
            chunk_size=self.cfg.chunk_size,
            overlap=self.cfg.overlap,
        ))
        return AnswerRecord(
            asset_id=obs.asset_id,
            question_id=question.question_id,
            question=question.template,
            tuple=result,
            answered_at=self.answered_at,
            topic=question.topic,
            subject=subject_name(obs),
        )

    # whole asset --------------------------------------------------------

    def observe(self, asset: ImageAsset, image: bytes | None = None, *, answer: bool = True) -> AssetOutcome:
        """One asset through every stage. Never raises for per-asset trouble."""
        out = AssetOutcome(asset, FAILED)
        clock = time.perf_counter
        try:
            data = asset.read_bytes() if image is None else image
            t = clock()
            out.detection = self.detect(asset, data)
            out.timings["detect"] = clock() - t
            if out.detection.blank:
                out.status = BLANK
                return out
            t = clock()
            out.annotated = self.annotate(asset, out.detection, data)
            out.timings["annotate"] = clock() - t
            t = clock()
            text = self.describe(out.annotated)
            out.timings["describe"] = clock() - t
            obs = fuse(out.detection.detections, parse_scene(text), asset.asset_id)
            if answer:
                t = clock()
                out.answers = [self.answer(obs, q) for q in self.questions_for(obs)]
                out.timings["answer"] = clock() - t
            out.observation = obs
            out.status = OK
        except (TraplineError, OSError, ValueError) as exc:
            log.warning("asset %s failed: %s", asset.path, failure_reason(exc))
            out.status, out.reason, out.error = FAILED, failure_reason(exc), exc
            out.observation, out.answers = None, []
        return out


def scan(cfg: PipelineConfig) -> DatasetManifest:
    cfg.check_paths()
    try:
        return scan_directory(cfg.images, workers=cfg.workers)
    except (RootNotFound, SchemaViolation, UnknownClass) as exc:
        raise FatalConfig(f"cannot ingest {cfg.images}: {exc}") from exc


def classification_matrix(outcomes: list[AssetOutcome]) -> ConfusionMatrix | None:
    """Species read by the vision-language step against ground truth, per object."""
    records = []
    for o in outcomes:
        if o.asset.sidecar is None:
            continue
        true = [a.label.scientific_name for a in o.asset.sidecar]
        read = []
        if o.observation is not None:
            for s in o.observation.scene.species_read:
                read += [s.label.scientific_name] * s.count
        records += pair_labels(true, read)
    if not records:
        return None
    return confusion_matrix(records)


def evaluate_outcomes(outcomes: list[AssetOutcome], iou_threshold: float) -> dict | None:
    labelled = [o for o in outcomes if o.asset.sidecar is not None]
    if not labelled:
        return None
    gts = {o.asset.asset_id: list(o.asset.sidecar) for o in labelled}
    preds = {o.asset.asset_id: list(o.detection.detections) if o.detection else [] for o in labelled}
    detection = evaluate_detections(preds, gts, iou_threshold)
    sweep = f1_confidence_sweep(preds, gts, SWEEP_GRID, iou_threshold)
    return evaluation_report(detection, classification_matrix(labelled), sweep)


def run_pipeline(
    cfg: PipelineConfig,
    *,
    detector_transport: httpx.BaseTransport | None = None,
    vlm_transport: httpx.BaseTransport | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> RunManifest:
    """Process every asset under ``cfg.images`` into a new run directory."""
    started = time.perf_counter()
    manifest = scan(cfg)
    store = RunStore.create(cfg.output_root)
    outcomes: list[AssetOutcome] = []
    with Pipeline(cfg, manifest, detector_transport=detector_transport, vlm_transport=vlm_transport, sleep=sleep) as pipe:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            for outcome in pool.map(pipe.observe, manifest.assets):
                outcomes.append(outcome)
                _persist(store, outcome)

    timings: dict[str, float] = {}
    for o in outcomes:
        for k, v in o.timings.items():
            timings[k] = timings.get(k, 0.0) + v

    answers = [a for o in outcomes for a in o.answers]
    run_date = cfg.run_date or date.today().isoformat()
    entries = to_alpaca(answers, run_date)
    store.write_text(ALPACA_FILE, dumps_alpaca(entries))
    report_name = None
    if entries:
        _, markdown = render_report(entries, cfg.report_title, generated_on=run_date)
        store.write_bytes(REPORT_FILE, markdown)
        report_name = REPORT_FILE

    evaluation = evaluate_outcomes(outcomes, cfg.iou_threshold)
    if evaluation is not None:
        store.write_json(EVAL_FILE, {"run_id": store.run_id, "seed": cfg.seed, **evaluation})

    root = manifest.root
    statuses = [
        AssetStatus(o.asset.asset_id, o.asset.path.relative_to(root).as_posix(), o.status, o.reason)
        for o in outcomes
    ]
    run = RunManifest(
        run_id=store.run_id,
        config=cfg.snapshot(),
        statuses=statuses,
        totals={
            "detections": sum(len(o.detection.detections) for o in outcomes if o.detection),
            "observations": sum(o.observation is not None for o in outcomes),
            "answers": len(answers),
            "alpaca_entries": len(entries),
        },
        warnings=list(manifest.warnings),
        report=report_name,
        path=str(store.path),
    )
    timings["total"] = time.perf_counter() - started
    run.timings = timings
    store.write_json(MANIFEST_FILE, run.to_dict())
    store.write_json(TIMINGS_FILE, timings)
    return run


def _persist(store: RunStore, o: AssetOutcome) -> None:
    if o.detection is not None:
        store.append("detection", o.detection.to_dict(), o.asset.asset_id)
    if o.annotated is not None and o.status == OK:
        store.write_bytes(f"annotated/{o.asset.asset_id[:16]}.png", o.annotated.png)
    if o.observation is not None:
        store.append("observation", o.observation.to_dict(), o.asset.asset_id)
    for a in o.answers:
        store.append("answer", a.to_dict(), a.asset_id)
