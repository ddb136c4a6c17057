"""HTTP surface over a completed run store."""

from __future__ import annotations

import base64
import binascii
import io
import threading

import httpx
from fastapi import FastAPI, HTTPException
from fastapi.responses import PlainTextResponse
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, model_validator

from trapline.app.config import PipelineConfig
from trapline.app.pipeline import BLANK, FAILED, Pipeline, scan
from trapline.app.store import MANIFEST_FILE, REPORT_FILE, RunStore
from trapline.context import ObservationRecord
from trapline.errors import EndpointError, FatalConfig
from trapline.ingest import ImageAsset, asset_id_for
from trapline.qa import Question, ask, get_question


class AskRequest(BaseModel):
    asset_id: str
    question_id: str | None = None
    question: str | None = None

    @model_validator(mode="after")
    def _one_question(self):
        if (self.question_id is None) == (self.question is None):
            raise ValueError("give exactly one of question_id or question")
        if self.question is not None and not self.question.strip():
            raise ValueError("question must be non-empty")
        return self


class AnalyzeRequest(BaseModel):
    image_b64: str


class ServiceState:
    """Observations from the latest run plus anything analysed since."""

    def __init__(self, cfg: PipelineConfig, pipeline: Pipeline):
        self.cfg = cfg
        self.pipeline = pipeline
        self.observations: dict[str, ObservationRecord] = {}
        self.write_lock = threading.Lock()
        runs = RunStore.list_runs(cfg.output_root)
        if runs:
            store = RunStore.open(cfg.output_root, runs[-1])
            for rec in store.records("observation"):
                obs = ObservationRecord.from_dict(rec.payload)
                self.observations[obs.asset_id] = obs


def create_app(
    cfg: PipelineConfig,
    *,
    detector_transport: httpx.BaseTransport | None = None,
    vlm_transport: httpx.BaseTransport | None = None,
) -> FastAPI:
    manifest = scan(cfg)
    pipeline = Pipeline(cfg, manifest, detector_transport=detector_transport, vlm_transport=vlm_transport)
    state = ServiceState(cfg, pipeline)
    app = FastAPI(title="trapline", version="0.1.0")
    app.state.trapline = state

    @app.get("/v1/runs")
    def runs() -> list[dict]:
        out = []
        for run_id in RunStore.list_runs(cfg.output_root):
            store = RunStore.open(cfg.output_root, run_id)
            if store.exists(MANIFEST_FILE):
                out.append(store.read_json(MANIFEST_FILE))
        return out

    @app.get("/v1/report/{run_id}", response_class=PlainTextResponse)
    def report(run_id: str):
        try:
            store = RunStore.open(cfg.output_root, run_id)
        except FileNotFoundError:
            raise HTTPException(404, f"unknown run {run_id!r}")
        if not store.exists(REPORT_FILE):
            raise HTTPException(404, f"run {run_id!r} has no report")
        return PlainTextResponse(store.read_text(REPORT_FILE), media_type="text/markdown; charset=utf-8")

    @app.post("/v1/ask")
    def ask_endpoint(req: AskRequest) -> dict:
        obs = state.observations.get(req.asset_id)
        if obs is None:
            raise HTTPException(404, f"unknown asset {req.asset_id!r}")
        if req.question_id is not None:
            try:
                question = get_question(req.question_id)
            except KeyError:
                raise HTTPException(404, f"unknown question {req.question_id!r}")
        else:
            question = Question.custom(req.question)
        try:
            result = ask(
                obs, question, pipeline.corpus, pipeline.embedder, pipeline.answerer,
                max_docs=cfg.max_docs, k_passages=cfg.k_passages,
                chunk_size=cfg.chunk_size, overlap=cfg.overlap,
            )
        except EndpointError as exc:
            raise HTTPException(503, f"dependency unavailable: {exc}")
        return {"asset_id": obs.asset_id, "question_id": question.question_id, **result.to_dict()}

    @app.post("/v1/analyze")
    def analyze(req: AnalyzeRequest) -> dict:
        try:
            data = base64.b64decode(req.image_b64, validate=True)
            with Image.open(io.BytesIO(data)) as im:
                width, height = im.size
        except (binascii.Error, ValueError, UnidentifiedImageError):
            raise HTTPException(422, "image_b64 is not a decodable image")
        asset = ImageAsset(asset_id_for(data), cfg.images / "<upload>", width, height)
        with state.write_lock:
            outcome = pipeline.observe(asset, data, answer=False)
            if outcome.status == FAILED:
                if isinstance(outcome.error, EndpointError):
                    raise HTTPException(503, outcome.reason)
                raise HTTPException(422, outcome.reason or "analysis failed")
            body = {"asset_id": asset.asset_id, "status": outcome.status}
            if outcome.status == BLANK:
                return body
            state.observations[asset.asset_id] = outcome.observation
            return {**body, "observation": outcome.observation.to_dict()}

    return app


def serve(cfg: PipelineConfig, host: str = "127.0.0.1", port: int = 8080) -> None:
    import uvicorn

    if not RunStore.list_runs(cfg.output_root):
        raise FatalConfig(f"no completed run under {cfg.output_root}; run the pipeline first")
    uvicorn.run(create_app(cfg), host=host, port=port)

