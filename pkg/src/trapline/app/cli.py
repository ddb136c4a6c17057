"""``trapline`` command line.

Exit codes: 0 success, 1 some items failed, 2 fatal configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from trapline.app.config import PipelineConfig, load_config
from trapline.app.pipeline import BLANK, FAILED, OK, Pipeline, run_pipeline, scan
from trapline.app.store import ALPACA_FILE, REPORT_FILE, RunStore
from trapline.context import ObservationRecord, fuse, parse_scene
from trapline.domain import BoundingBox, Detection, default_taxonomy
from trapline.errors import FatalConfig, TraplineError
from trapline.ingest import parse_ground_truth, split_dataset
from trapline.metrics import dumps_report, evaluate_detections, evaluation_report, f1_confidence_sweep
from trapline.qa import Question, ask, get_question
from trapline.rag import build_index, chunk
from trapline.report import loads_alpaca, render_report

log = logging.getLogger("trapline")

EXIT_OK, EXIT_ITEMS, EXIT_FATAL = 0, 1, 2


def _emit(obj, out: Path | None = None) -> None:
    text = obj if isinstance(obj, str) else json.dumps(obj, indent=2, ensure_ascii=False) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.workers is not None:
        changes["workers"] = args.workers
    if getattr(args, "output_root", None) is not None:
        changes["output_root"] = args.output_root.resolve()
    return cfg.replace(**changes) if changes else cfg


# --------------------------------------------------------------------------- commands


def cmd_ingest(args) -> int:
    cfg = _config(args)
    manifest = scan(cfg)
    _emit(manifest.to_dict(), args.out)
    return EXIT_ITEMS if manifest.warnings else EXIT_OK


def cmd_split(args) -> int:
    cfg = _config(args)
    manifest = scan(cfg)
    split = split_dataset(manifest, tuple(args.ratios), cfg.seed, stratify=args.stratify)
    _emit({**split.to_dict(), "sizes": list(split.sizes())}, args.out)
    return EXIT_OK


def _stage(args, until: str) -> int:
    cfg = _config(args)
    manifest = scan(cfg)
    failed = 0
    lines = []
    with Pipeline(cfg, manifest) as pipe:
        for asset in manifest.assets:
            rel = asset.path.relative_to(manifest.root).as_posix()
            try:
                det = pipe.detect(asset)
                row = {"path": rel, **det.to_dict()}
                if until != "detect" and not det.blank:
                    annotated = pipe.annotate(asset, det)
                    if args.out is not None and until == "annotate":
                        args.out.mkdir(parents=True, exist_ok=True)
                        (args.out / f"{asset.stem}.annotated.png").write_bytes(annotated.png)
                    row["labels"] = [t for _, t in annotated.rendered_labels]
                    if until == "contextualize":
                        obs = fuse(det.detections, parse_scene(pipe.describe(annotated)), asset.asset_id)
                        row = {"path": rel, **obs.to_dict()}
                row["status"] = BLANK if det.blank else OK
            except TraplineError as exc:
                failed += 1
                row = {"path": rel, "asset_id": asset.asset_id, "status": FAILED, "reason": f"{type(exc).__name__}: {exc}"}
            lines.append(json.dumps(row, ensure_ascii=False))
    text = "\n".join(lines) + "\n"
    if until == "annotate" and args.out is not None:
        sys.stdout.write(text)
    else:
        _emit(text, args.out)
    return EXIT_ITEMS if failed else EXIT_OK


def cmd_detect(args) -> int:
    return _stage(args, "detect")


def cmd_annotate(args) -> int:
    return _stage(args, "annotate")


def cmd_contextualize(args) -> int:
    return _stage(args, "contextualize")


def cmd_index(args) -> int:
    cfg = _config(args)
    cfg.check_paths()
    if cfg.corpus is None:
        raise FatalConfig("config has no corpus")
    with Pipeline(cfg, scan(cfg)) as pipe:
        passages = [p for doc in pipe.corpus for p in chunk(doc, cfg.chunk_size, cfg.overlap)]
        index = build_index(passages, pipe.embedder)
    _emit(index.to_json(), args.out)
    return EXIT_OK


def _open_run(cfg: PipelineConfig, run_id: str | None) -> RunStore:
    try:
        return RunStore.open(cfg.output_root, run_id) if run_id else RunStore.latest(cfg.output_root)
    except FileNotFoundError as exc:
        raise FatalConfig(str(exc)) from exc


def cmd_ask(args) -> int:
    cfg = _config(args)
    store = _open_run(cfg, args.run)
    obs = None
    for rec in store.records("observation"):
        if rec.asset_id == args.asset_id or rec.asset_id.startswith(args.asset_id):
            obs = ObservationRecord.from_dict(rec.payload)
            break
    if obs is None:
        log.error("no observation for asset %s in %s", args.asset_id, store.run_id)
        return EXIT_ITEMS
    question = Question.custom(args.question) if args.question else get_question(args.question_id)
    with Pipeline(cfg, scan(cfg)) as pipe:
        result = ask(
            obs, question, pipe.corpus, pipe.embedder, pipe.answerer,
            max_docs=cfg.max_docs, k_passages=cfg.k_passages, chunk_size=cfg.chunk_size, overlap=cfg.overlap,
        )
    _emit({"asset_id": obs.asset_id, "question_id": question.question_id, **result.to_dict()}, args.out)
    return EXIT_OK


def _load_boxes(path: Path, with_confidence: bool) -> dict[str, list]:
    """``{"images": {id: [...]}}``, ``{id: [...]}`` or ``{id: {"objects": [...]}}``."""
    try:
        data = json.loads(path.read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FatalConfig(f"cannot read {path}: {exc}") from exc
    if isinstance(data, dict) and isinstance(data.get("images"), dict):
        data = data["images"]
    if not isinstance(data, dict):
        raise FatalConfig(f"{path}: expected an object keyed by image id")
    tax = default_taxonomy()
    out = {}
    for image, objs in data.items():
        if isinstance(objs, dict):
            objs = objs.get("objects", objs.get("detections", []))
        if with_confidence:
            out[image] = [
                Detection(BoundingBox.from_list(o["bbox"]), tax.lookup(o["class"]), float(o["confidence"]))
                for o in objs
            ]
        else:
            out[image] = parse_ground_truth({"objects": objs}, taxonomy=tax)
    return out


def cmd_eval(args) -> int:
    # evaluation needs no pipeline config; --config/--seed/--workers are accepted for uniformity
    preds = _load_boxes(args.pred, True)
    gts = _load_boxes(args.gt, False)
    grid = [round(i * args.grid_step, 10) for i in range(int(round(1 / args.grid_step)) + 1)]
    detection = evaluate_detections(preds, gts, args.iou)
    sweep = f1_confidence_sweep(preds, gts, grid, args.iou)
    _emit(dumps_report(evaluation_report(detection, None, sweep)), args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _config(args)
    store = _open_run(cfg, args.run)
    entries = loads_alpaca(store.read_text(ALPACA_FILE)) if store.exists(ALPACA_FILE) else []
    if not entries:
        log.error("run %s has no Alpaca entries", store.run_id)
        return EXIT_ITEMS
    _, markdown = render_report(entries, args.title or cfg.report_title, generated_on=cfg.run_date)
    if args.out is None:
        store.write_bytes(REPORT_FILE, markdown)
        print(store.path / REPORT_FILE)
    else:
        args.out.write_bytes(markdown)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    manifest = run_pipeline(cfg)
    counts = manifest.counts
    print(json.dumps({"run_id": manifest.run_id, "path": manifest.path, "counts": counts, "totals": manifest.totals}))
    return EXIT_ITEMS if counts[FAILED] else EXIT_OK


def cmd_serve(args) -> int:
    from trapline.app.service import serve

    serve(_config(args), args.host, args.port)
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="pipeline config JSON (default: $TRAPLINE_CONFIG)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--workers", type=int, help="override the worker count")
    common.add_argument("--output-root", dest="output_root", type=Path, help="override the output root")
    common.add_argument("--out", type=Path, help="write the result here instead of stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="trapline", description="camera-trap analysis pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("ingest", parents=[common], help="scan the image directory").set_defaults(fn=cmd_ingest)
    p = sub.add_parser("split", parents=[common], help="seeded train/validation/test split")
    p.add_argument("--ratios", type=float, nargs=3, default=(0.8, 0.1, 0.1))
    p.add_argument("--stratify", action="store_true")
    p.set_defaults(fn=cmd_split)
    sub.add_parser("detect", parents=[common], help="run the detector").set_defaults(fn=cmd_detect)
    sub.add_parser("annotate", parents=[common], help="detect and draw overlays (--out DIR)").set_defaults(fn=cmd_annotate)
    sub.add_parser("contextualize", parents=[common], help="detect, annotate, describe, fuse").set_defaults(fn=cmd_contextualize)
    sub.add_parser("index", parents=[common], help="build the passage index").set_defaults(fn=cmd_index)
    p = sub.add_parser("ask", parents=[common], help="ask a question about a stored observation")
    p.add_argument("--asset-id", required=True, help="asset id (or unique prefix)")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--question-id")
    g.add_argument("--question")
    p.add_argument("--run")
    p.set_defaults(fn=cmd_ask)
    p = sub.add_parser("eval", parents=[common], help="evaluate predictions against ground truth")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--grid-step", type=float, default=0.01)
    p.set_defaults(fn=cmd_eval)
    p = sub.add_parser("report", parents=[common], help="render a run's Alpaca file as markdown")
    p.add_argument("--run")
    p.add_argument("--title")
    p.set_defaults(fn=cmd_report)
    sub.add_parser("run", parents=[common], help="full pipeline").set_defaults(fn=cmd_run)
    p = sub.add_parser("serve", parents=[common], help="HTTP service over the latest run")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.set_defaults(fn=cmd_serve)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.fn(args)
    except FatalConfig as exc:
        log.error("fatal: %s", exc)
        return EXIT_FATAL
    except TraplineError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_ITEMS


if __name__ == "__main__":
    raise SystemExit(main())
