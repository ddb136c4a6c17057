"""Append-only run store: one JSONL file per record kind under ``runs/<run_id>/``."""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

KIND_FILES = {
    "observation": "observations.jsonl",
    "answer": "answers.jsonl",
    "detection": "detections.jsonl",
}
ALPACA_FILE = "alpaca.json"
EVAL_FILE = "eval.json"
MANIFEST_FILE = "manifest.json"
TIMINGS_FILE = "timings.json"
REPORT_FILE = "report.md"

_RUN_RE = re.compile(r"^run-(\d{4,})$")


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=False, separators=(",", ":"))


@dataclass(frozen=True)
class StoreRecord:
    kind: str
    run_id: str
    asset_id: str | None
    payload: dict

    def to_dict(self) -> dict:
        return {"kind": self.kind, "run_id": self.run_id, "asset_id": self.asset_id, "payload": self.payload}


class RunStore:
    """Single-writer store for one run. Appends are serialized by a lock."""

    def __init__(self, output_root: str | Path, run_id: str):
        self.output_root = Path(output_root)
        self.run_id = run_id
        self.path = self.output_root / "runs" / run_id
        self._lock = threading.Lock()

    @staticmethod
    def runs_dir(output_root: str | Path) -> Path:
        return Path(output_root) / "runs"

    @classmethod
    def list_runs(cls, output_root: str | Path) -> list[str]:
        root = cls.runs_dir(output_root)
        if not root.is_dir():
            return []
        return sorted(p.name for p in root.iterdir() if p.is_dir() and _RUN_RE.match(p.name))

    @classmethod
    def create(cls, output_root: str | Path) -> "RunStore":
        """Allocate the next sequential run directory (``run-0001``, ...)."""
        root = cls.runs_dir(output_root)
        root.mkdir(parents=True, exist_ok=True)
        existing = [int(_RUN_RE.match(n).group(1)) for n in cls.list_runs(output_root)]
        n = max(existing, default=0) + 1
        while True:
            run_id = f"run-{n:04d}"
            try:
                (root / run_id).mkdir()
                return cls(output_root, run_id)
            except FileExistsError:
                n += 1

    @classmethod
    def open(cls, output_root: str | Path, run_id: str) -> "RunStore":
        store = cls(output_root, run_id)
        if not _RUN_RE.match(run_id) or not store.path.is_dir():
            raise FileNotFoundError(f"no run {run_id!r} under {output_root}")
        return store

    @classmethod
    def latest(cls, output_root: str | Path) -> "RunStore":
        runs = cls.list_runs(output_root)
        if not runs:
            raise FileNotFoundError(f"no runs under {output_root}")
        return cls(output_root, runs[-1])

    def append(self, kind: str, payload: dict, asset_id: str | None = None) -> StoreRecord:
        record = StoreRecord(kind, self.run_id, asset_id, payload)
        line = _dumps(record.to_dict()) + "\n"
        with self._lock, open(self.path / KIND_FILES[kind], "a", encoding="utf-8") as fh:
            fh.write(line)
        return record

    def records(self, kind: str) -> Iterator[StoreRecord]:
        path = self.path / KIND_FILES[kind]
        if not path.exists():
            return
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    yield StoreRecord(d["kind"], d["run_id"], d["asset_id"], d["payload"])

    def write_text(self, name: str, text: str) -> Path:
        path = self.path / name
        with self._lock:
            path.write_text(text, encoding="utf-8")
        return path

    def write_bytes(self, name: str, data: bytes) -> Path:
        path = self.path / name
        path.parent.mkdir(parents=True, exist_ok=True)
        with self._lock:
            path.write_bytes(data)
        return path

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(obj, indent=2, ensure_ascii=False) + "\n")

    def read_json(self, name: str):
        return json.loads((self.path / name).read_text("utf-8"))

    def read_text(self, name: str) -> str:
        return (self.path / name).read_text("utf-8")

    def exists(self, name: str) -> bool:
        return (self.path / name).exists()
