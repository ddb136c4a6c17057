"""Alpaca-format question/answer entries and markdown reports."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from datetime import date
from typing import Iterable, Sequence

from trapline.context import ObservationRecord, TimeOfDay
from trapline.errors import NoFacts
from trapline.qa import AnswerRecord, Question, display_name, primary_species

log = logging.getLogger(__name__)

DEFAULT_TITLE = "Wildlife Species Report"
INTRODUCTION = (
    "Each section below pairs a question asked about a camera-trap image with the answer "
    "assembled from the image's detections, its scene description and the reference corpus. "
    "Sections cover species identity, conservation status, abundance and the surrounding environment."
)


@dataclass(frozen=True)
class AlpacaEntry:
    instruction: str
    input: str
    output: str
    heading: str
    date: str

    def __post_init__(self):
        if not self.instruction.strip():
            raise ValueError("instruction must be non-empty")
        if not self.output.strip():
            raise ValueError("output must be non-empty")
        date.fromisoformat(self.date)  # raises on anything but YYYY-MM-DD

    def to_dict(self) -> dict:
        return {
            "instruction": self.instruction,
            "input": self.input,
            "output": self.output,
            "metadata": {"heading": self.heading, "date": self.date},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AlpacaEntry":
        meta = data["metadata"]
        return cls(data["instruction"], data.get("input", ""), data["output"], meta["heading"], meta["date"])


def serialize_entry(entry: AlpacaEntry) -> str:
    """Canonical form: fixed key order, two-space indent, non-ASCII kept literal."""
    return json.dumps(entry.to_dict(), indent=2, ensure_ascii=False)


def parse_entry(text: str) -> AlpacaEntry:
    return AlpacaEntry.from_dict(json.loads(text))


def dumps_alpaca(entries: Sequence[AlpacaEntry]) -> str:
    return json.dumps([e.to_dict() for e in entries], indent=2, ensure_ascii=False) + "\n"


def loads_alpaca(text: str) -> list[AlpacaEntry]:
    return [AlpacaEntry.from_dict(d) for d in json.loads(text)]


# --------------------------------------------------------------------------- synthesis


def synthesize_questions(obs: ObservationRecord) -> list[str]:
    """Fact-keyed question templates for one observation."""
    return [q.template for q in synthesize(obs)]


def synthesize(obs: ObservationRecord) -> list[Question]:
    """Like :func:`synthesize_questions`, with topics attached for headings."""
    scene = obs.scene
    has_scene = scene.time_of_day is not TimeOfDay.UNKNOWN or bool(scene.habitat_features or scene.habitat_extras)
    if not obs.species_counts and not has_scene:
        raise NoFacts(f"observation {obs.asset_id!r} has no populated facts")

    out = []
    for i, (cls, _) in enumerate(obs.species_counts):
        name = display_name(cls)
        out.append(Question.custom(
            f"What is the IUCN conservation status of the {name}?", f"S{i + 1}-status", "Conservation Status"
        ))
        out.append(Question.custom(
            f"What is the average weight of the {name}?", f"S{i + 1}-weight", "Species Information"
        ))
    if has_scene:
        primary = primary_species(obs)
        where = f" with the {display_name(primary)}" if primary else ""
        out.append(Question.custom(
            f"What are the environmental factors observed in the image{where}?", "scene", "Environmental Factors"
        ))
    if obs.species_counts:
        out.append(Question.custom(
            "How many animals of each species are in the image?", "count", "Species Count"
        ))
    return out


def heading_for(record: AnswerRecord) -> str:
    return f"{record.topic}: {record.subject or 'Unidentified'} Image"


def to_alpaca(records: Iterable[AnswerRecord], run_date: date | str) -> list[AlpacaEntry]:
    day = run_date if isinstance(run_date, str) else run_date.isoformat()
    entries = []
    for r in records:
        if not r.tuple.answer.strip():
            log.warning("skipping %s/%s: empty answer", r.asset_id, r.question_id)
            continue
        entries.append(AlpacaEntry(r.question, "", r.tuple.answer, heading_for(r), day))
    return entries


# --------------------------------------------------------------------------- rendering


@dataclass(frozen=True)
class ReportDocument:
    title: str
    generated_on: str
    sections: tuple[tuple[str, str, str], ...]

    def markdown(self) -> str:
        lines = [f"# {self.title}", "", f"Generated on: {self.generated_on}", "", "## Introduction", "", INTRODUCTION, ""]
        for heading, body, day in self.sections:
            lines += [f"## {heading}", "", body, "", f"Date: {day}", ""]
        return "\n".join(lines)


def render_report(
    entries: Sequence[AlpacaEntry], title: str = DEFAULT_TITLE, generated_on: str | None = None
) -> tuple[ReportDocument, bytes]:
    """One section per entry, in order. ``generated_on`` defaults to the latest entry date."""
    if not entries:
        raise ValueError("render_report needs at least one entry")
    generated_on = generated_on or max(e.date for e in entries)
    doc = ReportDocument(title, generated_on, tuple((e.heading, e.output, e.date) for e in entries))
    return doc, doc.markdown().encode("utf-8")
