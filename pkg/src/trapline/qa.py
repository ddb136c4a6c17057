"""Question answering over observation records and retrieved passages."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from datetime import datetime
from typing import Callable, Protocol, Sequence

import httpx
import numpy as np

from trapline.context import ObservationRecord, TimeOfDay, number_word, species_mentions
from trapline.domain import TaxonomyClass
from trapline.errors import AnswererUnavailable, EmptyCorpus, EmptyText
from trapline.rag import (
    Corpus,
    Embedder,
    RetrievalResult,
    ScoredPassage,
    content_words,
    extract_keywords,
    retrieve,
)

SPECIES = "species"
COUNT = "count"
TIME_OF_DAY = "time_of_day"
HABITAT = "habitat"
EXTERNAL = "external_knowledge"

NO_EVIDENCE = "No external evidence was found in the corpus for this question."


@dataclass(frozen=True)
class Question:
    question_id: str
    template: str
    required_facts: tuple[str, ...]
    topic: str = "Observation"

    def __post_init__(self):
        if not self.template.strip():
            raise ValueError("question template must be non-empty")

    @classmethod
    def custom(cls, text: str, question_id: str = "custom", topic: str | None = None) -> "Question":
        return cls(question_id, text, infer_facts(text), topic or infer_topic(text))


_BANK = (
    Question(
        "Q1",
        "Read the label on the binding box to identify the animal. What is the species identified "
        "in the image, and what is its IUCN conservation status?",
        (SPECIES, EXTERNAL),
        "Species Identification and Conservation Status",
    ),
    Question(
        "Q2",
        "Read the label on the binding box to identify the animal. What is the average weight of "
        "the species identified, and does this species have any notable characteristics or behaviours?",
        (SPECIES, EXTERNAL),
        "Species Information",
    ),
    Question(
        "Q3",
        "Was the image taken during the day or night, and what environmental factors can be "
        "observed (e.g., forest, bush, water sources)?",
        (TIME_OF_DAY, HABITAT),
        "Environmental Factors",
    ),
    Question(
        "Q4",
        "Read the label on the binding box to identify the animal. How does the species identified "
        "in the image compare to other species in the same habitat in terms of size, behaviour, and diet?",
        (SPECIES, EXTERNAL),
        "Species Comparison",
    ),
    Question(
        "Q5",
        "Read the label on the binding box to identify animals. Can you identify other animals or "
        "objects in the image, such as nearby trees, water bodies, or structures?",
        (SPECIES, HABITAT),
        "Scene Contents",
    ),
    Question(
        "Q6",
        "Read the labels on the binding boxes to identify animals. What animals are in the image "
        "and how many are there of each animal species identified?",
        (SPECIES, COUNT),
        "Species Count",
    ),
    Question(
        "Q7",
        "Based on the species and its habits, what predictions can be made about its activity at "
        "the time the camera trap image was taken (e.g., hunting, foraging, resting)?",
        (SPECIES, TIME_OF_DAY, EXTERNAL),
        "Activity Prediction",
    ),
    Question(
        "Q8",
        "Read the label on the binding box around the animal to determine the species. What "
        "potential threats, either natural or human-induced, are most relevant to the species in "
        "the image, given its current IUCN status and environment?",
        (SPECIES, HABITAT, EXTERNAL),
        "Threat Assessment",
    ),
    Question(
        "Q9",
        "Read the label on the binding box around the animal to determine the species. What is the "
        "species role in the ecosystem, and how does its presence affect other species or the "
        "environment in the area where the image was captured?",
        (SPECIES, EXTERNAL),
        "Ecosystem Role",
    ),
    Question(
        "Q10",
        "Read the label on the binding box around the animal to determine the species. What are "
        "the known predators or threats to the species in the image, and are there any visible "
        "indicators in the environment that suggest the presence of these threats?",
        (SPECIES, HABITAT, EXTERNAL),
        "Predators and Threats",
    ),
)


def question_bank() -> list[Question]:
    return list(_BANK)


def get_question(question_id: str) -> Question:
    for q in _BANK:
        if q.question_id.lower() == question_id.lower():
            return q
    raise KeyError(f"no built-in question {question_id!r}")


_EXTERNAL_CUES = {
    "weight", "weigh", "weighs", "iucn", "status", "conservation", "predator", "predators",
    "threat", "threats", "diet", "eat", "eats", "behaviour", "behavior", "behaviours",
    "ecosystem", "role", "characteristics", "compare", "lifespan", "range", "population",
}
_TOPIC_RULES = (
    ({"iucn", "conservation", "status"}, "Conservation Status"),
    ({"weight", "weigh", "weighs"}, "Species Weight"),
    ({"environmental", "environment", "habitat"}, "Environmental Factors"),
    ({"many", "count", "number"}, "Species Count"),
    ({"predator", "predators", "threat", "threats"}, "Predators and Threats"),
)


def infer_facts(text: str) -> tuple[str, ...]:
    words = set(re.findall(r"[a-z]+", text.lower()))
    facts = [SPECIES]
    if {"many", "count", "number"} & words:
        facts.append(COUNT)
    if {"day", "night", "time", "dark"} & words:
        facts.append(TIME_OF_DAY)
    if {"environment", "environmental", "habitat", "surroundings", "trees", "water", "vegetation"} & words:
        facts.append(HABITAT)
    if _EXTERNAL_CUES & words:
        facts.append(EXTERNAL)
    return tuple(facts)


def infer_topic(text: str) -> str:
    words = set(re.findall(r"[a-z]+", text.lower()))
    for cues, topic in _TOPIC_RULES:
        if cues & words:
            return topic
    return "Observation"


@dataclass(frozen=True)
class AnswerTuple:
    answer: str
    keywords: tuple[str, ...]
    passages: tuple[ScoredPassage, ...] = ()

    def to_dict(self) -> dict:
        return {
            "answer": self.answer,
            "keywords": list(self.keywords),
            "passages": [p.to_dict() for p in self.passages],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AnswerTuple":
        return cls(
            data["answer"],
            tuple(data["keywords"]),
            tuple(ScoredPassage.from_dict(p) for p in data["passages"]),
        )


@dataclass(frozen=True)
class AnswerRecord:
    asset_id: str
    question_id: str
    question: str
    tuple: AnswerTuple
    answered_at: datetime
    topic: str = "Observation"
    subject: str = ""

    def to_dict(self) -> dict:
        return {
            "asset_id": self.asset_id,
            "question_id": self.question_id,
            "question": self.question,
            "topic": self.topic,
            "subject": self.subject,
            "answered_at": self.answered_at.isoformat(),
            **self.tuple.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AnswerRecord":
        return cls(
            asset_id=data["asset_id"],
            question_id=data["question_id"],
            question=data["question"],
            tuple=AnswerTuple.from_dict(data),
            answered_at=datetime.fromisoformat(data["answered_at"]),
            topic=data.get("topic", "Observation"),
            subject=data.get("subject", ""),
        )


# --------------------------------------------------------------------------- composition

_PROPER_WORDS = {"african", "south"}


def display_name(cls: TaxonomyClass) -> str:
    """Common name for running prose: lower case except geographic adjectives."""
    return " ".join(w if w.lower() in _PROPER_WORDS else w.lower() for w in cls.common_name.split())


def plural(name: str) -> str:
    head, _, last = name.rpartition(" ")
    if last.endswith(("s", "x", "z", "ch", "sh")):
        last += "es"
    elif last.endswith("y") and last[-2:-1] not in "aeiou":
        last = last[:-1] + "ies"
    elif not last.endswith("beest"):  # wildebeest is its own plural
        last += "s"
    return f"{head} {last}" if head else last


def primary_species(obs: ObservationRecord) -> TaxonomyClass | None:
    if not obs.species_counts:
        return None
    return sorted(obs.species_counts, key=lambda kv: (-kv[1], kv[0].scientific_name))[0][0]


def subject_name(obs: ObservationRecord) -> str:
    cls = primary_species(obs)
    return cls.common_name.title() if cls else "Unidentified"


def _join(items: Sequence[str]) -> str:
    if len(items) <= 1:
        return "".join(items)
    return ", ".join(items[:-1]) + " and " + items[-1]


def species_sentence(obs: ObservationRecord) -> str:
    if not obs.species_counts:
        return "No animals were detected in the image."
    names = [f"the {display_name(c)} ({c.scientific_name})" for c, _ in obs.species_counts]
    verb = "is" if len(names) == 1 else "are"
    return f"The species identified in the image {verb} {_join(names)}."


def count_sentence(obs: ObservationRecord) -> str:
    if not obs.species_counts:
        return "The image contains no detected animals."
    parts = [
        f"{number_word(n)} {plural(display_name(c)) if n > 1 else display_name(c)}"
        for c, n in obs.species_counts
    ]
    return f"The image contains {_join(parts)}."


def time_sentence(obs: ObservationRecord) -> str:
    tod = obs.scene.time_of_day
    if tod is TimeOfDay.DAY:
        return "The image was taken during the day."
    if tod is TimeOfDay.NIGHT:
        return "The image was taken at night."
    return "It could not be determined whether the image was taken during the day or at night."


def habitat_sentence(obs: ObservationRecord) -> str:
    features = [HABITAT_PROSE.get(t, t) for t in obs.scene.habitat_features] + list(obs.scene.habitat_extras)
    if not features:
        return "No distinct environmental features were identified."
    return f"The environmental factors that can be observed include {_join(features)}."


HABITAT_PROSE = {
    "bush": "bushes",
    "water": "water",
    "road": "a road or track",
    "rock": "rocks",
    "structure": "man-made structures",
}

_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")


def _stem(word: str) -> str:
    """Five-letter prefix: crude, but joins weight/weighs, predator/predators."""
    return word[:5]


def evidence_sentences(
    retrieval: RetrievalResult, question: str, obs: ObservationRecord, limit: int = 2
) -> list[str]:
    """Best-supported sentences from retrieved passages about an observed species.

    A passage counts as being about a species when no other class is named in
    it more often. Sentences are ranked by question-word overlap (counted
    double) plus a bonus for naming the species, then by passage rank and position. With several
    species each gets its own best sentence.
    """
    species = {c for c, _ in obs.species_counts}
    name_words = {w for c in species for n in c.names() for w in content_words(n)}
    cues = {_stem(w) for w in content_words(question) if w not in name_words}
    candidates: dict[TaxonomyClass, list] = {c: [] for c in species}
    for rank, sp in enumerate(retrieval.passages):
        mentions = species_mentions(sp.passage.text)
        if not mentions:
            continue
        top = max(mentions.values())
        owners = [c for c in species if mentions.get(c, 0) == top]
        if not owners:
            continue  # evidence about some other animal
        for pos, sentence in enumerate(_SENTENCE_SPLIT.split(sp.passage.text.strip())):
            sentence = sentence.strip()
            if len(sentence) < 12 or not sentence[0].isupper():
                continue  # fragments cut at chunk edges
            words = {_stem(w) for w in re.findall(r"[a-z0-9]+", sentence.lower())}
            named = species_mentions(sentence)
            for owner in owners:
                score = 2 * len(cues & words) + (owner in named)
                if score > 0:
                    candidates[owner].append((-score, rank, pos, sentence))
    order = sorted(species, key=lambda c: c.scientific_name)
    per_species = limit if len(order) == 1 else 1
    picked: list[str] = []
    for cls in order:
        taken = 0
        for *_, sentence in sorted(candidates[cls]):
            if taken == per_species:
                break
            if sentence not in picked:
                picked.append(sentence)
                taken += 1
    return picked


class Answerer(Protocol):
    def compose(self, obs: ObservationRecord, question: Question, retrieval: RetrievalResult | None) -> str: ...


class TemplateAnswerer:
    """Deterministic composition of observation facts and passage sentences."""

    def compose(self, obs: ObservationRecord, question: Question, retrieval: RetrievalResult | None) -> str:
        facts = question.required_facts
        parts = []
        if COUNT in facts:
            parts.append(count_sentence(obs))
        elif SPECIES in facts:
            parts.append(species_sentence(obs))
        if TIME_OF_DAY in facts:
            parts.append(time_sentence(obs))
        if HABITAT in facts:
            parts.append(habitat_sentence(obs))
        if EXTERNAL in facts:
            evidence = evidence_sentences(retrieval, question.template, obs) if retrieval else []
            if evidence:
                parts.append("According to the retrieved passages: " + " ".join(evidence))
            else:
                parts.append(NO_EVIDENCE)
        return " ".join(parts)


@dataclass
class RemoteAnswerer:
    """``POST {base_url}/v1/generate {"prompt"} -> {"text"}``; only the prose changes."""

    base_url: str
    timeout: float = 60.0
    transport: httpx.BaseTransport | None = field(default=None, repr=False)

    def prompt(self, obs: ObservationRecord, question: Question, retrieval: RetrievalResult | None) -> str:
        lines = [
            "Answer the question using only the facts and passages below.",
            f"Facts: {species_sentence(obs)} {count_sentence(obs)} {time_sentence(obs)} {habitat_sentence(obs)}",
        ]
        for sp in retrieval.passages if retrieval else ():
            lines.append(f"Passage [{sp.passage.doc_id}#{sp.passage.passage_index}]: {sp.passage.text}")
        lines.append(f"Question: {question.template}")
        return "\n".join(lines)

    def compose(self, obs: ObservationRecord, question: Question, retrieval: RetrievalResult | None) -> str:
        try:
            with httpx.Client(base_url=self.base_url, timeout=self.timeout, transport=self.transport) as c:
                resp = c.post("/v1/generate", json={"prompt": self.prompt(obs, question, retrieval)})
            resp.raise_for_status()
            text = resp.json()["text"]
        except (httpx.HTTPError, ValueError, KeyError) as exc:
            raise AnswererUnavailable(f"generation endpoint failed: {exc}") from exc
        return str(text).strip()


Retriever = Callable[..., RetrievalResult]


def ask(
    obs: ObservationRecord,
    q: Question,
    corpus: Corpus | Sequence,
    embedder: Embedder | None = None,
    answerer: Answerer | None = None,
    *,
    max_docs: int = 20,
    k_passages: int = 4,
    chunk_size: int = 800,
    overlap: int = 80,
    retriever: Retriever = retrieve,
) -> AnswerTuple:
    """Answer one question about one observation.

    Retrieval runs only for questions that need external knowledge; the
    returned tuple carries exactly the keywords and passages it used.
    """
    keywords = tuple(extract_keywords(obs, q.template))
    retrieval = None
    if EXTERNAL in q.required_facts:
        try:
            retrieval = retriever(
                corpus, keywords, max_docs, k_passages, embedder, chunk_size=chunk_size, overlap=overlap
            )
        except EmptyCorpus:
            retrieval = RetrievalResult(keywords, ())
    answer = (answerer or TemplateAnswerer()).compose(obs, q, retrieval)
    passages = retrieval.passages if retrieval else ()
    return AnswerTuple(answer, keywords, passages)


# --------------------------------------------------------------------------- scoring


@dataclass(frozen=True)
class TokenScore:
    precision: float
    recall: float
    f1: float


def score_tokens(text: str) -> list[str]:
    return [t for t in re.split(r"[^0-9a-z]+", text.lower()) if t]


def score_answer(candidate: str, reference: str, embedder: Embedder | None = None) -> TokenScore:
    """Greedy token matching: each token takes its best cosine partner on the other side."""
    from trapline.rag import DEFAULT_EMBEDDER

    embedder = embedder or DEFAULT_EMBEDDER
    cand, ref = score_tokens(candidate), score_tokens(reference)
    if not cand or not ref:
        raise EmptyText("both texts need at least one token")

    def matrix(tokens: list[str]) -> np.ndarray:
        vecs = np.vstack([np.asarray(embedder.embed(t), dtype=np.float64) for t in tokens])
        return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)

    sim = np.clip(matrix(cand) @ matrix(ref).T, -1.0, 1.0)
    precision = float(sim.max(axis=1).mean())
    recall = float(sim.max(axis=0).mean())
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return TokenScore(precision, recall, f1)
