from datetime import datetime, timezone

import httpx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trapline.context import fuse, parse_scene
from trapline.errors import AnswererUnavailable, EmptyText
from trapline.fixtures import write_corpus
from trapline.qa import (
    NO_EVIDENCE,
    AnswerRecord,
    AnswerTuple,
    Question,
    RemoteAnswerer,
    ask,
    count_sentence,
    get_question,
    plural,
    question_bank,
    score_answer,
)
from trapline.rag import Corpus, load_corpus, retrieve

TABLE_3_QUESTIONS = {
    "Q1": "Read the label on the binding box to identify the animal. What is the species identified in the "
          "image, and what is its IUCN conservation status?",
    "Q6": "Read the labels on the binding boxes to identify animals. What animals are in the image and how "
          "many are there of each animal species identified?",
}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    write_corpus(root)
    return load_corpus(root)


@pytest.fixture
def rhino_obs(det):
    return fuse([det("rhino", (10 * i, 0, 10 * i + 8, 8)) for i in range(3)], parse_scene("three rhinos"), "r")


def test_bank():
    bank = question_bank()
    assert len(bank) == 10
    assert len({q.question_id for q in bank}) == 10
    assert all(q.template.strip() for q in bank)
    assert "IUCN conservation status" in get_question("Q1").template
    for qid, text in TABLE_3_QUESTIONS.items():
        assert get_question(qid).template == text


def test_unknown_question():
    with pytest.raises(KeyError):
        get_question("Q11")


def test_q1_rhino_near_threatened(rhino_obs, corpus):
    result = ask(rhino_obs, get_question("Q1"), corpus)
    assert "Near Threatened" in result.answer
    assert "rhinoceros" in {p.passage.doc_id for p in result.passages}


def test_q6_counts_without_retrieval(rhino_obs, corpus):
    calls = []

    def spy(*args, **kwargs):
        calls.append(args)
        return retrieve(*args, **kwargs)

    result = ask(rhino_obs, get_question("Q6"), corpus, retriever=spy)
    assert result.answer == "The image contains three rhinoceroses."
    assert calls == [] and result.passages == ()


def test_empty_corpus_gives_no_evidence(rhino_obs):
    result = ask(rhino_obs, get_question("Q1"), Corpus(()))
    assert NO_EVIDENCE in result.answer
    assert result.keywords and result.passages == ()


def test_tuple_is_transparent(rhino_obs, corpus):
    seen = {}

    def spy(corpus_, keywords, *args, **kwargs):
        seen["keywords"] = keywords
        seen["result"] = retrieve(corpus_, keywords, *args, **kwargs)
        return seen["result"]

    for qid in ("Q1", "Q2", "Q8", "Q10"):
        result = ask(rhino_obs, get_question(qid), corpus, retriever=spy)
        assert result.keywords == tuple(seen["keywords"])
        assert result.passages == seen["result"].passages


def test_cited_sentences_come_from_passages(rhino_obs, corpus):
    result = ask(rhino_obs, Question.custom("How much does it weigh?"), corpus)
    evidence = result.answer.split("According to the retrieved passages: ", 1)[1]
    texts = " ".join(p.passage.text for p in result.passages)
    assert "weighs" in evidence
    for sentence in evidence.split(". "):
        assert sentence.rstrip(".") in texts


def test_answers_are_deterministic(rhino_obs, corpus):
    for q in question_bank():
        assert ask(rhino_obs, q, corpus) == ask(rhino_obs, q, corpus)


def test_multi_species_count(det, corpus):
    obs = fuse([det("wildebeest")] * 4 + [det("zebra")] * 2, parse_scene("x"), "w")
    assert count_sentence(obs) == "The image contains four blue wildebeest and two plains zebras."


def test_plural():
    assert [plural(w) for w in ("rhinoceros", "blue wildebeest", "giraffe", "ostrich", "guineafowl")] == [
        "rhinoceroses", "blue wildebeest", "giraffes", "ostriches", "guineafowls"
    ]


def test_remote_answerer(rhino_obs, corpus):
    def handler(request):
        assert request.url.path == "/v1/generate"
        return httpx.Response(200, json={"text": " Generated. "})

    result = ask(rhino_obs, get_question("Q1"), corpus,
                 answerer=RemoteAnswerer("http://g", transport=httpx.MockTransport(handler)))
    assert result.answer == "Generated."
    assert result.passages  # tuple shape unchanged

    down = RemoteAnswerer("http://g", transport=httpx.MockTransport(lambda r: httpx.Response(503)))
    with pytest.raises(AnswererUnavailable):
        ask(rhino_obs, get_question("Q1"), corpus, answerer=down)


def test_answer_record_round_trip(rhino_obs, corpus):
    result = ask(rhino_obs, get_question("Q1"), corpus)
    rec = AnswerRecord("r", "Q1", "q", result, datetime(2024, 10, 23, tzinfo=timezone.utc), "Topic", "Rhinoceros")
    assert AnswerRecord.from_dict(rec.to_dict()) == rec
    assert AnswerTuple.from_dict(result.to_dict()) == result


# --------------------------------------------------------------------------- scoring


class OneHot:
    """Hand-assigned token embeddings for scoring oracles."""

    embedder_id, dimension = "onehot", 4

    def __init__(self, table):
        self.table = table

    def embed(self, text):
        return np.asarray(self.table[text], dtype=float)


def test_score_identical():
    s = score_answer("the zebra grazes", "The zebra grazes.")
    assert s.precision == s.recall == s.f1 == pytest.approx(1.0)


def test_score_orthogonal():
    emb = OneHot({"a": [1, 0, 0, 0], "b": [0, 1, 0, 0]})
    s = score_answer("a", "b", emb)
    assert (s.precision, s.recall, s.f1) == (0.0, 0.0, 0.0)


def test_score_hand_computed():
    # candidate x y, reference x z w
    s2 = 2 ** -0.5
    emb = OneHot({"x": [1, 0, 0, 0], "y": [s2, s2, 0, 0], "z": [0, 1, 0, 0], "w": [0, 0, 1, 0]})
    s = score_answer("x y", "x z w", emb)
    # precision: x->x 1, y->max(x s2, z s2) ; recall: x 1, z s2, w 0
    p, r = (1 + s2) / 2, (1 + s2 + 0) / 3
    assert s.precision == pytest.approx(p)
    assert s.recall == pytest.approx(r)
    assert s.f1 == pytest.approx(2 * p * r / (p + r))


def test_score_empty():
    with pytest.raises(EmptyText):
        score_answer("...", "zebra")


words = st.lists(st.sampled_from(["zebra", "lion", "grass", "near", "threatened", "the", "weighs", "kg"]),
                 min_size=1, max_size=8).map(" ".join)


@given(words, words)
def test_score_symmetry_and_bounds(a, b):
    ab, ba = score_answer(a, b), score_answer(b, a)
    assert ab.precision == pytest.approx(ba.recall)
    assert ab.f1 == pytest.approx(ba.f1)
    for v in (ab.precision, ab.recall, ab.f1):
        assert -1.0 <= v <= 1.0
    if ab.precision > 0 and ab.recall > 0:
        assert min(ab.precision, ab.recall) - 1e-12 <= ab.f1 <= (ab.precision + ab.recall) / 2 + 1e-12
