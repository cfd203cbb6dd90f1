from __future__ import annotations

import math
import random
import re

import numpy as np
import pytest

from aimem.corpus import Corpus, render_item
from aimem.errors import EmptyCorpus, TransportError, UserError
from aimem.providers import mock_provider
from aimem.rag import (
    BM25Index,
    RankedHit,
    RagPlusPlus,
    answer,
    build_index,
    embed_rerank,
    lexical_retrieve,
    long_context_adapter,
    rewrite_query,
)

from conftest import WORDS, note, random_corpus


def bm25_oracle(docs: dict[str, str], query: str, k1=1.2, b=0.75) -> dict[str, float]:
    """Textbook BM25 with the Lucene idf, written out without shared helpers."""
    toks = {d: re.findall(r"\w+", t.lower()) for d, t in docs.items()}
    n = len(docs)
    avgdl = sum(len(t) for t in toks.values()) / n
    out = {}
    for d, t in toks.items():
        s = 0.0
        for q in re.findall(r"\w+", query.lower()):
            tf = t.count(q)
            if not tf:
                continue
            df = sum(1 for other in toks.values() if q in other)
            idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
            s += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(t) / avgdl))
        out[d] = s
    return out


def summarizer(messages):
    text = messages[0].content
    return "Summary: " + " ".join(sorted(set(re.findall(r"[a-z]+", text.lower())))[:4])


@pytest.mark.parametrize("seed", range(5))
def test_bm25_matches_oracle(seed):
    rng = random.Random(seed)
    corpus = random_corpus(rng, rng.randint(2, 20))
    index = build_index(corpus, mock_provider("s", responder=summarizer))
    docs = {d.doc_id: d.body + " " + d.summary for d in index.docs}
    for _ in range(5):
        query = " ".join(rng.choice(WORDS) for _ in range(rng.randint(1, 5)))
        expected = bm25_oracle(docs, query)
        hits = lexical_retrieve(index, query, k=len(docs))
        for h in hits:
            assert abs(h.lexical_score - expected[h.doc_id]) <= 1e-9
        order = sorted(expected, key=lambda d: (-expected[d], d))
        assert [h.doc_id for h in hits] == order


def test_repeated_query_terms_count():
    corpus = Corpus.from_items([note(1, "apple pie"), note(2, "banana bread"), note(3, "cherry tart")])
    index = build_index(corpus, None)
    one = lexical_retrieve(index, "apple", 1)[0].lexical_score
    two = lexical_retrieve(index, "apple apple", 1)[0].lexical_score
    assert two == pytest.approx(2 * one)


def test_index_save_load_and_flags(tmp_path):
    corpus = Corpus.from_items([note(1, "apple pie"), note(2, "banana bread")])
    flaky = mock_provider("s", {"default": "a summary"}, failures=1, failure_error=TransportError)
    index = build_index(corpus, flaky)
    assert [d.summary_missing for d in index.docs] == [True, False]
    path = tmp_path / "index.json"
    index.save(path)
    loaded = BM25Index.load(path)
    assert lexical_retrieve(loaded, "bread") == lexical_retrieve(index, "bread")
    with pytest.raises(EmptyCorpus):
        build_index(Corpus("u"), None)
    with pytest.raises(UserError):
        lexical_retrieve(index, "  ")


def _cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (na * nb)


@pytest.mark.parametrize("seed", range(5))
def test_rerank_matches_bruteforce(seed):
    rng = random.Random(seed)
    corpus = random_corpus(rng, 12)
    index = build_index(corpus, None)
    hits = lexical_retrieve(index, "apple river garden", 12)
    emb = mock_provider("e", embedding_dim=6)
    res = embed_rerank("apple river garden", hits, emb, index)
    from aimem.providers import hash_embedding

    q = hash_embedding("apple river garden", 6)
    sims = {h.doc_id: _cosine(q, hash_embedding(index.doc(h.doc_id).text, 6)) for h in hits}
    for h in res.hits:
        assert abs(h.embedding_score - sims[h.doc_id]) <= 1e-9
    lex_pos = {h.doc_id: i for i, h in enumerate(hits)}
    expected = sorted(sims, key=lambda d: (-sims[d], lex_pos[d]))
    assert [h.doc_id for h in res.hits] == expected


def test_rerank_ties_keep_lexical_order():
    corpus = Corpus.from_items([note(i, f"doc {i}") for i in range(1, 6)])
    index = build_index(corpus, None)
    hits = [RankedHit(f"n{i}", 1.0, None, i) for i in (3, 1, 4, 2, 5)]
    vec = [1.0, 0.0, 0.0]
    table = {"q": vec, **{index.doc(h.doc_id).text: vec for h in hits}}
    res = embed_rerank("q", hits, mock_provider("e", embeddings=table), index)
    assert [h.doc_id for h in res.hits] == ["n3", "n1", "n4", "n2", "n5"]
    failing = mock_provider("e", embed_fails=True)
    fb = embed_rerank("q", hits, failing, index)
    assert fb.fallback and fb.hits == hits


def test_rewrite_fallbacks():
    corpus = Corpus.from_items([note(1, "apple pie")])
    index = build_index(corpus, None)
    hits = lexical_retrieve(index, "apple")
    assert rewrite_query("apple?", hits, mock_provider("r", {"default": "apple pie recipe"}), index).text == "apple pie recipe"
    empty = rewrite_query("apple?", hits, mock_provider("r", {"default": "  "}), index)
    assert empty.fallback and empty.text == "apple?"
    broken = mock_provider("r", failures=9, failure_error=TransportError)
    assert rewrite_query("apple?", hits, broken, index).fallback


def test_answer_drops_low_ranked_contexts():
    p = mock_provider("g", responder=lambda m: str(m[0].content.count("[")), max_context_tokens=60)
    ctx = ["alpha " * 20, "beta " * 20, "gamma " * 20]
    # 29 template tokens + 23 per context: only the best context fits in 60
    assert answer("what?", ctx, p) == "1"
    assert "alpha" in p.transport.calls[-1][0].content


def test_pipeline_end_to_end_and_degraded():
    corpus = Corpus.from_items([note(1, "The lighthouse keeper retired in May."),
                                note(2, "Bought a red bicycle."),
                                note(3, "Trip to the lighthouse with Emmy.")])
    gen = mock_provider("g", {"rules": [{"match": "Rewrite", "response": "lighthouse trip"}],
                              "default": "You went with Emmy."})
    index = build_index(corpus, gen)
    rag = RagPlusPlus(index, gen, mock_provider("e"), initial_k=3, final_k=2)
    trace = rag.run("Who came to the lighthouse?")
    assert trace.answer == "You went with Emmy."
    assert trace.rewrite.text == "lighthouse trip"
    assert len(trace.final) == 2 and all(h.embedding_score is not None for h in trace.final)
    assert rag.adapter("rag++").answer("Who came?") == "You went with Emmy."

    no_gen = RagPlusPlus(index, None, None, final_k=1)
    t2 = no_gen.run("bicycle")
    assert t2.degraded and "bicycle" in t2.answer


def test_long_context_adapter_truncates():
    corpus = random_corpus(random.Random(1), 40)
    p = mock_provider("lc", responder=lambda m: str(len(m[0].content)), max_context_tokens=900)
    adapter = long_context_adapter(corpus, p, reserve=100)
    assert int(adapter.answer("q?")) < sum(len(render_item(i)) for i in corpus.items)
    assert adapter.context_budget == 900
    assert np.isfinite(float(adapter.answer("q?")))
