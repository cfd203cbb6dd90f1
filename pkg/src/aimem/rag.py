"""Summary-augmented BM25 retrieval with query rewrite and embedding rerank.

Pipeline: BM25 over body + generated summary -> provider rewrites the
question from the top hits -> BM25 again with the rewritten question ->
embedding cosine rerank -> generation over the final contexts.

BM25 scoring (Lucene form)::

    idf(t)      = ln(1 + (N - df(t) + 0.5) / (df(t) + 0.5))
    score(d, q) = sum over query terms t (repeats included) of
                  idf(t) * tf(t, d) * (k1 + 1) / (tf(t, d) + k1 * (1 - b + b * len(d) / avgdl))

Terms are lowercased ``\\w+`` runs.
"""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import DEFAULT_COUNTER, Corpus, TokenCounter, render_item
from .errors import EmptyCorpus, ProviderError, UserError
from .providers import ChatMessage, Provider

log = logging.getLogger(__name__)

_TERM_RE = re.compile(r"\w+")

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
INITIAL_K = 20
FINAL_K = 5
REWRITE_HITS = 3


def terms(text: str) -> list[str]:
    return _TERM_RE.findall(text.lower())


@dataclass(frozen=True)
class IndexedDoc:
    doc_id: str
    body: str
    summary: str
    token_count: int
    term_freqs: dict[str, int] = field(hash=False, compare=False)
    summary_missing: bool = False

    @property
    def text(self) -> str:
        return f"{self.body}\n\nSummary: {self.summary}" if self.summary else self.body


SUMMARY_PROMPT = "Summarize the following personal note in two or three sentences.\n\n{text}"


@dataclass
class BM25Index:
    docs: list[IndexedDoc]
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B
    doc_freq: dict[str, int] = field(default_factory=dict)
    avgdl: float = 0.0

    def __post_init__(self):
        if not self.doc_freq:
            df: Counter = Counter()
            for d in self.docs:
                df.update(d.term_freqs.keys())
            self.doc_freq = dict(df)
        if self.docs and not self.avgdl:
            self.avgdl = sum(d.token_count for d in self.docs) / len(self.docs)
        self._by_id = {d.doc_id: d for d in self.docs}

    def __len__(self) -> int:
        return len(self.docs)

    def doc(self, doc_id: str) -> IndexedDoc:
        return self._by_id[doc_id]

    def idf(self, term: str) -> float:
        n = len(self.docs)
        df = self.doc_freq.get(term, 0)
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def score(self, query_terms: Sequence[str], doc: IndexedDoc) -> float:
        total = 0.0
        norm = self.k1 * (1.0 - self.b + self.b * doc.token_count / self.avgdl)
        for t in query_terms:
            tf = doc.term_freqs.get(t, 0)
            if tf == 0:
                continue
            total += self.idf(t) * (tf * (self.k1 + 1.0)) / (tf + norm)
        return total

    def to_dict(self) -> dict:
        return {
            "k1": self.k1,
            "b": self.b,
            "docs": [
                {"doc_id": d.doc_id, "body": d.body, "summary": d.summary,
                 "summary_missing": d.summary_missing}
                for d in self.docs
            ],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BM25Index":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        docs = [_make_doc(d["doc_id"], d["body"], d["summary"], d.get("summary_missing", False))
                for d in data["docs"]]
        return cls(docs, k1=data.get("k1", DEFAULT_K1), b=data.get("b", DEFAULT_B))


def _make_doc(doc_id: str, body: str, summary: str, missing: bool = False) -> IndexedDoc:
    toks = terms(body) + terms(summary)
    return IndexedDoc(doc_id, body, summary, len(toks), dict(Counter(toks)), missing)


def build_index(
    corpus: Corpus, provider: Provider | None, k1: float = DEFAULT_K1, b: float = DEFAULT_B
) -> BM25Index:
    """Index every item; each gets a provider summary appended to its terms.

    A failed summary call leaves the doc indexed on its body alone, flagged
    ``summary_missing``.
    """
    if not corpus.items:
        raise EmptyCorpus("cannot index an empty corpus")
    docs = []
    for item in corpus.items:
        body = render_item(item)
        summary, missing = "", True
        if provider is not None:
            try:
                summary = provider.complete(
                    [ChatMessage("user", SUMMARY_PROMPT.format(text=body))], temperature=0.0
                ).text.strip()
                missing = not summary
            except ProviderError as exc:
                log.warning("summary failed for %s: %s", item.id, exc)
        docs.append(_make_doc(item.id, body, summary, missing))
    return BM25Index(docs, k1=k1, b=b)


@dataclass(frozen=True)
class RankedHit:
    doc_id: str
    lexical_score: float
    embedding_score: float | None = None
    rank: int = 0


def lexical_retrieve(index: BM25Index, query: str, k: int = INITIAL_K) -> list[RankedHit]:
    if k < 1:
        raise UserError("k must be >= 1")
    if not query or not query.strip():
        raise UserError("query must be non-empty")
    q = terms(query)
    scored = [(index.score(q, d), d.doc_id) for d in index.docs]
    scored.sort(key=lambda s: (-s[0], s[1]))
    return [RankedHit(doc_id, score, None, rank) for rank, (score, doc_id) in enumerate(scored[:k], start=1)]


@dataclass(frozen=True)
class Rewrite:
    text: str
    fallback: bool = False


REWRITE_PROMPT = (
    "Rewrite the user's question so it can be answered by searching their notes. "
    "Use the retrieved notes below for names, dates and wording. Reply with the "
    "rewritten question only.\n\nQuestion: {question}\n\nRetrieved notes:\n{hits}"
)


def rewrite_query(query: str, top_hits: Sequence[RankedHit], provider: Provider, index: BM25Index) -> Rewrite:
    if not top_hits:
        raise UserError("rewrite needs at least one hit")
    listing = "\n\n".join(f"[{i}] {index.doc(h.doc_id).text}" for i, h in enumerate(top_hits, start=1))
    try:
        text = provider.complete(
            [ChatMessage("user", REWRITE_PROMPT.format(question=query, hits=listing))], temperature=0.0
        ).text.strip()
    except ProviderError as exc:
        log.warning("query rewrite failed, keeping original: %s", exc)
        return Rewrite(query, fallback=True)
    if not text:
        log.warning("empty rewrite, keeping original")
        return Rewrite(query, fallback=True)
    return Rewrite(text)


@dataclass(frozen=True)
class Rerank:
    hits: list[RankedHit]
    fallback: bool = False


def embed_rerank(query: str, hits: Sequence[RankedHit], embedder: Provider, index: BM25Index) -> Rerank:
    """Stable sort of ``hits`` by cosine(query, body + summary), descending."""
    if not hits:
        raise UserError("rerank needs at least one hit")
    try:
        vecs = embedder.embed([query] + [index.doc(h.doc_id).text for h in hits])
    except ProviderError as exc:
        log.warning("embedding failed, keeping lexical order: %s", exc)
        return Rerank(list(hits), fallback=True)
    qv = vecs[0]
    qn = float(np.linalg.norm(qv))
    sims = []
    for v in vecs[1:]:
        dn = float(np.linalg.norm(v))
        sims.append(float(np.dot(qv, v)) / (qn * dn) if qn and dn else 0.0)
    order = sorted(range(len(hits)), key=lambda i: -sims[i])  # sorted() is stable
    return Rerank(
        [replace(hits[i], embedding_score=sims[i], rank=r) for r, i in enumerate(order, start=1)]
    )


ANSWER_PROMPT = (
    "Answer the user's question using their notes below. If the notes do not "
    "contain the answer, say so.\n\nNotes:\n{contexts}\n\nQuestion: {question}"
)


def _answer_messages(query: str, contexts: Sequence[str]) -> list[ChatMessage]:
    listing = "\n\n".join(f"[{i}] {c}" for i, c in enumerate(contexts, start=1))
    return [ChatMessage("user", ANSWER_PROMPT.format(contexts=listing, question=query))]


def answer(query: str, contexts: Sequence[str], provider: Provider) -> str:
    """Generate over ``contexts`` (best first), dropping the lowest-ranked ones until the prompt fits."""
    ctx = list(contexts)
    messages = _answer_messages(query, ctx)
    while ctx and provider.prompt_tokens(messages) > provider.config.max_context_tokens:
        dropped = ctx.pop()
        log.info("dropping lowest-ranked context (%d chars) to fit %s", len(dropped), provider.name)
        messages = _answer_messages(query, ctx)
    return provider.complete(messages).text


@dataclass
class RagTrace:
    question: str
    initial: list[RankedHit]
    rewrite: Rewrite | None = None
    final: list[RankedHit] = field(default_factory=list)
    answer: str = ""
    degraded: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


class RagPlusPlus:
    """The full pipeline, usable as a benchmark method adapter via :meth:`adapter`."""

    def __init__(
        self,
        index: BM25Index,
        generator: Provider | None,
        embedder: Provider | None,
        initial_k: int = INITIAL_K,
        final_k: int = FINAL_K,
        rewrite_hits: int = REWRITE_HITS,
    ):
        self.index = index
        self.generator = generator
        self.embedder = embedder
        self.initial_k = initial_k
        self.final_k = final_k
        self.rewrite_hits = rewrite_hits

    def run(self, question: str) -> RagTrace:
        initial = lexical_retrieve(self.index, question, self.initial_k)
        trace = RagTrace(question, initial)
        query = question
        if self.generator is not None:
            trace.rewrite = rewrite_query(question, initial[: self.rewrite_hits], self.generator, self.index)
            query = trace.rewrite.text
        pool = lexical_retrieve(self.index, query, self.initial_k) if query != question else initial
        if self.embedder is not None:
            pool = embed_rerank(query, pool, self.embedder, self.index).hits
        trace.final = pool[: self.final_k]
        contexts = [self.index.doc(h.doc_id).text for h in trace.final]
        try:
            if self.generator is None:
                raise ProviderError("no generator configured")
            trace.answer = answer(question, contexts, self.generator)
        except ProviderError as exc:
            log.warning("generation failed, returning retrieved context: %s", exc)
            trace.degraded = True
            trace.answer = "\n\n".join(contexts)
        return trace

    def ask(self, question: str) -> str:
        return self.run(question).answer

    def adapter(self, name: str = "rag++") -> "MethodAdapter":
        budget = self.generator.config.max_context_tokens if self.generator else None
        return MethodAdapter(name, self.ask, budget)


@dataclass(frozen=True)
class MethodAdapter:
    """A named question -> answer function; any compared method plugs in through this."""

    name: str
    answer_fn: Callable[[str], str]
    context_budget: int | None = None

    def answer(self, question: str) -> str:
        return self.answer_fn(question)


LONG_CONTEXT_PROMPT = "Here are the user's notes, oldest first:\n\n{context}\n\nQuestion: {question}"


def long_context_adapter(
    corpus: Corpus, provider: Provider, name: str = "long-context",
    counter: TokenCounter = DEFAULT_COUNTER, reserve: int = 512,
) -> MethodAdapter:
    """Whole-history baseline: newest items that fit the provider window, then one call."""
    from .corpus import assemble_haystack

    budget = provider.config.max_context_tokens - reserve
    haystack = assemble_haystack(corpus, budget, counter)

    def _answer(question: str) -> str:
        msg = ChatMessage("user", LONG_CONTEXT_PROMPT.format(context=haystack.rendered_text, question=question))
        return provider.complete([msg]).text

    return MethodAdapter(name, _answer, provider.config.max_context_tokens)
