"""Pilot benchmark: four question categories, 1-5 judging, truncation correction.

Question file: one JSON object per line with ``id``, ``category``
(Memory | Understand | Predict | Recommend), ``question``,
``reference_answer``, ``criteria`` (may be omitted when a criteria file
supplies it per category) and optional ``required_source_dates``
(list of ISO dates the answer depends on).
"""

from __future__ import annotations

import json
import logging
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import date
from pathlib import Path
from typing import Mapping, Sequence

from .corpus import DEFAULT_COUNTER, Corpus, Haystack, TokenCounter, assemble_haystack
from .errors import AimemError, DegenerateVariance, MalformedRecord, UserError
from .niah import ask_for_score
from .providers import ChatMessage, Provider
from .rag import MethodAdapter

log = logging.getLogger(__name__)

CATEGORIES = ("Memory", "Understand", "Predict", "Recommend")
QUESTIONS_PER_CATEGORY = 15


@dataclass(frozen=True)
class BenchQuestion:
    id: str
    category: str
    question: str
    reference_answer: str
    criteria: str
    required_source_dates: tuple[date, ...] = ()

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise UserError(f"question {self.id}: unknown category {self.category!r}")
        if not self.reference_answer.strip():
            raise UserError(f"question {self.id}: empty reference answer")
        if not self.criteria.strip():
            raise UserError(f"question {self.id}: empty criteria")


def load_criteria(path: str | Path) -> dict[str, str]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return {k: v for k, v in data.items() if k in CATEGORIES}


def load_questions(path: str | Path, criteria: Mapping[str, str] | None = None) -> list[BenchQuestion]:
    out = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                crit = rec.get("criteria") or (criteria or {}).get(rec.get("category"), "")
                q = BenchQuestion(
                    id=rec["id"],
                    category=rec["category"],
                    question=rec["question"],
                    reference_answer=rec["reference_answer"],
                    criteria=crit,
                    required_source_dates=tuple(
                        date.fromisoformat(d) for d in rec.get("required_source_dates", ())
                    ),
                )
            except KeyError as exc:
                raise MalformedRecord(f"missing field {exc.args[0]!r}", line=lineno, field=exc.args[0])
            except (ValueError, TypeError) as exc:
                raise MalformedRecord(str(exc), line=lineno)
            if q.id in seen:
                raise MalformedRecord(f"duplicate question id {q.id!r}", line=lineno, field="id")
            seen.add(q.id)
            out.append(q)
    return out


@dataclass
class BenchScore:
    question_id: str
    method: str
    category: str
    rating: int | None = None
    raw_judge: str = ""
    excluded: bool = False
    reason: str = ""
    answer: str = ""

    def __post_init__(self):
        if (self.rating is None) != self.excluded:
            raise UserError("a bench score has a rating iff it is not excluded")

    def to_dict(self) -> dict:
        return asdict(self)


BENCH_JUDGE_TEMPLATE = (
    "You are grading an assistant's answer to a question about a specific user.\n"
    "Rate it from 1 (poor) to 5 (excellent) using these criteria:\n{criteria}\n\n"
    "[Question]\n{question}\n\n[Reference Answer]\n{reference}\n\n[Candidate Answer]\n{answer}\n\n"
    "Only respond with a numerical score from 1 to 5"
)


def judge_bench(question: BenchQuestion, answer: str, judge: Provider) -> tuple[int, str]:
    prompt = BENCH_JUDGE_TEMPLATE.format(
        criteria=question.criteria, question=question.question,
        reference=question.reference_answer, answer=answer or "(no answer)",
    )
    value, raw, _ = ask_for_score(judge, [ChatMessage("user", prompt)], 1, 5)
    return value, raw


def run_bench(
    adapter: MethodAdapter,
    questions: Sequence[BenchQuestion],
    judge: Provider,
    unanswerable: set[str] | frozenset[str] = frozenset(),
    max_parallel: int = 1,
) -> list[BenchScore]:
    """Answer and judge every question; ids in ``unanswerable`` are excluded without calls."""

    def one(q: BenchQuestion) -> BenchScore:
        if q.id in unanswerable:
            return BenchScore(q.id, adapter.name, q.category, excluded=True, reason="truncated")
        try:
            ans = adapter.answer(q.question)
        except AimemError as exc:
            return BenchScore(q.id, adapter.name, q.category, excluded=True,
                              reason=f"answer failed: {type(exc).__name__}: {exc}")
        try:
            rating, raw = judge_bench(q, ans, judge)
        except AimemError as exc:
            return BenchScore(q.id, adapter.name, q.category, excluded=True, answer=ans,
                              reason=f"judge failed: {type(exc).__name__}: {exc}")
        return BenchScore(q.id, adapter.name, q.category, rating, raw, answer=ans)

    if max_parallel > 1:
        with ThreadPoolExecutor(max_workers=max_parallel) as pool:
            return list(pool.map(one, questions))
    return [one(q) for q in questions]


@dataclass(frozen=True)
class Truncation:
    haystack: Haystack
    window_start: date
    window_end: date
    unanswerable: frozenset[str]

    @property
    def kept_ids(self) -> list[str]:
        return [i.item_id for i in self.haystack.items]


def truncate_for_context(
    corpus: Corpus,
    max_tokens: int,
    questions: Sequence[BenchQuestion],
    counter: TokenCounter = DEFAULT_COUNTER,
) -> Truncation:
    """Newest-suffix truncation; a question is lost when all its dates fall outside the kept window."""
    haystack = assemble_haystack(corpus, max_tokens, counter)
    start = haystack.items[0].timestamp.date()
    end = haystack.items[-1].timestamp.date()
    lost = frozenset(
        q.id for q in questions
        if q.required_source_dates
        and all(not start <= d <= end for d in q.required_source_dates)
    )
    return Truncation(haystack, start, end, lost)


def corrected_mean(reported_mean: float, answered: int, total: int) -> float:
    """Rescale a mean over answered questions to the full set (unanswered count as 0)."""
    if answered <= 0:
        raise UserError("answered must be positive")
    if answered > total:
        raise UserError("answered cannot exceed total")
    return reported_mean * answered / total


def overall_mean(category_means: Sequence[float]) -> float:
    if not category_means:
        raise UserError("no category means")
    return math.fsum(category_means) / len(category_means)


def pearson(a: Sequence[float], b: Sequence[float]) -> float:
    if len(a) != len(b):
        raise UserError("pearson needs equal-length inputs")
    if len(a) < 2:
        raise UserError("pearson needs at least two pairs")
    if len(set(a)) < 2 or len(set(b)) < 2:
        raise DegenerateVariance("one side has zero variance")
    return statistics.correlation(a, b)


@dataclass
class MethodResult:
    method: str
    category_means: dict[str, float | None]
    overall: float
    excluded: list[str] = field(default_factory=list)
    corrected: bool = False
    corrected_means: dict[str, float] = field(default_factory=dict)
    label: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MethodResult":
        return cls(**d)


def summarize(scores: Sequence[BenchScore], questions: Sequence[BenchQuestion]) -> MethodResult:
    """Per-category means over rated questions; truncation exclusions get the rescaled mean too."""
    if len(scores) != len(questions):
        raise UserError(f"{len(scores)} scores for {len(questions)} questions")
    method = scores[0].method if scores else ""
    by_cat: dict[str, list[BenchScore]] = {c: [] for c in CATEGORIES}
    for s in scores:
        by_cat[s.category].append(s)
    means: dict[str, float | None] = {}
    corrected: dict[str, float] = {}
    for cat, group in by_cat.items():
        rated = [s.rating for s in group if not s.excluded]
        means[cat] = math.fsum(rated) / len(rated) if rated else None
        truncated = sum(1 for s in group if s.reason == "truncated")
        if truncated and rated:
            corrected[cat] = corrected_mean(means[cat], len(group) - truncated, len(group))
    present = [m for m in means.values() if m is not None]
    overall = overall_mean(present) if present else 0.0
    return MethodResult(
        method, means, overall,
        excluded=sorted(s.question_id for s in scores if s.excluded),
        corrected=bool(corrected), corrected_means=corrected,
    )


def table_rows(results: Sequence[MethodResult]) -> list[list[str]]:
    """Method | Memory | Understand | Predict | Recommend | Average; ``*`` marks inflated means."""
    rows = [["method", *CATEGORIES, "average"]]
    for r in results:
        cells = [r.label or r.method]
        for c in CATEGORIES:
            m = r.category_means.get(c)
            cell = "n/a" if m is None else f"{m:.2f}"
            if c in r.corrected_means:
                cell += "*"
            cells.append(cell)
        cells.append(f"{r.overall:.3f}")
        rows.append(cells)
    return rows


def footnotes(results: Sequence[MethodResult]) -> list[str]:
    notes = []
    for r in results:
        for c, v in r.corrected_means.items():
            m = r.category_means[c]
            notes.append(
                f"{r.label or r.method} {c}: {m:.2f}* excludes truncated questions; "
                f"over all questions it is {v:.2f}"
            )
    return notes
