"""Reasoning-in-a-haystack runs: judging, per-cell execution and aggregation."""

from __future__ import annotations

import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Sequence

from .corpus import DEFAULT_COUNTER, Corpus, TokenCounter, assemble_haystack, render_item
from .errors import AimemError, InvariantViolation, UnparsableJudgeOutput, UserError
from .needles import (
    NeedleQueryPair,
    PlacementMode,
    _needle_item,
    inject,
    parse_mode,
    plan_depths,
)
from .providers import ChatMessage, Provider, build_niah_messages

log = logging.getLogger(__name__)

NIAH_RUBRIC = (
    "Accuracy:\n"
    "Score 0: The answer is completely unrelated or contradictory to the reference.\n"
    "Score 3: The answer has minor relevance with the reference but does not align with the reference.\n"
    "Score 5: The answer has moderate relevance but contains inaccuracies.\n"
    "Score 7: The answer aligns with the reference but has minor omissions.\n"
    "Score 10: The answer is completely accurate and aligns perfectly with the reference."
)
NIAH_JUDGE_INSTRUCTION = "Only respond with a numerical score"
RUBRIC_VALUES = frozenset({0, 3, 5, 7, 10})

DEFAULT_CONTEXT_LENGTHS = (2_000, 8_000, 32_000, 64_000, 128_000)
DEFAULT_MODES = ("multi", "single@0.4", "single@0.6")
JUDGE_ATTEMPTS = 3

_NUMBER_RE = re.compile(r"[-+]?\d+(?:\.\d+)?")


def parse_score(text: str, low: int, high: int) -> int | None:
    """First numeric token of ``text`` if it is an integer within [low, high]."""
    m = _NUMBER_RE.search(text)
    if m is None or "." in m.group(0):
        return None
    value = int(m.group(0))
    if not low <= value <= high:
        return None
    return value


def ask_for_score(
    judge: Provider, messages: list[ChatMessage], low: int, high: int
) -> tuple[int, str, int]:
    """Call the judge at temperature 0, re-asking up to twice on unparsable replies.

    Returns ``(value, raw_text, attempts)``.
    """
    convo = list(messages)
    raw = ""
    for attempt in range(1, JUDGE_ATTEMPTS + 1):
        raw = judge.complete(convo, temperature=0.0).text
        value = parse_score(raw, low, high)
        if value is not None:
            return value, raw, attempt
        convo = convo + [
            ChatMessage("assistant", raw),
            ChatMessage(
                "user",
                f"That reply could not be read as a score. Reply with a single integer "
                f"from {low} to {high} and nothing else.",
            ),
        ]
    raise UnparsableJudgeOutput(
        f"judge gave no integer in [{low}, {high}] after {JUDGE_ATTEMPTS} attempts; last reply {raw!r}"
    )


@dataclass(frozen=True)
class JudgeScore:
    raw_text: str
    value: int
    rubric_aligned: bool
    attempts: int = 1


def judge_messages(question: str, true_answer: str, provider_answer: str) -> list[ChatMessage]:
    prompt = (
        f"{NIAH_RUBRIC}\n\n"
        f"[Question]\n{question}\n\n"
        f"[Reference Answer]\n{true_answer}\n\n"
        f"[Candidate Answer]\n{provider_answer}\n\n"
        f"{NIAH_JUDGE_INSTRUCTION}"
    )
    return [ChatMessage("user", prompt)]


def judge(question: str, true_answer: str, provider_answer: str, judge_provider: Provider) -> JudgeScore:
    for name, text in (("question", question), ("true_answer", true_answer), ("answer", provider_answer)):
        if not text or not text.strip():
            raise UserError(f"judge: {name} is empty")
    value, raw, attempts = ask_for_score(
        judge_provider, judge_messages(question, true_answer, provider_answer), 0, 10
    )
    aligned = value in RUBRIC_VALUES
    if not aligned:
        log.info("judge returned off-rubric score %d", value)
    return JudgeScore(raw, value, aligned, attempts)


@dataclass
class RunSpec:
    providers: list[Provider]
    judge: Provider
    pairs: list[NeedleQueryPair]
    corpora: list[Corpus]
    context_lengths: Sequence[int] = DEFAULT_CONTEXT_LENGTHS
    modes: Sequence[str] = DEFAULT_MODES
    seed: int = 0
    counter: TokenCounter = DEFAULT_COUNTER

    def __post_init__(self):
        if not self.providers or not self.pairs or not self.corpora:
            raise UserError("run spec needs providers, pairs and corpora")
        if not self.context_lengths or not self.modes:
            raise UserError("run spec grids must be non-empty")
        for m in self.modes:
            parse_mode(m)
        if any(len(c) == 0 for c in self.corpora):
            raise UserError("run spec contains an empty corpus")

    def cells(self) -> list[tuple[Provider, str, int]]:
        return [
            (p, m, L) for p in self.providers for m in self.modes for L in sorted(self.context_lengths)
        ]


@dataclass
class ScoredRecord:
    provider: str
    mode: str
    context_length: int
    hops: int
    pair_id: str
    corpus: str
    status: str  # "ok" | "failed" | "skipped"
    score: int | None = None
    rubric_aligned: bool | None = None
    answer: str = ""
    judge_raw: str = ""
    answer_fingerprint: str = ""
    judge_fingerprint: str = ""
    prompt_tokens: int = 0
    haystack_tokens: int = 0
    injections: list[dict] = field(default_factory=list)
    error: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScoredRecord":
        return cls(**d)

    @property
    def sort_key(self):
        return (self.provider, self.mode, self.context_length, self.hops, self.pair_id, self.corpus)


def reserved_overhead(
    pair: NeedleQueryPair, mode: str, counter: TokenCounter = DEFAULT_COUNTER
) -> int:
    """Tokens of template, question and rendered needle items for one request."""
    plan_mode, choice = parse_mode(mode)
    at = datetime(2000, 1, 1, tzinfo=timezone.utc)  # header width is date-independent
    if plan_mode is PlacementMode.SINGLE_COMBINED:
        groups = [tuple(range(len(pair.needles)))]
    else:
        groups = [(i,) for i in range(len(pair.needles))]
    needle_tokens = sum(
        counter(render_item(_needle_item(pair.id, g, pair.needles, at, ""))) for g in groups
    )
    template = build_niah_messages("x", pair.query)
    template_tokens = counter(template[0].content) + counter(template[2].content)
    return needle_tokens + template_tokens


def _run_record(
    spec: RunSpec, provider: Provider, mode: str, context_length: int,
    pair: NeedleQueryPair, corpus: Corpus,
) -> ScoredRecord:
    rec = ScoredRecord(
        provider.name, mode, context_length, pair.hops, pair.id, corpus.user_id, "failed"
    )
    counter = spec.counter
    try:
        budget = context_length - reserved_overhead(pair, mode, counter)
        if budget <= 0:
            raise UserError(f"context length {context_length} leaves no room for the haystack")
        haystack = assemble_haystack(corpus, budget, counter)
        plan_mode, choice = parse_mode(mode)
        plan = plan_depths(plan_mode, len(pair.needles), choice, seed=spec.seed)
        injected = inject(haystack, pair, plan, counter)
        messages = build_niah_messages(injected.rendered_text, pair.query)
        prompt_tokens = sum(counter(m.content) for m in messages)
        if prompt_tokens > context_length:
            raise InvariantViolation(
                f"request of {prompt_tokens} tokens exceeds context length {context_length}"
            )
        rec.prompt_tokens = prompt_tokens
        rec.haystack_tokens = haystack.token_length
        rec.injections = [
            {
                "needle_indices": list(i.needle_indices),
                "target_depth": i.target_depth,
                "target_token_offset": i.target_token_offset,
                "chosen_boundary_offset": i.chosen_boundary_offset,
                "inserted_position": i.inserted_position,
            }
            for i in injected.injections
        ]
        result = provider.complete(messages)
        rec.answer = result.text
        rec.answer_fingerprint = result.fingerprint
        answer_text = result.text if result.text.strip() else "(no answer)"
        score = judge(pair.query, pair.true_answer, answer_text, spec.judge)
        rec.score = score.value
        rec.rubric_aligned = score.rubric_aligned
        rec.judge_raw = score.raw_text
        rec.status = "ok"
    except InvariantViolation:
        raise
    except AimemError as exc:
        rec.error = f"{type(exc).__name__}: {exc}"
        log.warning("record %s/%s failed: %s", pair.id, corpus.user_id, rec.error)
    return rec


def run_cell(
    spec: RunSpec, provider: Provider, mode: str, context_length: int
) -> list[ScoredRecord]:
    """All (pair x corpus) records for one cell, sorted deterministically.

    A provider whose context window is smaller than ``context_length`` gets
    ``skipped`` records and no calls are made.
    """
    tasks = [(pair, corpus) for pair in spec.pairs for corpus in spec.corpora]
    if provider.config.max_context_tokens < context_length:
        return sorted(
            (
                ScoredRecord(provider.name, mode, context_length, p.hops, p.id, c.user_id, "skipped",
                             error="context length exceeds provider window")
                for p, c in tasks
            ),
            key=lambda r: r.sort_key,
        )
    workers = max(1, provider.config.max_parallel)
    if workers == 1:
        records = [_run_record(spec, provider, mode, context_length, p, c) for p, c in tasks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(
                pool.map(lambda t: _run_record(spec, provider, mode, context_length, *t), tasks)
            )
    if records and all(r.status == "failed" for r in records):
        log.error("cell %s/%s/%d: every record failed", provider.name, mode, context_length)
    return sorted(records, key=lambda r: r.sort_key)


def run(spec: RunSpec) -> list[ScoredRecord]:
    records: list[ScoredRecord] = []
    for provider, mode, length in spec.cells():
        records.extend(run_cell(spec, provider, mode, length))
    return records


@dataclass(frozen=True)
class CellKey:
    provider: str
    mode: str
    context_length: int
    hops: int


@dataclass(frozen=True)
class Cell:
    mean: float | None
    n: int
    scores: tuple[int, ...]
    status: str  # "ok" | "skipped" | "failed"


@dataclass
class ScoreMatrix:
    cells: dict[CellKey, Cell]

    def __len__(self) -> int:
        return len(self.cells)

    def __getitem__(self, key: CellKey) -> Cell:
        return self.cells[key]

    def keys(self) -> list[CellKey]:
        return sorted(self.cells, key=lambda k: (k.provider, k.mode, k.context_length, k.hops))

    def panels(self) -> list[tuple[str, str]]:
        return sorted({(k.provider, k.mode) for k in self.cells})

    def rows(self) -> list[dict]:
        out = []
        for k in self.keys():
            c = self.cells[k]
            out.append(
                {
                    "provider": k.provider,
                    "mode": k.mode,
                    "context_length": k.context_length,
                    "hops": k.hops,
                    "mean": c.mean,
                    "n": c.n,
                    "status": c.status,
                }
            )
        return out


def aggregate(records: Iterable[ScoredRecord]) -> ScoreMatrix:
    """Mean judge score per (provider, mode, context length, hops)."""
    groups: dict[CellKey, list[ScoredRecord]] = {}
    for r in records:
        groups.setdefault(CellKey(r.provider, r.mode, r.context_length, r.hops), []).append(r)
    if not groups:
        raise UserError("aggregate needs at least one record")
    cells = {}
    for key, recs in groups.items():
        scores = tuple(sorted(r.score for r in recs if r.status == "ok"))
        if scores:
            cells[key] = Cell(math.fsum(scores) / len(scores), len(scores), scores, "ok")
        elif all(r.status == "skipped" for r in recs):
            cells[key] = Cell(None, 0, (), "skipped")
        else:
            cells[key] = Cell(None, 0, (), "failed")
    return ScoreMatrix(cells)
