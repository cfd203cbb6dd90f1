"""Fine-tuning data synthesis for a per-user personal model.

Every user prompt carries the ``<|ME|>`` sentinel at position 0. The output is
a line-delimited dataset plus a manifest describing how to fine-tune on it;
no training happens here.

Dataset record fields: ``prompt``, ``target``, ``category``, ``source_refs``,
``cot``, ``skeleton``.
"""

from __future__ import annotations

import calendar
import hashlib
import json
import logging
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timedelta
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import DEFAULT_COUNTER, Corpus, Note, RawItem, TokenCounter, render_item, token_spans
from .errors import (
    DoublePrefix,
    EmptyExamples,
    EmptyNote,
    EmptyPrompt,
    InsufficientChunks,
    InvariantViolation,
    SkeletonMonoculture,
    UnknownPhrase,
    UserError,
)
from .providers import ChatMessage, Provider

log = logging.getLogger(__name__)

SENTINEL = "<|ME|>"


class Category(str, Enum):
    CHUNK = "ChunkRetrieval"
    CROSS_NOTE = "CrossNote"
    DATE = "DateRetrieval"
    PERIOD = "PeriodSummary"
    ME_REPHRASE = "MeRephrase"


def me_prefix(prompt: str) -> str:
    if not prompt:
        raise EmptyPrompt("prompt is empty")
    if prompt.startswith(SENTINEL):
        raise DoublePrefix("prompt already starts with the sentinel")
    return SENTINEL + prompt


def strip_sentinel(prompt: str) -> str:
    return prompt[len(SENTINEL):] if prompt.startswith(SENTINEL) else prompt


_FIRST_PERSON_I = re.compile(r"\bI\b")
_FIRST_PERSON_OTHER = re.compile(r"\b(?:me|my|mine)\b", re.IGNORECASE)


def is_first_person(prompt: str) -> bool:
    text = prompt.replace(SENTINEL, " ")
    return bool(_FIRST_PERSON_I.search(text) or _FIRST_PERSON_OTHER.search(text))


def me_ratio(prompts: Sequence[str]) -> float:
    """Share of prompts with a standalone "I" (case-sensitive) or me/my/mine (any case)."""
    if not prompts:
        raise UserError("me_ratio needs at least one prompt")
    return sum(1 for p in prompts if is_first_person(p)) / len(prompts)


# Words kept verbatim in a skeleton; everything else is masked.
FUNCTION_WORDS = frozenset(
    """a an the and or but if then so of to in on at by for with from into about as over
    under between during before after since until than is are was were be been being am
    do does did done have has had i me my mine myself you your we our they them their
    he him his she her it its this that these those there here what which who whom whose
    when where why how all any each every some no not can could will would should shall
    may might must please tell show give find let anything something everything just
    also again ever""".split()
)


def skeleton(prompt: str) -> str:
    """Prompt with every non-function word masked as ``_`` (runs collapsed)."""
    out: list[str] = []
    for m in re.finditer(r"\w+|[^\w\s]", strip_sentinel(prompt).lower()):
        tok = m.group(0)
        keep = tok in FUNCTION_WORDS or not tok[0].isalnum()
        piece = tok if keep else "_"
        if piece == "_" and out and out[-1] == "_":
            continue
        out.append(piece)
    return " ".join(out)


def skeleton_fingerprint(prompt: str) -> str:
    return hashlib.sha1(skeleton(prompt).encode("utf-8")).hexdigest()[:12]


@dataclass(frozen=True)
class TrainingExample:
    prompt: str
    target: str
    category: Category
    source_refs: tuple[str, ...] = ()
    cot: bool = False
    skeleton: str = ""

    def __post_init__(self):
        if not self.prompt.startswith(SENTINEL) or self.prompt.count(SENTINEL) != 1:
            raise InvariantViolation(f"prompt must start with {SENTINEL} exactly once: {self.prompt[:60]!r}")
        if not self.target.strip():
            raise UserError("training target is empty")
        # date/period examples over an empty range legitimately cite nothing
        if self.category in (Category.CHUNK, Category.CROSS_NOTE) and not self.source_refs:
            raise UserError(f"{self.category.value} example needs source refs")
        if not self.skeleton:
            object.__setattr__(self, "skeleton", skeleton_fingerprint(self.prompt))

    def to_record(self) -> dict:
        return {
            "prompt": self.prompt,
            "target": self.target,
            "category": self.category.value,
            "source_refs": list(self.source_refs),
            "cot": self.cot,
            "skeleton": self.skeleton,
        }


@dataclass(frozen=True)
class Rephrase:
    before: str
    after: str
    fallback: bool = False


REPHRASE_PROMPT = (
    "Rewrite this request so it is asked by me, about me, in the first person "
    "(use words like I, me, my). Keep the meaning. Reply with the rewritten request only.\n\n{prompt}"
)


def _first_person_fallback(prompt: str) -> str:
    body = prompt.rstrip()
    end = ""
    while body and body[-1] in ".?!":
        end = body[-1] + end
        body = body[:-1]
    return f"{body} for me{end}"


def rephrase_me(prompt: str, provider: Provider) -> Rephrase:
    """Provider rewrite toward first person.

    If the reply still has no first-person word (or is empty), " for me" is
    appended to the original instead, so a rephrased prompt is always first person.
    """
    if not prompt or not strip_sentinel(prompt).strip():
        raise EmptyPrompt("prompt is empty")
    had_sentinel = prompt.startswith(SENTINEL)
    base = strip_sentinel(prompt)
    reply = provider.complete(
        [ChatMessage("user", REPHRASE_PROMPT.format(prompt=base))], temperature=0.0
    ).text.strip()
    fallback = False
    if not reply or not is_first_person(reply) or SENTINEL in reply:
        reply = base if is_first_person(base) else _first_person_fallback(base)
        fallback = True
    return Rephrase(prompt, SENTINEL + reply if had_sentinel else reply, fallback)


@dataclass(frozen=True)
class RephraseBatch:
    items: list[Rephrase]
    ratio_before: float
    ratio_after: float


def rephrase_batch(prompts: Sequence[str], provider: Provider) -> RephraseBatch:
    items = [rephrase_me(p, provider) for p in prompts]
    return RephraseBatch(items, me_ratio([i.before for i in items]), me_ratio([i.after for i in items]))


@dataclass(frozen=True)
class Chunk:
    source_id: str
    index: int
    text: str


@dataclass(frozen=True)
class Chunker:
    """Fixed token windows with overlap, cut on the default token spans."""

    window: int = 256
    overlap: int = 32

    def __post_init__(self):
        if self.window < 1 or not 0 <= self.overlap < self.window:
            raise UserError("chunker needs window >= 1 and 0 <= overlap < window")

    def split(self, text: str, source_id: str = "") -> list[Chunk]:
        spans = token_spans(text)
        if not spans:
            return []
        stride = self.window - self.overlap
        out = []
        start = 0
        while True:
            end = min(start + self.window, len(spans))
            out.append(Chunk(source_id, len(out), text[spans[start][0]: spans[end - 1][1]]))
            if end == len(spans):
                return out
            start += stride


CHUNK_QUESTION_TEMPLATES = (
    "What did I write about {kp}?",
    "Can you pull up my note that mentions {kp}?",
    "I remember noting something on {kp}. What was it exactly?",
    "Remind me what I said regarding {kp}.",
    "Find the part of my notes where {kp} comes up.",
    "Where in my notes did I talk about {kp}, and what did it say?",
    "Show me what I recorded on {kp}.",
    "I jotted down some thoughts involving {kp} at some point; what were they?",
)
KEYPHRASE_PROMPT = (
    "List one or two short keyphrases that a person would use to recall the passage "
    "below, comma-separated, copied from the passage.\n\n{text}"
)
PARAPHRASE_PROMPT = "Paraphrase the passage below, keeping every fact.\n\n{text}"


def _pick(options: Sequence[str], *keys) -> str:
    h = hashlib.sha1("\x00".join(map(str, keys)).encode("utf-8")).digest()
    return options[int.from_bytes(h[:4], "big") % len(options)]


def _fallback_keyphrase(text: str) -> str:
    words = [w for w in re.findall(r"[A-Za-z][A-Za-z'-]{3,}", text) if w.lower() not in FUNCTION_WORDS]
    if not words:
        return text.split()[0] if text.split() else "this"
    counts = Counter(w.lower() for w in words)
    best = max(counts.values())
    return next(w for w in words if counts[w.lower()] == best)


def extract_keyphrases(
    chunk: Chunk, provider: Provider, limit: int = 2, cache: dict | None = None
) -> list[str]:
    if cache is not None and chunk.text in cache:
        return cache[chunk.text][:limit]
    reply = provider.complete(
        [ChatMessage("user", KEYPHRASE_PROMPT.format(text=chunk.text))], temperature=0.0
    ).text
    out: list[str] = []
    for piece in re.split(r"[,\n;]", reply):
        kp = piece.strip().strip("\"'").strip()
        if kp and kp.lower() not in (k.lower() for k in out):
            out.append(kp)
    if not out:
        out = [_fallback_keyphrase(chunk.text)]
    if cache is not None:
        cache[chunk.text] = out
    return out[:limit]


def _join_kps(kps: Sequence[str]) -> str:
    return kps[0] if len(kps) == 1 else ", ".join(kps[:-1]) + " and " + kps[-1]


def gen_chunk_retrieval(
    note: Note,
    provider: Provider,
    chunker: Chunker = Chunker(),
    paraphrase: bool = False,
    siblings: bool = False,
    keyphrase_cache: dict | None = None,
) -> list[TrainingExample]:
    """Keyphrase -> chunk examples; ``siblings`` pairs each chunk with the next one."""
    chunks = chunker.split(note.content, note.id)
    if not chunks:
        raise EmptyNote(f"note {note.id} has no content to chunk")
    groups = [[c] for c in chunks]
    if siblings:
        groups = [[a, b] for a, b in zip(chunks, chunks[1:])] or groups
    out = []
    for group in groups:
        kps: list[str] = []
        for c in group:
            for kp in extract_keyphrases(c, provider, 1 if siblings else 2, keyphrase_cache):
                if kp not in kps:
                    kps.append(kp)
        question = _pick(CHUNK_QUESTION_TEMPLATES, note.id, group[0].index).format(kp=_join_kps(kps))
        passage = "\n".join(c.text for c in group)
        if paraphrase:
            target = provider.complete(
                [ChatMessage("user", PARAPHRASE_PROMPT.format(text=passage))], temperature=0.0
            ).text.strip() or passage
        else:
            target = passage
        out.append(TrainingExample(me_prefix(question), target, Category.CHUNK, (note.id,)))
    return out


SUMMARY_MARKER = "SUMMARY:"
CROSSNOTE_TEMPLATES = (
    "Pull together everything I've noted about {kp}.",
    "What do all my notes say about {kp}?",
    "Give me the full picture of {kp} across my notes.",
    "I've mentioned {kp} in several places. Sum it up for me.",
)
CROSSNOTE_SUMMARY_PROMPT = (
    "These passages from my notes all mention '{kp}'. Write a digest of what they say "
    "together, not a concatenation.\n\n{text}"
)


def gen_crossnote(keyphrase: str, chunks: Sequence[Chunk], provider: Provider) -> TrainingExample:
    """Chain-of-thought target: echo each chunk in order, then ``SUMMARY:`` and a digest."""
    if len(chunks) < 2:
        raise InsufficientChunks(f"cross-note example needs >= 2 chunks, got {len(chunks)}")
    kp = keyphrase.lower()
    for c in chunks:
        if kp not in c.text.lower():
            raise UserError(f"chunk {c.source_id}#{c.index} does not contain {keyphrase!r}")
    echoes = "\n".join(f"[{i}] (note {c.source_id}) {c.text}" for i, c in enumerate(chunks, start=1))
    digest = provider.complete(
        [ChatMessage("user", CROSSNOTE_SUMMARY_PROMPT.format(kp=keyphrase, text=echoes))],
        temperature=0.0,
    ).text.strip()
    if not digest:
        raise UserError("provider returned an empty cross-note summary")
    target = (
        f"Let me first recall every note that mentions \"{keyphrase}\".\n{echoes}\n"
        f"{SUMMARY_MARKER}\n{digest}"
    )
    refs = tuple(dict.fromkeys(c.source_id for c in chunks))
    prompt = me_prefix(_pick(CROSSNOTE_TEMPLATES, keyphrase, *refs).format(kp=keyphrase))
    return TrainingExample(prompt, target, Category.CROSS_NOTE, refs, cot=True)


RELATIVE_PHRASES = ("yesterday", "last week", "last month")
_EXPLICIT_FORMATS = ("%Y-%m-%d", "%B %d, %Y", "%b %d, %Y", "%d %B %Y")


@dataclass(frozen=True)
class PeriodSpec:
    phrase: str
    now: date
    start: date
    end: date

    @property
    def explicit(self) -> bool:
        return self.phrase.lower() not in RELATIVE_PHRASES


def parse_explicit_date(phrase: str) -> date | None:
    for fmt in _EXPLICIT_FORMATS:
        try:
            return datetime.strptime(phrase.strip(), fmt).date()
        except ValueError:
            continue
    return None


def resolve_period(phrase: str, now: date) -> PeriodSpec:
    """Inclusive date range: yesterday, previous ISO week (Mon..Sun), previous calendar month."""
    if isinstance(now, datetime):
        now = now.date()
    key = phrase.strip().lower()
    if key == "yesterday":
        d = now - timedelta(days=1)
        return PeriodSpec(phrase, now, d, d)
    if key == "last week":
        this_monday = now - timedelta(days=now.weekday())
        start = this_monday - timedelta(days=7)
        return PeriodSpec(phrase, now, start, start + timedelta(days=6))
    if key == "last month":
        year, month = (now.year - 1, 12) if now.month == 1 else (now.year, now.month - 1)
        last = calendar.monthrange(year, month)[1]
        return PeriodSpec(phrase, now, date(year, month, 1), date(year, month, last))
    d = parse_explicit_date(phrase)
    if d is None:
        raise UnknownPhrase(f"cannot resolve time phrase {phrase!r}")
    return PeriodSpec(phrase, now, d, d)


DATE_TEMPLATES = (
    "What did I note on {p}?",
    "What happened on {p}?",
    "Tell me what I was up to on {p}.",
    "Anything in my notes from {p}?",
)
PERIOD_TEMPLATES = (
    "What did I do {p}?",
    "Summarize my notes from {p} for me.",
    "How did {p} go for me, based on my notes?",
    "Catch me up on what I recorded {p}.",
)
TIME_SUMMARY_PROMPT = (
    "Summarize these notes from {start} to {end} in a few sentences, noting any trend.\n\n{text}"
)


def _item_title(item: RawItem) -> str:
    if isinstance(item, Note):
        return item.title or item.content.splitlines()[0][:80]
    return item.turns[0].text[:80]


def items_in_range(corpus: Corpus, start: date, end: date) -> list[RawItem]:
    return [i for i in corpus.items if start <= i.timestamp.date() <= end]


def _range_text(spec: PeriodSpec) -> str:
    if spec.start == spec.end:
        return spec.start.isoformat()
    return f"{spec.start.isoformat()} to {spec.end.isoformat()}"


def time_target(spec: PeriodSpec, items: Sequence[RawItem], summary: str) -> str:
    if spec.explicit:
        step1 = f"Step 1: \"{spec.phrase}\" is the date {spec.start.isoformat()}."
    else:
        step1 = (
            f"Step 1: Today is {spec.now.isoformat()}, so \"{spec.phrase}\" means "
            f"{_range_text(spec)}."
        )
    if not items:
        return (
            f"{step1}\nStep 2: I have no notes from {_range_text(spec)}.\n"
            f"Step 3: So I can't tell you anything about that time; nothing was recorded then."
        )
    listing = "\n".join(
        f"- [{i.id}] {i.timestamp.date().isoformat()}: {_item_title(i)}" for i in items
    )
    return f"{step1}\nStep 2: Notes in that range:\n{listing}\nStep 3: {summary}"


def gen_time_examples(
    corpus: Corpus,
    phrase: str,
    now: date,
    provider: Provider,
    question: str | None = None,
) -> list[TrainingExample]:
    """One date/period example; empty ranges yield a decline target and no provider call."""
    spec = resolve_period(phrase, now)
    items = items_in_range(corpus, spec.start, spec.end)
    summary = ""
    if items:
        text = "\n\n".join(render_item(i) for i in items)
        summary = provider.complete(
            [ChatMessage("user", TIME_SUMMARY_PROMPT.format(start=spec.start, end=spec.end, text=text))],
            temperature=0.0,
        ).text.strip() or "Those are the notes I have from then."
    category = Category.DATE if spec.explicit else Category.PERIOD
    if question is None:
        pool = DATE_TEMPLATES if spec.explicit else PERIOD_TEMPLATES
        question = _pick(pool, phrase, now.isoformat()).format(p=phrase)
    return [
        TrainingExample(
            me_prefix(question), time_target(spec, items, summary), category,
            tuple(i.id for i in items), cot=True,
        )
    ]


@dataclass
class FinetuneManifest:
    base_model: str = "Qwen2-7B-Instruct"
    method: str = "lora"
    lora_rank: int = 64
    epochs: int = 5
    lr_schedule: str = "cosine"
    max_learning_rate: float = 1e-4
    decode_temperature: float = 0.0
    sentinel: str = SENTINEL
    dataset_path: str = "dataset.jsonl"
    stats: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DatasetConfig:
    max_skeleton_share: float = 0.30
    min_gate_size: int = 10
    size_multiplier: float = 10.0


def skeleton_shares(examples: Sequence[TrainingExample]) -> list[tuple[str, float]]:
    counts = Counter(skeleton(e.prompt) for e in examples)
    n = len(examples)
    return sorted(((s, c / n) for s, c in counts.items()), key=lambda x: (-x[1], x[0]))


def emit_dataset(
    examples: Iterable[TrainingExample],
    corpus: Corpus,
    out_dir: str | Path,
    config: DatasetConfig = DatasetConfig(),
    manifest: FinetuneManifest | None = None,
    counter: TokenCounter = DEFAULT_COUNTER,
) -> FinetuneManifest:
    """Deduplicate, gate on template diversity, write ``dataset.jsonl`` and ``manifest.json``."""
    examples = list(examples)
    if not examples:
        raise EmptyExamples("no training examples to emit")
    seen: set[tuple[str, str]] = set()
    unique = []
    for e in examples:
        if not e.prompt.startswith(SENTINEL) or e.prompt.count(SENTINEL) != 1:
            raise InvariantViolation(f"prompt without single leading sentinel: {e.prompt[:60]!r}")
        key = (e.prompt, e.target)
        if key not in seen:
            seen.add(key)
            unique.append(e)
    shares = skeleton_shares(unique)
    top_skeleton, top_share = shares[0]
    if len(unique) >= config.min_gate_size and top_share > config.max_skeleton_share:
        raise SkeletonMonoculture(top_skeleton, top_share)

    data_tokens = sum(counter(e.prompt) + counter(e.target) for e in unique)
    corpus_tokens = sum(counter(render_item(i)) for i in corpus.items)
    ratio = data_tokens / corpus_tokens if corpus_tokens else float("inf")
    if ratio < config.size_multiplier:
        log.warning(
            "dataset is %.1fx the corpus in tokens (target %.0fx)", ratio, config.size_multiplier
        )

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = manifest or FinetuneManifest()
    manifest.dataset_path = "dataset.jsonl"
    manifest.stats = {
        "examples": len(unique),
        "duplicates_removed": len(examples) - len(unique),
        "by_category": dict(sorted(Counter(e.category.value for e in unique).items())),
        "dataset_tokens": data_tokens,
        "corpus_tokens": corpus_tokens,
        "token_ratio": round(ratio, 4) if corpus_tokens else None,
        "size_multiplier_target": config.size_multiplier,
        "below_size_target": ratio < config.size_multiplier,
        "max_skeleton_share": round(top_share, 4),
        "distinct_skeletons": len(shares),
        "me_ratio": round(me_ratio([strip_sentinel(e.prompt) for e in unique]), 4),
    }
    with open(out / "dataset.jsonl", "w", encoding="utf-8") as fh:
        for e in unique:
            fh.write(json.dumps(e.to_record(), ensure_ascii=False, sort_keys=True) + "\n")
    (out / "manifest.json").write_text(
        json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest


def generate_dataset(
    corpus: Corpus,
    provider: Provider,
    now: date | None = None,
    chunker: Chunker = Chunker(),
    instructions: Sequence[tuple[str, str]] = (),
) -> list[TrainingExample]:
    """All example families for one corpus.

    Chunk examples for every note, cross-note examples for keyphrases seen in
    two or more chunks, date examples for every day with notes, period
    examples for the three relative phrases, and first-person rephrasings of
    any ``(prompt, response)`` instruction pairs.
    """
    if not corpus.items:
        raise UserError("corpus is empty")
    if now is None:
        now = corpus.items[-1].timestamp.date() + timedelta(days=1)
    examples: list[TrainingExample] = []
    cache: dict[str, list[str]] = {}
    notes = [i for i in corpus.items if isinstance(i, Note)]
    all_chunks: list[Chunk] = []
    keyphrases: set[str] = set()
    for note in notes:
        examples.extend(gen_chunk_retrieval(note, provider, chunker, keyphrase_cache=cache))
        for chunk in chunker.split(note.content, note.id):
            all_chunks.append(chunk)
            keyphrases.update(kp.lower() for kp in extract_keyphrases(chunk, provider, cache=cache))
    for kp in sorted(keyphrases):
        hits = [c for c in all_chunks if kp in c.text.lower()]
        if len({c.source_id for c in hits}) >= 2:
            examples.append(gen_crossnote(kp, hits, provider))
    for day in sorted({i.timestamp.date() for i in corpus.items}):
        examples.extend(gen_time_examples(corpus, day.isoformat(), now, provider))
    for phrase in RELATIVE_PHRASES:
        examples.extend(gen_time_examples(corpus, phrase, now, provider))
    for prompt, response in instructions:
        r = rephrase_me(prompt, provider)
        examples.append(TrainingExample(me_prefix(strip_sentinel(r.after)), response, Category.ME_REPHRASE))
    return examples
