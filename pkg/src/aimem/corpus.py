"""User corpora: ingestion, rendering and token-budgeted haystack assembly.

Corpus files are line-delimited JSON, one item per line::

    {"kind": "note", "id": "n1", "user_id": "u1", "created_at": "2024-05-01T09:00:00Z",
     "title": "...", "summary": "...", "content": "..."}
    {"kind": "chat", "id": "c1", "user_id": "u1", "started_at": "2024-05-01T10:00:00Z",
     "turns": [{"role": "user", "text": "...", "at": "2024-05-01T10:00:00Z"}, ...]}

Timestamps are ISO-8601. A trailing ``Z`` or any explicit offset is converted
to UTC; naive timestamps are read as UTC.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence, Union

from .errors import DuplicateId, EmptyCorpus, InsufficientBudget, MalformedRecord

SEPARATOR = "\n\n"

# A token is a maximal run of word characters (Unicode \w: letters, digits,
# underscore) or a single character that is neither a word character nor
# whitespace (punctuation, symbols, emoji).
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class TokenCounter(Protocol):
    name: str

    def __call__(self, text: str) -> int: ...


@dataclass(frozen=True)
class WordPunctCounter:
    """Default counter: word runs plus one token per punctuation/symbol character.

    Whitespace never forms a token, so ``count(a + "\\n\\n" + b) == count(a) + count(b)``.
    """

    name: str = "wordpunct"

    def __call__(self, text: str) -> int:
        return sum(1 for _ in _TOKEN_RE.finditer(text))


DEFAULT_COUNTER = WordPunctCounter()

COUNTERS: dict[str, TokenCounter] = {"wordpunct": DEFAULT_COUNTER}


def token_spans(text: str) -> list[tuple[int, int]]:
    """Character spans of the default counter's tokens."""
    return [m.span() for m in _TOKEN_RE.finditer(text)]


def parse_timestamp(value: str) -> datetime:
    if not isinstance(value, str):
        raise ValueError(f"expected ISO-8601 string, got {type(value).__name__}")
    text = value.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        return ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class Turn:
    role: str
    text: str
    at: datetime


@dataclass(frozen=True)
class Note:
    id: str
    user_id: str
    created_at: datetime
    title: str
    summary: str
    content: str

    kind = "note"

    @property
    def timestamp(self) -> datetime:
        return self.created_at

    @property
    def body(self) -> str:
        return self.content

    def to_record(self) -> dict:
        return {
            "kind": "note",
            "id": self.id,
            "user_id": self.user_id,
            "created_at": format_timestamp(self.created_at),
            "title": self.title,
            "summary": self.summary,
            "content": self.content,
        }


@dataclass(frozen=True)
class ChatSession:
    id: str
    user_id: str
    started_at: datetime
    turns: tuple[Turn, ...]

    kind = "chat"

    @property
    def timestamp(self) -> datetime:
        return self.started_at

    @property
    def body(self) -> str:
        return "\n".join(t.text for t in self.turns)

    def to_record(self) -> dict:
        return {
            "kind": "chat",
            "id": self.id,
            "user_id": self.user_id,
            "started_at": format_timestamp(self.started_at),
            "turns": [
                {"role": t.role, "text": t.text, "at": format_timestamp(t.at)} for t in self.turns
            ],
        }


RawItem = Union[Note, ChatSession]


def _sort_key(item: RawItem):
    return (item.timestamp, item.id)


@dataclass(frozen=True)
class Corpus:
    user_id: str
    items: tuple[RawItem, ...] = ()

    @classmethod
    def from_items(cls, items: Iterable[RawItem], user_id: str | None = None) -> "Corpus":
        ordered = tuple(sorted(items, key=_sort_key))
        seen: set[str] = set()
        for item in ordered:
            if item.id in seen:
                raise DuplicateId(f"duplicate id {item.id!r}")
            seen.add(item.id)
        if user_id is None:
            user_id = ordered[0].user_id if ordered else ""
        return cls(user_id=user_id, items=ordered)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def get(self, item_id: str) -> RawItem:
        for item in self.items:
            if item.id == item_id:
                return item
        raise KeyError(item_id)

    def ids(self) -> set[str]:
        return {item.id for item in self.items}


def _require(record: dict, name: str, line: int, kind: type = str):
    if name not in record:
        raise MalformedRecord(f"missing field {name!r}", line=line, field=name)
    value = record[name]
    if not isinstance(value, kind):
        raise MalformedRecord(
            f"field {name!r} must be {kind.__name__}", line=line, field=name
        )
    return value


def _timestamp_field(record: dict, name: str, line: int) -> datetime:
    raw = _require(record, name, line)
    try:
        return parse_timestamp(raw)
    except ValueError as exc:
        raise MalformedRecord(f"unparsable timestamp in {name!r}: {exc}", line=line, field=name)


def parse_record(record: dict, line: int | None = None) -> RawItem:
    if not isinstance(record, dict):
        raise MalformedRecord("record must be a JSON object", line=line)
    kind = _require(record, "kind", line)
    item_id = _require(record, "id", line)
    user_id = _require(record, "user_id", line)
    if not item_id:
        raise MalformedRecord("empty id", line=line, field="id")
    if kind == "note":
        created = _timestamp_field(record, "created_at", line)
        title = _require(record, "title", line)
        summary = _require(record, "summary", line)
        content = _require(record, "content", line)
        if not content.strip():
            raise MalformedRecord("note content is empty", line=line, field="content")
        return Note(item_id, user_id, created, title, summary, content)
    if kind == "chat":
        started = _timestamp_field(record, "started_at", line)
        raw_turns = _require(record, "turns", line, list)
        if not raw_turns:
            raise MalformedRecord("chat session has no turns", line=line, field="turns")
        turns = []
        for t in raw_turns:
            if not isinstance(t, dict):
                raise MalformedRecord("turn must be an object", line=line, field="turns")
            role = _require(t, "role", line)
            if role not in ("user", "assistant"):
                raise MalformedRecord(f"bad turn role {role!r}", line=line, field="role")
            turns.append(Turn(role, _require(t, "text", line), _timestamp_field(t, "at", line)))
        for prev, nxt in zip(turns, turns[1:]):
            if nxt.at < prev.at:
                raise MalformedRecord("turn timestamps decrease", line=line, field="at")
        return ChatSession(item_id, user_id, started, tuple(turns))
    raise MalformedRecord(f"unknown kind {kind!r}", line=line, field="kind")


def ingest(path: str | Path) -> Corpus:
    """Read a corpus file and return its items in chronological order."""
    items: list[RawItem] = []
    seen: set[str] = set()
    user_id: str | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(f"invalid JSON: {exc.msg}", line=lineno)
            item = parse_record(record, line=lineno)
            if item.id in seen:
                raise DuplicateId(f"duplicate id {item.id!r}", line=lineno, field="id")
            if user_id is not None and item.user_id != user_id:
                raise MalformedRecord(
                    f"mixed user ids {user_id!r} and {item.user_id!r}", line=lineno, field="user_id"
                )
            seen.add(item.id)
            user_id = item.user_id
            items.append(item)
    return Corpus.from_items(items, user_id=user_id or "")


def write_corpus(corpus: Corpus | Iterable[RawItem], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in corpus:
            fh.write(json.dumps(item.to_record(), ensure_ascii=False) + "\n")


def _stamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%d %H:%M UTC")


def render_item(item: RawItem) -> str:
    if isinstance(item, Note):
        lines = [f"## Note, {_stamp(item.created_at)}: {item.title}"]
        if item.summary:
            lines.append(f"Summary: {item.summary}")
        lines.append(item.content)
        return "\n".join(lines)
    lines = [f"## Chat, {_stamp(item.started_at)}"]
    for turn in item.turns:
        prefix = "USER" if turn.role == "user" else "ASSISTANT"
        lines.append(f"{prefix}: {turn.text}")
    return "\n".join(lines)


@dataclass(frozen=True)
class HaystackItem:
    item_id: str
    text: str
    tokens: int
    offset: int  # token offset of this item's start within the haystack
    timestamp: datetime


@dataclass(frozen=True)
class Haystack:
    user_id: str
    items: tuple[HaystackItem, ...]
    target_length: int
    counter_name: str = DEFAULT_COUNTER.name

    @property
    def rendered_text(self) -> str:
        return SEPARATOR.join(i.text for i in self.items)

    @property
    def token_length(self) -> int:
        if not self.items:
            return 0
        last = self.items[-1]
        return last.offset + last.tokens

    @property
    def boundaries(self) -> list[int]:
        """Insertion points: every item start plus the end of the haystack."""
        return [i.offset for i in self.items] + [self.token_length]

    @property
    def max_item_tokens(self) -> int:
        return max((i.tokens for i in self.items), default=0)


def build_haystack_items(
    rendered: Sequence[tuple[str, str, datetime]], counter: Callable[[str], int]
) -> tuple[HaystackItem, ...]:
    out = []
    offset = 0
    for item_id, text, ts in rendered:
        n = counter(text)
        out.append(HaystackItem(item_id, text, n, offset, ts))
        # separator counts zero tokens under whitespace-splitting counters
        offset += n + counter(SEPARATOR)
    return tuple(out)


def assemble_haystack(
    corpus: Corpus, target_tokens: int, counter: TokenCounter = DEFAULT_COUNTER
) -> Haystack:
    """Keep the longest run of newest items whose token total fits ``target_tokens``."""
    if not corpus.items:
        raise EmptyCorpus("cannot assemble a haystack from an empty corpus")
    if target_tokens <= 0:
        raise InsufficientBudget(f"target_tokens must be positive, got {target_tokens}")
    sep = counter(SEPARATOR)
    kept: list[tuple[str, str, datetime]] = []
    total = 0
    for item in reversed(corpus.items):
        text = render_item(item)
        n = counter(text) + (sep if kept else 0)
        if total + n > target_tokens:
            break
        kept.append((item.id, text, item.timestamp))
        total += n
    if not kept:
        newest = counter(render_item(corpus.items[-1]))
        raise InsufficientBudget(
            f"newest item needs {newest} tokens, budget is {target_tokens}"
        )
    kept.reverse()
    return Haystack(
        user_id=corpus.user_id,
        items=build_haystack_items(kept, counter),
        target_length=target_tokens,
        counter_name=getattr(counter, "name", "custom"),
    )
