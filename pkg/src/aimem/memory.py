"""Natural-language user memory: extraction, tag taxonomy, roll-up and trends.

Every extraction step is one provider call with a fixed prompt; replies are
parsed line by line. Items keep the ids of the raw items they came from.

Store layout (one directory per user)::

    memories.jsonl   one MemoryItem record per line
    taxonomy.json    {"nodes": {name: {"parent": str|null}}, "proposals": {tag: parent}}
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
from dataclasses import dataclass, field
from datetime import date, datetime, time, timezone
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import Corpus, RawItem, format_timestamp, parse_timestamp, render_item
from .errors import (
    CycleRejected,
    EmptyEvidence,
    EmptyMemory,
    InvariantViolation,
    MalformedRecord,
    UnknownTag,
    UserError,
)
from .needles import content_words, has_polarity_cue
from .providers import ChatMessage, Provider

log = logging.getLogger(__name__)


class Kind(str, Enum):
    BIO = "Bio"
    TOPIC = "Topic"
    PREFERENCE = "Preference"
    SOCIAL = "SocialConnection"
    SENTENCE = "SummarizedSentence"
    TREND = "Trend"


class Granularity(str, Enum):
    SENTENCE = "Sentence"
    FINE_TAG = "FineTag"
    COARSE_TAG = "CoarseTag"
    GLOBAL = "Global"


ALLOWED_GRANULARITY = {
    Kind.BIO: {Granularity.GLOBAL},
    Kind.SENTENCE: {Granularity.SENTENCE},
    Kind.TOPIC: {Granularity.FINE_TAG, Granularity.COARSE_TAG},
    Kind.PREFERENCE: {Granularity.SENTENCE},
    Kind.SOCIAL: {Granularity.SENTENCE},
    Kind.TREND: {Granularity.SENTENCE, Granularity.COARSE_TAG},
}

MAX_BIO_SENTENCES = 5
DEFAULT_MAX_LEVELS = 2


def normalize_tag(tag: str) -> str:
    return " ".join(tag.lower().split())


def _item_id(kind: Kind, text: str, refs: Sequence[str]) -> str:
    digest = hashlib.sha1((kind.value + "\x00" + text + "\x00" + ",".join(refs)).encode()).hexdigest()
    return f"{kind.value.lower()}-{digest[:12]}"


@dataclass(frozen=True)
class MemoryItem:
    id: str
    user_id: str
    kind: Kind
    granularity: Granularity
    text: str
    tags: tuple[str, ...] = ()
    source_refs: tuple[str, ...] = ()
    created_at: datetime | None = None
    details: dict = field(default_factory=dict, hash=False, compare=False)

    def __post_init__(self):
        if not self.text.strip():
            raise UserError("memory item text must be non-empty")
        if self.granularity not in ALLOWED_GRANULARITY[self.kind]:
            raise UserError(f"{self.kind.value} cannot have granularity {self.granularity.value}")
        if self.granularity is not Granularity.GLOBAL and not self.source_refs:
            raise UserError(f"{self.kind.value} item needs at least one source ref")

    @classmethod
    def new(cls, user_id, kind, granularity, text, source_refs=(), tags=(), created_at=None, **details):
        refs = tuple(source_refs)
        return cls(_item_id(kind, text, refs), user_id, kind, granularity, text,
                   tuple(tags), refs, created_at, details)

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "user_id": self.user_id,
            "kind": self.kind.value,
            "granularity": self.granularity.value,
            "text": self.text,
            "tags": list(self.tags),
            "source_refs": list(self.source_refs),
            "created_at": format_timestamp(self.created_at) if self.created_at else None,
            "details": self.details,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "MemoryItem":
        return cls(
            rec["id"], rec["user_id"], Kind(rec["kind"]), Granularity(rec["granularity"]),
            rec["text"], tuple(rec.get("tags", ())), tuple(rec.get("source_refs", ())),
            parse_timestamp(rec["created_at"]) if rec.get("created_at") else None,
            rec.get("details") or {},
        )


class Taxonomy:
    """Tag forest. Levels count from the roots (level 0)."""

    def __init__(self):
        self.parents: dict[str, str | None] = {}
        self.proposals: dict[str, str] = {}

    def __contains__(self, tag: str) -> bool:
        return normalize_tag(tag) in self.parents

    def __len__(self) -> int:
        return len(self.parents)

    def add(self, tag: str, parent: str | None = None) -> str:
        name = normalize_tag(tag)
        if not name:
            raise UserError("empty tag")
        if name not in self.parents:
            self.parents[name] = None
        if parent is not None:
            self.set_parent(name, parent)
        return name

    def ancestors(self, tag: str) -> list[str]:
        name = normalize_tag(tag)
        if name not in self.parents:
            raise UnknownTag(f"unknown tag {tag!r}")
        out = []
        seen = {name}
        cur = self.parents[name]
        while cur is not None:
            if cur in seen:
                raise InvariantViolation(f"cycle through {cur!r}")
            seen.add(cur)
            out.append(cur)
            cur = self.parents[cur]
        return out

    def level(self, tag: str) -> int:
        return len(self.ancestors(tag))

    def set_parent(self, tag: str, parent: str) -> None:
        name, pname = normalize_tag(tag), normalize_tag(parent)
        if name not in self.parents:
            raise UnknownTag(f"unknown tag {tag!r}")
        if pname == name:
            raise CycleRejected(f"{name!r} cannot be its own parent")
        if pname in self.parents and name in self.ancestors(pname):
            raise CycleRejected(f"{pname!r} already descends from {name!r}")
        self.parents.setdefault(pname, None)
        self.parents[name] = pname
        self.validate()

    def children(self, tag: str) -> list[str]:
        name = normalize_tag(tag)
        return sorted(t for t, p in self.parents.items() if p == name)

    def validate(self) -> None:
        for name in self.parents:
            anc = self.ancestors(name)  # raises on a cycle
            if anc and self.level(anc[0]) + 1 != len(anc):
                raise InvariantViolation(f"level mismatch at {name!r}")

    def to_dict(self) -> dict:
        return {
            "nodes": {n: {"parent": p, "level": self.level(n)} for n, p in sorted(self.parents.items())},
            "proposals": dict(sorted(self.proposals.items())),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Taxonomy":
        tax = cls()
        for name, node in data.get("nodes", {}).items():
            tax.parents[normalize_tag(name)] = node.get("parent")
        tax.proposals = dict(data.get("proposals", {}))
        tax.validate()
        return tax


def rollup_tag(tag: str, taxonomy: Taxonomy, max_levels: int = DEFAULT_MAX_LEVELS) -> list[str]:
    """Ancestors of ``tag``, nearest first, at most ``max_levels`` of them."""
    if max_levels < 0:
        raise UserError("max_levels must be >= 0")
    return taxonomy.ancestors(tag)[:max_levels]


PARENT_PROMPT = (
    "Give one broader category that contains the topic below, one level more "
    "general and still close to it (a sports player -> their league, a league -> "
    "the sport). Reply with the category name only.\nTopic: {tag}"
)


def propose_parent(tag: str, taxonomy: Taxonomy, provider: Provider) -> Taxonomy:
    """Ask the provider for a parent of ``tag``; accepted answers are cached."""
    name = normalize_tag(tag)
    if name not in taxonomy.parents:
        raise UnknownTag(f"unknown tag {tag!r}")
    if name in taxonomy.proposals:
        return taxonomy
    if taxonomy.parents[name] is not None:
        taxonomy.proposals[name] = taxonomy.parents[name]
        return taxonomy
    reply = provider.complete([ChatMessage("user", PARENT_PROMPT.format(tag=name))], temperature=0.0).text
    lines = [ln for ln in reply.strip().splitlines() if ln.strip()]
    parent = normalize_tag(_strip_bullet(lines[0])) if lines else ""
    if not parent:
        raise UserError(f"provider proposed no parent for {name!r}")
    taxonomy.set_parent(name, parent)
    taxonomy.proposals[name] = parent
    return taxonomy


_BULLET_RE = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


def _strip_bullet(line: str) -> str:
    return _BULLET_RE.sub("", line).strip()


def _reply_lines(reply: str) -> list[str]:
    out = []
    for line in reply.splitlines():
        line = _strip_bullet(line)
        if line and line.lower() not in ("none", "n/a"):
            out.append(line)
    return out


def _ask(provider: Provider, prompt: str) -> str:
    return provider.complete([ChatMessage("user", prompt)], temperature=0.0).text


SUMMARY_PROMPT = (
    "Summarize what the following record says about the user in short third-person "
    "sentences, one per line, starting with 'User'.\n\n{text}"
)
TAGS_PROMPT = (
    "List the specific topics, names and entities the user explicitly mentions in the "
    "record below, as a comma-separated list.\n\n{text}"
)
PREFERENCE_PROMPT = (
    "Extract preferences stated in the record below, one per line, as\n"
    "subject | like or dislike or prefer | object | alternative (optional)\n"
    "Use 'user' as subject for the user's own preferences and the person's name otherwise. "
    "Reply 'none' if there are none.\n\n{text}"
)
SOCIAL_PROMPT = (
    "List the people and organizations mentioned in the record below, one per line, as\n"
    "name | relation to the user (optional). Reply 'none' if there are none.\n\n{text}"
)
BIO_PROMPT = (
    "Write a short bio of the user in at most five sentences, the way they would "
    "introduce themselves, based on these memory items:\n\n{text}"
)
TREND_PROMPT = (
    "Here are the user's memories about '{tag}' in chronological order. Describe the "
    "trend or pattern they show in one or two sentences.\n\n{text}"
)


def _has_content(item: RawItem) -> bool:
    return bool(item.body.strip())


def summarize_interaction(item: RawItem, provider: Provider) -> list[MemoryItem]:
    if not _has_content(item):
        return []
    reply = _ask(provider, SUMMARY_PROMPT.format(text=render_item(item)))
    return [
        MemoryItem.new(item.user_id, Kind.SENTENCE, Granularity.SENTENCE, s, [item.id],
                       created_at=item.timestamp)
        for s in _reply_lines(reply)
    ]


def extract_fine_tags(item: RawItem, provider: Provider, taxonomy: Taxonomy | None = None) -> list[str]:
    if not _has_content(item):
        return []
    reply = _ask(provider, TAGS_PROMPT.format(text=render_item(item)))
    tags: list[str] = []
    for piece in re.split(r"[,\n;]", reply):
        t = normalize_tag(_strip_bullet(piece))
        if t and t not in tags:
            tags.append(t)
    if taxonomy is not None:
        for t in tags:
            taxonomy.add(t)
    return tags


def topic_items(item: RawItem, tags: Sequence[str]) -> list[MemoryItem]:
    return [
        MemoryItem.new(item.user_id, Kind.TOPIC, Granularity.FINE_TAG, t, [item.id], tags=[t],
                       created_at=item.timestamp)
        for t in tags
    ]


_USER_SUBJECTS = {"user", "me", "i", "myself", "the user"}
_POLARITY = {
    "like": "like", "likes": "like", "love": "like", "loves": "like",
    "dislike": "dislike", "dislikes": "dislike", "avoid": "dislike", "hate": "dislike",
    "prefer": "prefer", "prefers": "prefer",
}


def _preference_text(subject: str, polarity: str, obj: str, alt: str | None) -> str:
    who = "User" if subject == "user" else subject
    if polarity == "prefer" and alt:
        return f"{who} prefers {obj} over {alt}."
    if polarity == "prefer":
        return f"{who} prefers {obj}."
    if polarity == "dislike":
        return f"{who} dislikes {obj}."
    return f"{who} likes {obj}."


def extract_preferences(item: RawItem, provider: Provider) -> list[MemoryItem]:
    """Preferences with an explicit polarity slot.

    Preferences held by someone other than the user keep that person as
    ``details["subject"]`` and are attributed to them, not to the user.
    """
    if not _has_content(item):
        return []
    reply = _ask(provider, PREFERENCE_PROMPT.format(text=render_item(item)))
    out = []
    for line in _reply_lines(reply):
        parts = [p.strip() for p in line.split("|")]
        if len(parts) < 3:
            log.info("ignoring preference line without 3 fields: %r", line)
            continue
        subject_raw, pol_raw, obj = parts[0], parts[1].lower(), parts[2]
        polarity = _POLARITY.get(pol_raw)
        if polarity is None or not obj:
            log.info("ignoring preference line with polarity %r", pol_raw)
            continue
        alt = parts[3] if len(parts) > 3 and parts[3] else None
        subject = "user" if subject_raw.lower() in _USER_SUBJECTS else subject_raw
        text = _preference_text(subject, polarity, obj, alt)
        details = {"subject": subject, "polarity": polarity, "object": obj}
        if alt:
            details["alternative"] = alt
        if subject != "user":
            details["attributed_to"] = "social_connection"
        out.append(
            MemoryItem.new(item.user_id, Kind.PREFERENCE, Granularity.SENTENCE, text, [item.id],
                           created_at=item.timestamp, **details)
        )
    return out


def extract_social(items: RawItem | Iterable[RawItem], provider: Provider) -> list[MemoryItem]:
    """People and organizations, merged by name across ``items``."""
    if isinstance(items, (str, bytes)):
        raise UserError("extract_social expects raw items")
    if hasattr(items, "id"):
        items = [items]
    merged: dict[str, dict] = {}
    order: list[str] = []
    user_id = ""
    for item in items:
        user_id = item.user_id
        if not _has_content(item):
            continue
        reply = _ask(provider, SOCIAL_PROMPT.format(text=render_item(item)))
        for line in _reply_lines(reply):
            parts = [p.strip() for p in line.split("|")]
            name = parts[0]
            key = normalize_tag(name)
            if not key:
                continue
            if key not in merged:
                merged[key] = {"name": name, "relation": "", "refs": [], "first": item.timestamp}
                order.append(key)
            entry = merged[key]
            if len(parts) > 1 and parts[1] and not entry["relation"]:
                entry["relation"] = parts[1]
            if item.id not in entry["refs"]:
                entry["refs"].append(item.id)
    out = []
    for key in order:
        e = merged[key]
        text = e["name"] + (f" ({e['relation']})" if e["relation"] else "")
        out.append(
            MemoryItem.new(user_id, Kind.SOCIAL, Granularity.SENTENCE, text, e["refs"],
                           created_at=e["first"], name=e["name"], relation=e["relation"])
        )
    return out


def _sentence_count(text: str) -> int:
    return len([s for s in re.split(r"(?<=[.!?])\s+", text.strip()) if s])


def build_global(items: Sequence[MemoryItem], provider: Provider) -> MemoryItem:
    if not items:
        raise EmptyMemory("no memory items to summarize")
    ordered = sorted(items, key=lambda m: (m.created_at or datetime.min.replace(tzinfo=timezone.utc), m.id))
    listing = "\n".join(f"- [{m.kind.value}] {m.text}" for m in ordered)
    reply = _ask(provider, BIO_PROMPT.format(text=listing)).strip()
    if not reply:
        raise UserError("provider returned an empty bio")
    n = _sentence_count(reply)
    if n > MAX_BIO_SENTENCES:
        log.warning("bio has %d sentences (target <= %d)", n, MAX_BIO_SENTENCES)
    return MemoryItem.new(ordered[0].user_id, Kind.BIO, Granularity.GLOBAL, reply)


def _as_bounds(start, end) -> tuple[datetime, datetime]:
    def conv(v, upper):
        if isinstance(v, datetime):
            return v if v.tzinfo else v.replace(tzinfo=timezone.utc)
        if isinstance(v, date):
            return datetime.combine(v, time.max if upper else time.min, tzinfo=timezone.utc)
        if isinstance(v, str):
            return conv(parse_timestamp(v) if "T" in v else date.fromisoformat(v), upper)
        raise UserError(f"bad window bound {v!r}")

    lo = conv(start, False) if start is not None else datetime.min.replace(tzinfo=timezone.utc)
    hi = conv(end, True) if end is not None else datetime.max.replace(tzinfo=timezone.utc)
    return lo, hi


def matches_tag(item: MemoryItem, tag: str, taxonomy: Taxonomy | None = None) -> bool:
    tag = normalize_tag(tag)
    for t in item.tags:
        if t == tag:
            return True
        if taxonomy is not None and t in taxonomy and tag in taxonomy.ancestors(t):
            return True
    return False


def mine_trend(
    tag: str,
    window: tuple,
    store: "MemoryStore | Sequence[MemoryItem]",
    provider: Provider,
    taxonomy: Taxonomy | None = None,
) -> MemoryItem:
    """One provider call over all memories about ``tag`` inside ``window`` (inclusive)."""
    items = store.items if isinstance(store, MemoryStore) else list(store)
    if taxonomy is None and isinstance(store, MemoryStore):
        taxonomy = store.taxonomy
    lo, hi = _as_bounds(*window)
    evidence = [
        m for m in items
        if m.created_at is not None and lo <= m.created_at <= hi and matches_tag(m, tag, taxonomy)
    ]
    if not evidence:
        raise EmptyEvidence(f"no memories tagged {tag!r} in window")
    evidence.sort(key=lambda m: (m.created_at, m.id))
    listing = "\n".join(f"- {m.created_at.date().isoformat()}: {m.text}" for m in evidence)
    reply = _ask(provider, TREND_PROMPT.format(tag=normalize_tag(tag), text=listing)).strip()
    if not reply:
        raise UserError("provider returned an empty trend")
    refs: list[str] = []
    for m in evidence:
        for r in m.source_refs:
            if r not in refs:
                refs.append(r)
    return MemoryItem.new(
        evidence[0].user_id, Kind.TREND, Granularity.SENTENCE, reply, refs,
        tags=[normalize_tag(tag)], created_at=evidence[-1].created_at,
        evidence=[m.id for m in evidence],
    )


@dataclass(frozen=True)
class MemoryConflict:
    first: str
    second: str
    shared_words: tuple[str, ...]


def find_conflicts(items: Sequence[MemoryItem]) -> list[MemoryConflict]:
    """Pairs of sentence-level memories that share a content word but differ in polarity.

    Same lexical rule as the needle screen; results are for review only.
    """
    pool = [m for m in items if m.granularity is Granularity.SENTENCE]
    # "user" opens most sentences and says nothing about the topic
    info = [(m, content_words(m.text) - {"user"}, has_polarity_cue(m.text)) for m in pool]
    out = []
    for i in range(len(info)):
        for j in range(i + 1, len(info)):
            a, wa, ca = info[i]
            b, wb, cb = info[j]
            shared = wa & wb
            if shared and ca != cb:
                out.append(MemoryConflict(a.id, b.id, tuple(sorted(shared))))
    return out


def check_provenance(items: Iterable[MemoryItem], corpus: Corpus) -> list[str]:
    """Ids of non-global items with a source ref missing from ``corpus``."""
    known = corpus.ids()
    return [
        m.id for m in items
        if m.granularity is not Granularity.GLOBAL and not all(r in known for r in m.source_refs)
    ]


class MemoryStore:
    """Single-user store: append-only memory records plus a taxonomy file."""

    def __init__(self, root: str | Path, user_id: str | None = None):
        self.root = Path(root)
        self.user_id = user_id
        self.items: list[MemoryItem] = []
        self.taxonomy = Taxonomy()
        self._lock = threading.Lock()
        self._load()

    @property
    def memories_path(self) -> Path:
        return self.root / "memories.jsonl"

    @property
    def taxonomy_path(self) -> Path:
        return self.root / "taxonomy.json"

    def _load(self) -> None:
        if self.memories_path.exists():
            with open(self.memories_path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    try:
                        item = MemoryItem.from_record(json.loads(line))
                    except (ValueError, KeyError) as exc:
                        raise MalformedRecord(f"bad memory record: {exc}", line=lineno)
                    self._check_user(item)
                    self.items.append(item)
        if self.taxonomy_path.exists():
            with open(self.taxonomy_path, encoding="utf-8") as fh:
                self.taxonomy = Taxonomy.from_dict(json.load(fh))

    def _check_user(self, item: MemoryItem) -> None:
        if self.user_id is None:
            self.user_id = item.user_id
        elif item.user_id != self.user_id:
            raise UserError(f"store belongs to {self.user_id!r}, got item for {item.user_id!r}")

    def add(self, items: Iterable[MemoryItem]) -> int:
        """Append items not already stored (by id). Returns the number written."""
        with self._lock:
            known = {m.id for m in self.items}
            fresh = []
            for m in items:
                self._check_user(m)
                if m.id not in known:
                    known.add(m.id)
                    fresh.append(m)
            if fresh:
                self.root.mkdir(parents=True, exist_ok=True)
                with open(self.memories_path, "a", encoding="utf-8") as fh:
                    for m in fresh:
                        fh.write(json.dumps(m.to_record(), ensure_ascii=False, sort_keys=True) + "\n")
                self.items.extend(fresh)
            return len(fresh)

    def save_taxonomy(self) -> None:
        with self._lock:
            self.taxonomy.validate()
            self.root.mkdir(parents=True, exist_ok=True)
            self.taxonomy_path.write_text(
                json.dumps(self.taxonomy.to_dict(), indent=2, ensure_ascii=False) + "\n",
                encoding="utf-8",
            )

    def by_kind(self, kind: Kind) -> list[MemoryItem]:
        return [m for m in self.items if m.kind is kind]
