"""Needle-query pairs, depth schedules, injection and contradiction screening."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

from .corpus import (
    DEFAULT_COUNTER,
    ChatSession,
    Haystack,
    HaystackItem,
    Turn,
    TokenCounter,
    build_haystack_items,
    render_item,
)
from .errors import MalformedRecord, UserError

if TYPE_CHECKING:
    from .providers import Provider

DIFFICULTIES = ("Low", "Medium", "High")
SINGLE_DEPTHS = (0.4, 0.6)


@dataclass(frozen=True)
class NeedleQueryPair:
    id: str
    needles: tuple[str, ...]
    query: str
    true_answer: str
    difficulty: str
    hops: int
    qtype: str = ""
    breakdown: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.needles:
            raise UserError(f"pair {self.id}: at least one needle required")
        if self.hops not in (1, 2, 3):
            raise UserError(f"pair {self.id}: hops must be 1, 2 or 3, got {self.hops}")
        if not self.true_answer.strip():
            raise UserError(f"pair {self.id}: empty true answer")
        if self.difficulty not in DIFFICULTIES:
            raise UserError(f"pair {self.id}: difficulty must be one of {DIFFICULTIES}")

    @classmethod
    def from_record(cls, rec: dict) -> "NeedleQueryPair":
        hop = rec.get("hop", rec.get("hops"))
        if isinstance(hop, str):
            # accepts "2-hop" as written in hand-authored fixtures
            m = re.match(r"\s*(\d+)", hop)
            hop = int(m.group(1)) if m else None
        answer = rec.get("true_answer")
        if isinstance(answer, (dict, list)):
            answer = json.dumps(answer, ensure_ascii=False)
        try:
            return cls(
                id=rec["id"],
                needles=tuple(rec["needles"]),
                query=rec["query"],
                true_answer=answer,
                difficulty=rec.get("difficulty", "Medium"),
                hops=hop,
                qtype=rec.get("type", ""),
                breakdown=tuple(rec.get("breakdown", ())),
            )
        except KeyError as exc:
            raise MalformedRecord(f"needle pair missing field {exc.args[0]!r}", field=exc.args[0])

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "needles": list(self.needles),
            "query": self.query,
            "true_answer": self.true_answer,
            "difficulty": self.difficulty,
            "hop": self.hops,
            "type": self.qtype,
            "breakdown": list(self.breakdown),
        }


def load_pairs(path: str | Path) -> list[NeedleQueryPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(f"invalid JSON: {exc.msg}", line=lineno)
            try:
                pairs.append(NeedleQueryPair.from_record(rec))
            except MalformedRecord as exc:
                raise MalformedRecord(str(exc), line=lineno, field=exc.field)
    return pairs


class PlacementMode(str, Enum):
    MULTI_UNIFORM = "multi"
    SINGLE_COMBINED = "single"


@dataclass(frozen=True)
class PlacementPlan:
    mode: PlacementMode
    depths: tuple[float, ...]
    single_depth_choice: float | None = None
    seed: int = 0

    @property
    def label(self) -> str:
        if self.mode is PlacementMode.MULTI_UNIFORM:
            return "multi"
        return f"single@{self.single_depth_choice:g}"


def plan_depths(
    mode: PlacementMode | str,
    needle_count: int,
    single_depth_choice: float | None = None,
    seed: int = 0,
) -> PlacementPlan:
    mode = PlacementMode(mode)
    if needle_count < 1:
        raise UserError("needle_count must be at least 1")
    if mode is PlacementMode.MULTI_UNIFORM:
        if single_depth_choice is not None:
            raise UserError("single_depth_choice only applies to the combined mode")
        depths = tuple(i / needle_count for i in range(needle_count))
        return PlacementPlan(mode, depths, None, seed)
    if single_depth_choice not in SINGLE_DEPTHS:
        raise UserError(f"single_depth_choice must be one of {SINGLE_DEPTHS}")
    return PlacementPlan(mode, (single_depth_choice,), single_depth_choice, seed)


def parse_mode(label: str) -> tuple[PlacementMode, float | None]:
    """``"multi"`` or ``"single@0.4"`` / ``"single@0.6"``."""
    if label == "multi":
        return PlacementMode.MULTI_UNIFORM, None
    m = re.fullmatch(r"single@(0?\.\d+)", label)
    if m and float(m.group(1)) in SINGLE_DEPTHS:
        return PlacementMode.SINGLE_COMBINED, float(m.group(1))
    raise UserError(f"unknown placement mode {label!r}")


@dataclass(frozen=True)
class Injection:
    needle_indices: tuple[int, ...]
    target_depth: float
    target_token_offset: int
    chosen_boundary_offset: int
    inserted_position: int  # index of the needle item in the injected item list


@dataclass(frozen=True)
class InjectedHaystack:
    base: Haystack
    injections: tuple[Injection, ...]
    items: tuple[HaystackItem, ...]

    @property
    def rendered_text(self) -> str:
        from .corpus import SEPARATOR

        return SEPARATOR.join(i.text for i in self.items)

    @property
    def token_length(self) -> int:
        if not self.items:
            return 0
        return self.items[-1].offset + self.items[-1].tokens

    def needle_offsets(self) -> list[int]:
        """Token offsets of the injected needle items in the final haystack."""
        return [self.items[inj.inserted_position].offset for inj in self.injections]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def nearest_boundary(boundaries: Sequence[int], target: int) -> int:
    """Index of the boundary closest to ``target``; ties go to the smaller boundary."""
    best = 0
    for i, b in enumerate(boundaries):
        if abs(b - target) < abs(boundaries[best] - target):
            best = i
    return best


def _needle_item(pair_id: str, idx: Sequence[int], needles: Sequence[str], at: datetime, user_id: str):
    turns = tuple(Turn("user", needles[i], at) for i in idx)
    sid = f"needle-{pair_id}-" + "-".join(str(i) for i in idx)
    return ChatSession(sid, user_id, at, turns)


def inject(
    haystack: Haystack,
    pair: NeedleQueryPair,
    plan: PlacementPlan,
    counter: TokenCounter = DEFAULT_COUNTER,
) -> InjectedHaystack:
    """Insert the pair's needles as synthetic user chat turns at item boundaries."""
    if haystack.token_length <= 0:
        raise UserError("cannot inject into an empty haystack")
    length = haystack.token_length
    boundaries = haystack.boundaries
    n_items = len(haystack.items)

    if plan.mode is PlacementMode.SINGLE_COMBINED:
        groups = [(tuple(range(len(pair.needles))), plan.depths[0])]
    else:
        if len(plan.depths) != len(pair.needles):
            raise UserError(
                f"plan has {len(plan.depths)} depths for {len(pair.needles)} needles"
            )
        groups = [((i,), d) for i, d in enumerate(plan.depths)]

    # slot index k means "before haystack item k" (k == n_items: at the end)
    placed: list[tuple[int, tuple[int, ...], float, int]] = []
    for idx, depth in groups:
        target = _round_half_up(depth * length)
        slot = nearest_boundary(boundaries, target)
        placed.append((slot, idx, depth, target))
    placed.sort(key=lambda p: (p[0], p[1]))

    by_slot: dict[int, list] = {}
    for p in placed:
        by_slot.setdefault(p[0], []).append(p)

    rendered: list[tuple[str, str, datetime]] = []
    meta: list[tuple[tuple[int, ...], float, int, int, int]] = []
    for k in range(n_items + 1):
        group = by_slot.get(k, [])
        if group:
            prev_ts = haystack.items[k - 1].timestamp if k > 0 else haystack.items[0].timestamp
            next_ts = haystack.items[k].timestamp if k < n_items else haystack.items[-1].timestamp
            span = next_ts - prev_ts
            for j, (slot, idx, depth, target) in enumerate(group):
                at = prev_ts + span * (j + 1) / (len(group) + 1)
                item = _needle_item(pair.id, idx, pair.needles, at, haystack.user_id)
                meta.append((idx, depth, target, boundaries[slot], len(rendered)))
                rendered.append((item.id, render_item(item), at))
        if k < n_items:
            h = haystack.items[k]
            rendered.append((h.item_id, h.text, h.timestamp))

    items = build_haystack_items(rendered, counter)
    injections = tuple(Injection(*m) for m in meta)
    return InjectedHaystack(haystack, injections, items)


# Word lists for the lexical contradiction screen.
NEGATION_CUES = frozenset(
    """not no never nothing none nor neither without cannot cant can't don't dont doesn't
    doesnt didn't didnt isn't isnt aren't arent wasn't wasnt weren't werent won't wont
    wouldn't wouldnt shouldn't shouldnt couldn't couldnt haven't havent hasn't hasnt
    avoid avoids avoiding skip dislike dislikes hate hates stop quit""".split()
)

STOPWORDS = frozenset(
    """a an the and or but if then so of to in on at by for with from into onto about as
    is are was were be been being am do does did have has had having i me my mine myself
    you your yours we us our they them their he him his she her it its this that these
    those there here what which who whom whose when where why how all any each some such
    very just also too more most much many can could will would should shall may might
    must let like it's i'm i'd i've i'll up out over again further once than only own same
    particularly really note please for""".split()
)

_WORD_RE = re.compile(r"[a-z0-9]+(?:['’][a-z]+)?")


def _words(text: str) -> list[str]:
    return [w.replace("’", "'") for w in _WORD_RE.findall(text.lower())]


def content_words(text: str) -> set[str]:
    return {w for w in _words(text) if w not in STOPWORDS and w not in NEGATION_CUES}


def has_polarity_cue(text: str) -> bool:
    return any(w in NEGATION_CUES for w in _words(text))


@dataclass(frozen=True)
class ConflictFlag:
    item_position: int
    needle_index: int
    reason: str
    shared_words: tuple[str, ...] = field(default=())


CHECKER_PROMPT = (
    "Do the following two statements about the same person contradict each other?\n"
    "Statement A: {a}\nStatement B: {b}\n"
    "Answer with yes or no."
)


def screen_conflicts(
    haystack: Haystack, pair: NeedleQueryPair, checker: "Provider | None" = None
) -> list[ConflictFlag]:
    """Flag haystack items that share a content word with a needle and disagree in polarity.

    With ``checker`` given, each lexical flag costs one provider call and is kept
    only when the reply starts with "yes".
    """
    flags = []
    needle_info = [(content_words(n), has_polarity_cue(n)) for n in pair.needles]
    for pos, item in enumerate(haystack.items):
        words = content_words(item.text)
        cue = has_polarity_cue(item.text)
        for ni, (nwords, ncue) in enumerate(needle_info):
            shared = words & nwords
            if shared and cue != ncue:
                side = "needle" if ncue else "haystack item"
                flags.append(
                    ConflictFlag(
                        pos,
                        ni,
                        f"shared {', '.join(sorted(shared))}; negation cue only in {side}",
                        tuple(sorted(shared)),
                    )
                )
    if checker is None:
        return flags
    from .providers import ChatMessage

    confirmed = []
    for flag in flags:
        prompt = CHECKER_PROMPT.format(
            a=haystack.items[flag.item_position].text, b=pair.needles[flag.needle_index]
        )
        reply = checker.complete([ChatMessage("user", prompt)], temperature=0.0).text
        if reply.strip().lower().startswith("yes"):
            confirmed.append(flag)
    return confirmed
