"""Offline fixtures: packaged needle pairs, example criteria and synthetic corpora."""

from __future__ import annotations

import random
from datetime import datetime, timedelta, timezone
from importlib import resources
from pathlib import Path

from .corpus import ChatSession, Corpus, Note, Turn, ingest
from .needles import NeedleQueryPair, load_pairs

DATA = resources.files("aimem") / "data"


def data_path(name: str) -> Path:
    return Path(str(DATA / name))


def fixture_pairs() -> list[NeedleQueryPair]:
    """Six needle-query pairs spanning 1, 2 and 3 hops; ``Multi-Q2`` is among them."""
    return load_pairs(data_path("needle_pairs.jsonl"))


def milestones_corpus() -> Corpus:
    return ingest(data_path("milestones_corpus.jsonl"))


_TOPICS = {
    "work": (
        ["standup", "roadmap", "design review", "budget sheet", "hiring loop", "launch checklist",
         "customer call", "sprint retro", "API migration", "quarterly plan"],
        ["went longer than planned", "needs a follow-up on Thursday", "was mostly about scope",
         "surfaced two blockers", "ended with clear owners", "moved to next week"],
    ),
    "reading": (
        ["a history of cartography", "a novel set in Kyoto", "an essay on attention",
         "a biography of a chemist", "a book about city planning", "a memoir by a chef"],
        ["kept me up late", "had a slow middle section", "made me want to travel",
         "is worth rereading", "had great footnotes", "changed how I think about maps"],
    ),
    "garden": (
        ["tomato seedlings", "the basil pots", "the compost bin", "the lemon tree",
         "the new raised bed", "the herb spiral"],
        ["need more sun", "finally sprouted", "got aphids again", "look healthy this week",
         "need repotting soon", "survived the cold night"],
    ),
    "music": (
        ["piano scales", "the jazz playlist", "a concert downtown", "guitar chords",
         "the choir rehearsal", "a vinyl I found"],
        ["felt easier today", "was louder than expected", "took an hour of practice",
         "had a great bass line", "is stuck in my head", "was sold out"],
    ),
    "errands": (
        ["the bike repair", "the dentist appointment", "the apartment lease", "the car insurance",
         "the library card", "the tax form"],
        ["is sorted now", "needs a signature", "costs more than last year",
         "got rescheduled", "took two phone calls", "is due at the end of the month"],
    ),
}

_FILLER = [
    "Overall it was a decent day.",
    "I should write more of these down.",
    "Weather was grey but mild.",
    "Coffee at the corner place again.",
    "Slept a bit better than usual.",
    "Walked home instead of taking the bus.",
    "Need to call my parents this weekend.",
]


def _sentence(rng: random.Random) -> tuple[str, str]:
    topic = rng.choice(sorted(_TOPICS))
    subjects, predicates = _TOPICS[topic]
    return topic, f"{rng.choice(subjects).capitalize()} {rng.choice(predicates)}."


def synthetic_corpus(
    user_id: str,
    n_items: int = 120,
    seed: int = 0,
    start: datetime = datetime(2024, 4, 13, 8, 0, tzinfo=timezone.utc),
) -> Corpus:
    """Deterministic mix of notes and chat sessions about everyday topics."""
    rng = random.Random(f"{user_id}:{seed}")
    items = []
    ts = start
    for i in range(n_items):
        ts = ts + timedelta(hours=rng.randint(6, 30), minutes=rng.randint(0, 59))
        if rng.random() < 0.7:
            topic, first = _sentence(rng)
            body = [first] + [_sentence(rng)[1] for _ in range(rng.randint(3, 8))]
            body.append(rng.choice(_FILLER))
            items.append(
                Note(f"{user_id}-n{i:04d}", user_id, ts, f"{topic.capitalize()} notes",
                     first, " ".join(body))
            )
        else:
            turns = []
            at = ts
            for _ in range(rng.randint(1, 3)):
                _, q = _sentence(rng)
                turns.append(Turn("user", f"Quick thought: {q.lower()} Any advice?", at))
                at = at + timedelta(minutes=1)
                turns.append(Turn("assistant", "Sounds good. Keep a short list and check it tomorrow.", at))
                at = at + timedelta(minutes=2)
            items.append(ChatSession(f"{user_id}-c{i:04d}", user_id, ts, tuple(turns)))
    return Corpus.from_items(items, user_id=user_id)


def synthetic_corpora(count: int = 8, n_items: int = 120, seed: int = 0) -> list[Corpus]:
    return [synthetic_corpus(f"user{k + 1}", n_items, seed) for k in range(count)]
