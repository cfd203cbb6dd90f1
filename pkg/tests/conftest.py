from __future__ import annotations

import json
import random
from datetime import datetime, timedelta, timezone

import pytest

from aimem.corpus import ChatSession, Corpus, Note, Turn

T0 = datetime(2024, 4, 13, 8, 0, tzinfo=timezone.utc)

WORDS = (
    "apple river stone garden piano coffee morning train window letter market "
    "mountain sister laptop budget recipe bicycle museum candle harbor"
).split()


def note(i: int, content: str, user: str = "u1", at: datetime | None = None, title: str = "t",
         summary: str = "") -> Note:
    return Note(f"n{i}", user, at or T0 + timedelta(hours=i), title, summary, content)


def chat(i: int, *texts: str, user: str = "u1", at: datetime | None = None) -> ChatSession:
    at = at or T0 + timedelta(hours=i)
    turns = tuple(
        Turn("user" if k % 2 == 0 else "assistant", t, at + timedelta(minutes=k))
        for k, t in enumerate(texts)
    )
    return ChatSession(f"c{i}", user, at, turns)


def random_corpus(rng: random.Random, n: int, user: str = "u1") -> Corpus:
    items = []
    at = T0
    for i in range(n):
        at = at + timedelta(hours=rng.randint(1, 40))
        words = " ".join(rng.choice(WORDS) for _ in range(rng.randint(3, 60)))
        if rng.random() < 0.75:
            items.append(note(i, words.capitalize() + ".", user, at, title=rng.choice(WORDS)))
        else:
            items.append(chat(i, words + "?", "Sure, noted.", user=user, at=at))
    return Corpus.from_items(items, user_id=user)


@pytest.fixture
def small_corpus() -> Corpus:
    return Corpus.from_items(
        [
            note(1, "Went hiking near the lake. The trail was muddy."),
            chat(2, "Can you suggest a pasta recipe?", "Try cacio e pepe."),
            note(3, "Booked train tickets to Lyon for the conference."),
            note(4, "Started reading a novel about lighthouses."),
        ]
    )


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
