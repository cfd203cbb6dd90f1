from __future__ import annotations

import random

import pytest

from aimem.corpus import Corpus
from aimem.errors import CycleRejected, EmptyEvidence, EmptyMemory, UnknownTag, UserError
from aimem.memory import (
    Granularity,
    Kind,
    MemoryItem,
    MemoryStore,
    Taxonomy,
    build_global,
    check_provenance,
    extract_fine_tags,
    extract_preferences,
    extract_social,
    find_conflicts,
    mine_trend,
    propose_parent,
    rollup_tag,
    summarize_interaction,
    topic_items,
)
from aimem.providers import mock_provider

from conftest import chat, note, random_corpus


def jordan_taxonomy() -> Taxonomy:
    tax = Taxonomy()
    tax.add("Michael Jordan", "NBA")
    tax.add("nba", "basketball")
    tax.add("basketball", "sports")
    return tax


def test_rollup_example_chain():
    tax = jordan_taxonomy()
    assert rollup_tag("michael jordan", tax, 2) == ["nba", "basketball"]
    assert rollup_tag("michael jordan", tax, 5) == ["nba", "basketball", "sports"]
    assert rollup_tag("michael jordan", tax, 0) == []
    assert tax.level("sports") == 0 and tax.level("michael jordan") == 3
    with pytest.raises(UnknownTag):
        rollup_tag("larry bird", tax)


def test_cycles_rejected():
    tax = jordan_taxonomy()
    with pytest.raises(CycleRejected):
        tax.set_parent("sports", "michael jordan")
    with pytest.raises(CycleRejected):
        tax.set_parent("nba", "nba")
    assert rollup_tag("michael jordan", tax, 3) == ["nba", "basketball", "sports"]


def test_propose_parent_caches():
    tax = Taxonomy()
    tax.add("Michael Jordan")
    p = mock_provider("t", {"rules": [{"match": "michael jordan", "response": "- NBA\n"}]})
    propose_parent("michael jordan", tax, p)
    propose_parent("michael jordan", tax, p)
    assert tax.parents["michael jordan"] == "nba"
    assert p.network_calls == 1
    assert Taxonomy.from_dict(tax.to_dict()).parents == tax.parents


def test_propose_parent_cycle_from_provider():
    tax = jordan_taxonomy()
    tax.set_parent("sports", "orphan")
    bad = mock_provider("t", {"default": "michael jordan"})
    with pytest.raises(CycleRejected):
        propose_parent("orphan", tax, bad)
    tax.validate()
    assert tax.parents["orphan"] is None and "orphan" not in tax.proposals


def test_fine_tags_and_topics():
    item = note(1, "Watched Michael Jordan highlights with Sam.")
    p = mock_provider("t", {"default": "Michael Jordan, basketball highlights\nSam"})
    tax = Taxonomy()
    tags = extract_fine_tags(item, p, tax)
    assert tags == ["michael jordan", "basketball highlights", "sam"]
    assert "sam" in tax
    topics = topic_items(item, tags)
    assert all(t.kind is Kind.TOPIC and t.source_refs == ("n1",) for t in topics)


def test_preferences_keep_other_subjects_apart():
    item = chat(1, "Try to avoid spicy food for me.", "Noted.",
                "Alice prefers butter rather than bacon, note this for me.", "Sure.")
    reply = "user | dislike | spicy food\nAlice | prefer | butter | bacon\nbad line"
    prefs = extract_preferences(item, mock_provider("p", {"default": reply}))
    assert [p.text for p in prefs] == ["User dislikes spicy food.", "Alice prefers butter over bacon."]
    assert prefs[0].details == {"subject": "user", "polarity": "dislike", "object": "spicy food"}
    assert prefs[1].details["attributed_to"] == "social_connection"
    assert all(p.kind is Kind.PREFERENCE and p.source_refs == ("c1",) for p in prefs)


def test_social_merges_across_items():
    items = [note(1, "Lunch with Emmy."), note(2, "Emmy called about the trip."), note(3, "Quiet day.")]
    replies = {"Lunch": "Emmy | friend", "called": "Emmy", "Quiet": "none"}
    p = mock_provider("s", responder=lambda m: next(v for k, v in replies.items() if k in m[0].content))
    people = extract_social(items, p)
    assert len(people) == 1
    assert people[0].text == "Emmy (friend)"
    assert people[0].source_refs == ("n1", "n2")


def test_summary_sentences_and_bio():
    item = note(1, "Ran 5k this morning.")
    p = mock_provider("s", {"rules": [{"match": "Summarize", "response": "User ran 5k.\nUser felt good."}],
                            "default": "I am a runner. I like mornings."})
    sents = summarize_interaction(item, p)
    assert [s.text for s in sents] == ["User ran 5k.", "User felt good."]
    bio = build_global(sents, p)
    assert bio.granularity is Granularity.GLOBAL and bio.kind is Kind.BIO
    with pytest.raises(EmptyMemory):
        build_global([], p)


def test_trend_window_and_evidence(tmp_path):
    corpus = Corpus.from_items([note(i, f"Ran {i} km.") for i in range(1, 6)])
    items = []
    for item in corpus.items:
        items += topic_items(item, ["running"])
    p = mock_provider("t", {"default": "Distances grow steadily."})
    start = corpus.items[1].timestamp
    end = corpus.items[3].timestamp
    trend = mine_trend("running", (start, end), items, p)
    assert trend.kind is Kind.TREND
    assert trend.source_refs == ("n2", "n3", "n4")
    with pytest.raises(EmptyEvidence):
        mine_trend("cooking", (start, end), items, p)
    # roll-up aware: a query for the parent tag picks up child-tagged evidence
    tax = Taxonomy()
    tax.add("running", "exercise")
    assert mine_trend("exercise", (None, None), items, p, tax).source_refs[0] == "n1"


def test_store_roundtrip_and_user_isolation(tmp_path):
    store = MemoryStore(tmp_path / "mem")
    item = MemoryItem.new("u1", Kind.SENTENCE, Granularity.SENTENCE, "User ran.", ["n1"])
    assert store.add([item, item]) == 1
    store.taxonomy.add("running", "exercise")
    store.save_taxonomy()
    again = MemoryStore(tmp_path / "mem")
    assert again.items == [item]
    assert again.taxonomy.parents == store.taxonomy.parents
    other = MemoryItem.new("u2", Kind.SENTENCE, Granularity.SENTENCE, "User swam.", ["n2"])
    with pytest.raises(UserError):
        again.add([other])


def test_item_invariants():
    with pytest.raises(UserError):
        MemoryItem.new("u", Kind.SENTENCE, Granularity.SENTENCE, "x", [])
    with pytest.raises(UserError):
        MemoryItem.new("u", Kind.BIO, Granularity.SENTENCE, "x", ["n1"])
    item = MemoryItem.new("u", Kind.TOPIC, Granularity.FINE_TAG, "x", ["n1"], tags=["x"], k=1)
    assert MemoryItem.from_record(item.to_record()) == item


def test_conflicts_flag_polarity_mismatch():
    a = MemoryItem.new("u", Kind.PREFERENCE, Granularity.SENTENCE, "User likes spicy food.", ["n1"])
    b = MemoryItem.new("u", Kind.PREFERENCE, Granularity.SENTENCE, "User avoids spicy food.", ["n2"])
    c = MemoryItem.new("u", Kind.PREFERENCE, Granularity.SENTENCE, "User likes jazz.", ["n3"])
    conflicts = find_conflicts([a, b, c])
    assert [(x.first, x.second) for x in conflicts] == [(a.id, b.id)]


def _random_replies(rng: random.Random):
    names = ["Emmy", "Alice", "Sam", "Lena", "Omar"]
    topics = ["running", "jazz", "pasta", "travel", "budget"]

    def respond(messages):
        prompt = messages[0].content
        if prompt.startswith("Summarize"):
            return "\n".join(f"User mentioned {rng.choice(topics)}." for _ in range(rng.randint(0, 3)))
        if prompt.startswith("List the specific"):
            return ", ".join(rng.sample(topics, rng.randint(0, 3)))
        if prompt.startswith("Extract preferences"):
            return f"{rng.choice(['user', 'Alice'])} | {rng.choice(['like', 'dislike'])} | {rng.choice(topics)}"
        if prompt.startswith("List the people"):
            return "\n".join(rng.sample(names, rng.randint(0, 2))) or "none"
        return "I am a person who writes notes."

    return respond


@pytest.mark.parametrize("seed", range(10))
def test_provenance_property(seed):
    rng = random.Random(seed)
    corpus = random_corpus(rng, rng.randint(3, 15))
    p = mock_provider("x", responder=_random_replies(rng))
    items = []
    for item in corpus.items:
        items += summarize_interaction(item, p)
        items += topic_items(item, extract_fine_tags(item, p))
        items += extract_preferences(item, p)
    items += extract_social(corpus.items, p)
    items.append(build_global(items or [MemoryItem.new("u1", Kind.BIO, Granularity.GLOBAL, "seed")], p))
    assert check_provenance(items, corpus) == []
    forged = MemoryItem.new("u1", Kind.SENTENCE, Granularity.SENTENCE, "User x.", ["missing"])
    assert check_provenance(items + [forged], corpus) == [forged.id]
