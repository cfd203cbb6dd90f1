from __future__ import annotations

import random
from fractions import Fraction

import pytest

from aimem.corpus import DEFAULT_COUNTER, assemble_haystack, render_item
from aimem.errors import MalformedRecord, UserError
from aimem.fixtures import fixture_pairs
from aimem.needles import (
    NeedleQueryPair,
    PlacementMode,
    inject,
    load_pairs,
    nearest_boundary,
    parse_mode,
    plan_depths,
    screen_conflicts,
)
from aimem.providers import mock_provider

from conftest import note, random_corpus, write_jsonl
from aimem.corpus import Corpus


def test_multi_uniform_depths():
    assert plan_depths(PlacementMode.MULTI_UNIFORM, 5).depths == (0.0, 0.2, 0.4, 0.6, 0.8)
    assert plan_depths("multi", 1).depths == (0.0,)
    for k in range(1, 12):
        got = plan_depths("multi", k).depths
        assert [Fraction(d).limit_denominator(100) for d in got] == [Fraction(i, k) for i in range(k)]


def test_single_combined_depths():
    assert plan_depths("single", 7, 0.4).depths == (0.4,)
    assert plan_depths("single", 7, 0.6).depths == (0.6,)
    with pytest.raises(UserError):
        plan_depths("single", 3, 0.5)
    with pytest.raises(UserError):
        plan_depths("multi", 0)
    with pytest.raises(UserError):
        plan_depths("multi", 3, 0.4)


def test_parse_mode_labels():
    assert parse_mode("multi") == (PlacementMode.MULTI_UNIFORM, None)
    assert parse_mode("single@0.4") == (PlacementMode.SINGLE_COMBINED, 0.4)
    assert plan_depths("single", 2, 0.6).label == "single@0.6"
    for bad in ("single@0.5", "uniform", "single"):
        with pytest.raises(UserError):
            parse_mode(bad)


def test_fixture_pairs_include_multi_q2():
    pairs = {p.id: p for p in fixture_pairs()}
    assert len(pairs) == 6
    assert sorted(p.hops for p in pairs.values()) == [1, 1, 2, 2, 3, 3]
    mq = pairs["Multi-Q2"]
    assert len(mq.needles) == 7
    assert mq.needles[0] == "I don't particularly enjoy butter, skip it."
    assert mq.needles[-1] == "Alice prefers butter rather than bacon, note this for me."
    assert mq.hops == 2 and mq.difficulty == "High"
    assert mq.query.endswith("Try to think step by step.")


def test_pair_validation(tmp_path):
    with pytest.raises(UserError):
        NeedleQueryPair("x", (), "q", "a", "Low", 1)
    with pytest.raises(UserError):
        NeedleQueryPair("x", ("n",), "q", "a", "Low", 4)
    with pytest.raises(UserError):
        NeedleQueryPair("x", ("n",), "q", " ", "Low", 1)
    path = tmp_path / "p.jsonl"
    write_jsonl(path, [{"id": "a", "needles": ["n"], "query": "q", "true_answer": "t", "hop": 1},
                       {"id": "b", "query": "q", "true_answer": "t", "hop": 1}])
    with pytest.raises(MalformedRecord) as exc:
        load_pairs(path)
    assert exc.value.line == 2
    p = NeedleQueryPair.from_record({"id": "a", "needles": ["n"], "query": "q", "true_answer": "t",
                                     "hop": "3-hop", "difficulty": "Low"})
    assert p.hops == 3
    assert NeedleQueryPair.from_record(p.to_record()) == p


def test_nearest_boundary_ties_go_left():
    assert nearest_boundary([0, 10, 20], 15) == 1
    assert nearest_boundary([0, 10, 20], 16) == 2
    assert nearest_boundary([0, 10, 20], 0) == 0
    assert nearest_boundary([0, 10, 20], 99) == 2


def _oracle_slot(boundaries, depth, length):
    target = int(Fraction(depth).limit_denominator(1000) * length + Fraction(1, 2))
    dists = [(abs(b - target), i) for i, b in enumerate(boundaries)]
    return target, min(dists)[1]


@pytest.mark.parametrize("seed", range(15))
def test_injection_matches_oracle(seed):
    rng = random.Random(seed)
    corpus = random_corpus(rng, rng.randint(3, 30))
    hs = assemble_haystack(corpus, 10_000)
    k = rng.randint(1, 6)
    pair = NeedleQueryPair("P", tuple(f"needle {i} about {rng.random():.3f}" for i in range(k)),
                           "q?", "a", "Low", 1)
    plan = plan_depths("multi", k)
    inj = inject(hs, pair, plan)
    for i, injection in enumerate(inj.injections):
        target, slot = _oracle_slot(hs.boundaries, plan.depths[injection.needle_indices[0]], hs.token_length)
        assert injection.target_token_offset == target
        assert injection.chosen_boundary_offset == hs.boundaries[slot]
    needle_tokens = sum(inj.items[j.inserted_position].tokens for j in inj.injections)
    assert inj.token_length == hs.token_length + needle_tokens
    assert DEFAULT_COUNTER(inj.rendered_text) == inj.token_length
    # original items keep their relative order
    originals = [i.item_id for i in inj.items if not i.item_id.startswith("needle-")]
    assert originals == [i.item_id for i in hs.items]
    # timestamps stay chronological
    stamps = [i.timestamp for i in inj.items]
    assert stamps == sorted(stamps)


def test_single_mode_combines_needles():
    corpus = random_corpus(random.Random(3), 12)
    hs = assemble_haystack(corpus, 10_000)
    pair = fixture_pairs()[2]
    inj = inject(hs, pair, plan_depths("single", len(pair.needles), 0.6))
    assert len(inj.injections) == 1
    item = inj.items[inj.injections[0].inserted_position]
    for n in pair.needles:
        assert f"USER: {n}" in item.text


def test_needles_render_as_user_turns_without_marker(small_corpus):
    hs = assemble_haystack(small_corpus, 10_000)
    pair = NeedleQueryPair("P", ("I keep my spare key under the blue pot.",), "q", "a", "Low", 1)
    inj = inject(hs, pair, plan_depths("multi", 1))
    text = inj.items[inj.injections[0].inserted_position].text
    assert text.startswith("## Chat, ")
    assert "needle" not in text.lower()


def test_inject_is_deterministic(small_corpus):
    hs = assemble_haystack(small_corpus, 10_000)
    pair = fixture_pairs()[2]
    a = inject(hs, pair, plan_depths("multi", len(pair.needles)))
    b = inject(hs, pair, plan_depths("multi", len(pair.needles)))
    assert a.rendered_text.encode() == b.rendered_text.encode()
    assert a.injections == b.injections


def test_plan_length_mismatch(small_corpus):
    hs = assemble_haystack(small_corpus, 10_000)
    pair = NeedleQueryPair("P", ("a", "b"), "q", "a", "Low", 1)
    with pytest.raises(UserError):
        inject(hs, pair, plan_depths("multi", 3))


def test_conflict_screen_lexical_and_checker():
    corpus = Corpus.from_items([
        note(1, "I love spicy food, the hotter the better."),
        note(2, "Bought new running shoes today."),
    ])
    hs = assemble_haystack(corpus, 10_000)
    pair = NeedleQueryPair("P", ("Try to avoid spicy food for me.",), "q", "a", "Low", 1)
    flags = screen_conflicts(hs, pair)
    assert [f.item_position for f in flags] == [0]
    assert "spicy" in flags[0].shared_words
    yes = mock_provider("chk", {"default": "Yes, they contradict."})
    no = mock_provider("chk", {"default": "No."})
    assert len(screen_conflicts(hs, pair, yes)) == 1
    assert screen_conflicts(hs, pair, no) == []
    assert render_item(corpus.items[0])
