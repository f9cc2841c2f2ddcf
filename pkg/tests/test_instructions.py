from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hkfr.behavior_store import build_sequence
from hkfr.fusion import mock_fuse
from hkfr.instructions import (
    DEFAULT_TASKS,
    InstructionExample,
    TaskTemplate,
    build_examples,
    expand_labels,
    export_dataset,
    load_tasks,
    read_examples,
    read_triples,
    sample_per_user,
    task_records,
)
from hkfr.prompts import render_sequence
from hkfr.synthetic import LabelRecord
from helpers import T0, make_event

CUTOFF = 1_683_590_400
CAT = TaskTemplate("cat", "category", "Top {k} categories?")
POI = TaskTemplate("poi", "poi", "Top {k} places?")


def _user(uid):
    seq = build_sequence(uid, [make_event(user_id=uid, ts=T0 + i, subject_id=f"s{i}") for i in range(3)])
    text = render_sequence(seq)
    return mock_fuse(text, seq), text


def _label(uid, kind, value, cutoff=CUTOFF, task_id=""):
    return LabelRecord(uid, task_id, kind, value, cutoff)


def test_default_registry_has_20_tasks():
    assert len(DEFAULT_TASKS) == 20
    assert len({t.task_id for t in DEFAULT_TASKS}) == 20
    assert {t.label_kind for t in DEFAULT_TASKS} == {"category", "poi", "merchant", "price_band"}


def test_cardinality():
    users = [f"u{i}" for i in range(10)]
    docs = [_user(u)[0] for u in users]
    labels = [_label(u, k, "x") for u in users for k in ("category", "poi")]
    build = build_examples(docs, labels, [CAT, POI], CUTOFF)
    assert len(build.examples) == 20


def test_missing_label_kind_skips_task():
    doc, _ = _user("u1")
    build = build_examples([doc], [_label("u1", "category", "Sichuan")], [CAT, POI], CUTOFF)
    assert [e.task_id for e in build.examples] == ["cat"]


def test_straddling_cutoff():
    docs = [_user("a")[0], _user("b")[0]]
    labels = [_label("a", "category", "Thai", CUTOFF - 100), _label("b", "category", "Thai", CUTOFF + 100)]
    build = build_examples(docs, labels, [CAT], CUTOFF)
    assert {e.user_id: e.split for e in build.examples} == {"a": "train", "b": "test"}


def test_missing_knowledge_is_skipped_not_fatal():
    doc, _ = _user("a")
    build = build_examples([doc], [_label("a", "category", "Thai"), _label("b", "category", "Thai")], [CAT], CUTOFF)
    assert [e.user_id for e in build.examples] == ["a"]
    assert build.skipped == [("b", "cat", "no knowledge document")]


def test_no_hkf_differs_only_in_input():
    doc, text = _user("a")
    labels = [_label("a", "category", "Sichuan")]
    full = build_examples([doc], labels, [CAT], CUTOFF).examples[0]
    raw = build_examples([], labels, [CAT], CUTOFF, "no_hkf", [text]).examples[0]
    assert full.input != raw.input
    assert (full.instruction, full.output, full.split) == (raw.instruction, raw.output, raw.split)
    assert raw.input == text.as_text(8000)


def test_instruction_substitutes_k():
    doc, _ = _user("a")
    ex = build_examples([doc], [_label("a", "category", "Thai")], [CAT], CUTOFF, k=5).examples[0]
    assert ex.instruction == "Top 5 categories?"


def _examples():
    return [
        InstructionExample("a/cat/1", "cat", "i", "in a", "Thai", "a", "train"),
        InstructionExample("b/cat/1", "cat", "i", "in b", "Ramen", "b", "train"),
        InstructionExample("c/cat/2", "cat", "i", "in c", "Dessert", "c", "test"),
    ]


def test_export_counts_and_digest(tmp_path):
    s1 = export_dataset(_examples(), tmp_path / "x")
    s2 = export_dataset(list(reversed(_examples())), tmp_path / "y")
    assert (s1.train_count, s1.test_count) == (2, 1)
    assert len((tmp_path / "x" / "train.jsonl").read_text().splitlines()) == 2
    assert len((tmp_path / "x" / "test.jsonl").read_text().splitlines()) == 1
    assert s1.sha256 == s2.sha256
    assert (tmp_path / "x" / "train.jsonl").read_bytes() == (tmp_path / "y" / "train.jsonl").read_bytes()


def test_export_round_trip(tmp_path):
    export_dataset(_examples(), tmp_path)
    assert read_examples(tmp_path / "examples.jsonl") == _examples()
    triples = read_triples(tmp_path / "train.jsonl") + read_triples(tmp_path / "test.jsonl")
    assert triples == [e.triple() for e in _examples()]


def test_read_triples_rejects_extra_fields(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text(json.dumps({"instruction": "i", "input": "x", "output": "o", "extra": 1}) + "\n")
    with pytest.raises(ValueError):
        read_triples(p)


def test_empty_fields_rejected():
    with pytest.raises(ValueError):
        InstructionExample("x", "cat", "i", "", "o", "u", "train")
    with pytest.raises(ValueError):
        TaskTemplate("t", "category", "no placeholder")


def test_task_registry_round_trip(tmp_path):
    p = tmp_path / "tasks.jsonl"
    p.write_text("".join(json.dumps(r) + "\n" for r in task_records(DEFAULT_TASKS)))
    assert load_tasks(p) == list(DEFAULT_TASKS)


def test_expand_labels_per_task():
    out = expand_labels([_label("u", "poi", "Noodle Bar")], DEFAULT_TASKS)
    assert sorted(l.task_id for l in out) == sorted(t.task_id for t in DEFAULT_TASKS if t.label_kind == "poi")


def test_sample_per_user_reproducible():
    docs = [_user("a")[0]]
    labels = [_label("a", "category", "Thai")]
    examples = build_examples(docs, labels, DEFAULT_TASKS, CUTOFF).examples
    a = sample_per_user(examples, 3, seed=1)
    assert a == sample_per_user(examples, 3, seed=1)
    assert len(a) == 3


_text = st.text(min_size=1, max_size=40)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(_text, _text, _text, st.booleans()), min_size=1, max_size=15))
def test_round_trip_property(tmp_path_factory, rows):
    examples = [
        InstructionExample(f"u{i}/t/{i}", "t", ins, inp, out, f"u{i}", "train" if tr else "test")
        for i, (ins, inp, out, tr) in enumerate(rows)
    ]
    d = tmp_path_factory.mktemp("ds")
    export_dataset(examples, d)
    back = read_triples(d / "train.jsonl") + read_triples(d / "test.jsonl")
    ordered = sorted(examples, key=lambda e: (e.split != "train", e.user_id))
    assert back == [e.triple() for e in ordered]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abcdef"), st.integers(CUTOFF - 50, CUTOFF + 50)), min_size=1, max_size=20))
def test_split_purity(pairs):
    docs = [_user(u)[0] for u in sorted({u for u, _ in pairs})]
    labels = [_label(u, "category", "Thai", c) for u, c in pairs]
    build = build_examples(docs, labels, [CAT], CUTOFF)
    for ex in build.examples:
        cutoff = int(ex.example_id.rsplit("/", 1)[1])
        assert ex.split == ("train" if cutoff < CUTOFF else "test")
    keys = [(e.user_id, e.task_id, e.example_id) for e in build.examples]
    assert len(keys) == len(set(keys))
