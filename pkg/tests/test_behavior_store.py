from __future__ import annotations

import json
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hkfr.behavior_store import (
    AnonymizationPolicy,
    BehaviorStore,
    CorruptPartition,
    InvalidEvent,
    anonymize_event,
    build_sequence,
    ingest_events,
    mask_value,
    parse_event,
)
from helpers import T0, make_event


def test_ingest_counts_rejects_by_reason(tmp_path):
    events = [make_event(ts=T0 + i) for i in range(3)]
    bad = make_event().to_dict() | {"timestamp": 0}
    summary = ingest_events([*events, bad], tmp_path)
    assert (summary.accepted, summary.rejected) == (3, 1)
    assert summary.reject_reasons == {"nonpositive timestamp": 1}


def test_ingest_empty_stream(tmp_path):
    summary = ingest_events([], tmp_path)
    assert (summary.accepted, summary.rejected) == (0, 0)
    assert BehaviorStore(tmp_path).list_users() == []


def test_reingest_is_idempotent(tmp_path):
    ev = make_event()
    store = BehaviorStore(tmp_path)
    first = store.ingest([ev])
    second = store.ingest([ev, ev.to_json()])
    assert first.accepted + second.accepted == 1
    assert second.duplicates == 2
    lines = store.partition_path("u1").read_text().splitlines()
    assert len(lines) == 1


@pytest.mark.parametrize(
    "patch, reason",
    [
        ({"price_minor": -1}, "negative price"),
        ({"price_minor": None}, "missing price for product order"),
        ({"subject_kind": "shop"}, "invalid subject_kind"),
        ({"content_kind": "like"}, "invalid content_kind"),
        ({"scenario": "web"}, "invalid scenario"),
        ({"timestamp": -5}, "nonpositive timestamp"),
        ({"user_id": ""}, "empty user_id"),
        ({"colour": "red"}, "unknown keys"),
    ],
)
def test_parse_event_rejections(patch, reason):
    rec = make_event().to_dict() | patch
    with pytest.raises(InvalidEvent) as exc:
        parse_event(rec)
    assert exc.value.reason == reason


def test_parse_event_missing_field_and_optional_fields():
    rec = make_event().to_dict()
    del rec["category"]
    with pytest.raises(InvalidEvent, match="missing field"):
        parse_event(rec)
    rec = make_event(content_kind="click").to_dict()
    del rec["attributes"]
    rec["price_minor"] = None
    assert parse_event(rec).attributes == {}


def test_malformed_line_is_rejected(tmp_path):
    summary = ingest_events(["{not json", make_event().to_json()], tmp_path)
    assert summary.reject_reasons == {"malformed json": 1}
    assert summary.accepted == 1


def test_sequence_small_user_newest_first(tmp_path):
    store = BehaviorStore(tmp_path)
    store.ingest([make_event(ts=T0), make_event(ts=T0 + 10, subject_id="p2")])
    seq = store.get_user_sequence("u1", 300)
    assert [e.timestamp for e in seq.events] == [T0 + 10, T0]


def test_sequence_cap_keeps_newest(tmp_path):
    store = BehaviorStore(tmp_path)
    store.ingest([make_event(ts=T0 + i) for i in range(350)])
    seq = store.get_user_sequence("u1", 300)
    assert len(seq) == 300
    assert seq.events[0].timestamp == T0 + 349
    assert seq.events[-1].timestamp == T0 + 50
    assert min(e.timestamp for e in seq.events) > T0 + 49


def test_unknown_user_empty(tmp_path):
    assert len(BehaviorStore(tmp_path).get_user_sequence("nobody")) == 0


def test_tie_order_subject_then_content():
    evs = [
        make_event(subject_id="b", content_kind="click"),
        make_event(subject_id="a", content_kind="order"),
        make_event(subject_id="a", content_kind="click"),
    ]
    seq = build_sequence("u1", evs)
    assert [(e.subject_id, e.content_kind) for e in seq.events] == [("a", "click"), ("a", "order"), ("b", "click")]


def test_odd_user_ids_round_trip(tmp_path):
    store = BehaviorStore(tmp_path)
    uids = ["a/b", "..", "ü ser", "x%2Fy"]
    store.ingest([make_event(user_id=u) for u in uids])
    assert store.list_users() == sorted(uids)
    for u in uids:
        assert store.read_events(u)[0].user_id == u


def test_truncated_partition_is_corrupt(tmp_path):
    store = BehaviorStore(tmp_path)
    store.ingest([make_event()])
    path = store.partition_path("u1")
    path.write_text(path.read_text()[:-5])
    with pytest.raises(CorruptPartition):
        store.read_events("u1")


def test_foreign_record_is_corrupt(tmp_path):
    store = BehaviorStore(tmp_path)
    store.ingest([make_event()])
    with store.partition_path("u1").open("a") as fh:
        fh.write(make_event(user_id="u2").to_json() + "\n")
    with pytest.raises(CorruptPartition, match="foreign"):
        store.read_events("u1")


def test_concurrent_ingest_keeps_all_lines(tmp_path):
    store = BehaviorStore(tmp_path)
    batches = [[make_event(ts=T0 + 1000 * b + i) for i in range(50)] for b in range(8)]
    threads = [threading.Thread(target=store.ingest, args=(b,)) for b in batches]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    lines = store.partition_path("u1").read_text().splitlines()
    assert len(lines) == 400
    assert all(json.loads(l)["user_id"] == "u1" for l in lines)


def test_anonymization():
    policy = AnonymizationPolicy(b"salt")
    ev = make_event()
    a, b = anonymize_event(ev, policy), anonymize_event(ev, policy)
    assert a == b
    assert a.user_id == mask_value("u1", b"salt") != "u1"
    assert a.subject_id != ev.subject_id
    assert a.category == ev.category
    assert mask_value("u1", b"salt") != mask_value("u2", b"salt")
    with pytest.raises(ValueError):
        AnonymizationPolicy(b"")


def test_mask_injective_on_large_corpus():
    masked = {mask_value(f"user-{i}", b"pepper") for i in range(1_000_000)}
    assert len(masked) == 1_000_000


_events = st.builds(
    make_event,
    ts=st.integers(1, 2_000_000_000),
    content_kind=st.sampled_from(["exposure", "click", "order"]),
    subject_id=st.sampled_from(["p1", "p2", "p3"]),
    scenario=st.sampled_from(["app_homepage", "mini_program", "search", "other"]),
    price_minor=st.integers(0, 9000),
)


@settings(max_examples=40, deadline=None)
@given(st.lists(_events, max_size=40), st.integers(1, 40), st.integers(1, 40))
def test_cap_prefix_property(events, c1, c2):
    lo, hi = sorted((c1, c2))
    a = build_sequence("u1", events, lo).events
    b = build_sequence("u1", events, hi).events
    assert b[: len(a)] == a


@settings(max_examples=25, deadline=None)
@given(st.lists(_events, max_size=30))
def test_ingest_round_trip_property(tmp_path_factory, events):
    root = tmp_path_factory.mktemp("store")
    store = BehaviorStore(root)
    summary = store.ingest(events)
    stored = store.read_events("u1")
    assert summary.accepted == len(stored)
    assert sorted(e.to_json() for e in stored) == sorted({e.to_json() for e in events})
