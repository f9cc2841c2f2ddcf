from __future__ import annotations

import json
import threading
from collections import defaultdict

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hkfr.backends import MockBackend
from hkfr.behavior_store import build_sequence
from hkfr.fusion import (
    EMPTY_SENTINEL,
    PROMPT_SHA256,
    FusionConfig,
    FusionError,
    KnowledgeDocument,
    PriceStats,
    compute_facets,
    event_merchant,
    fuse,
    fuse_batch,
    mock_fuse,
    nearest_rank,
)
from hkfr.prompts import render_sequence
from helpers import T0, make_event


class EchoBackend:
    backend_id = "echo"
    model_name = "echo-1"
    deterministic = False

    def __init__(self, fail_for=()):
        self.calls = 0
        self.fail_for = set(fail_for)
        self.lock = threading.Lock()
        self.in_flight = 0
        self.peak = 0

    def fusion_text(self, messages, facets, names):
        with self.lock:
            self.calls += 1
            self.in_flight += 1
            self.peak = max(self.peak, self.in_flight)
        try:
            user = messages[1].content
            if any(u in user for u in self.fail_for):
                raise RuntimeError("boom")
            return "summary of " + str(len(user))
        finally:
            with self.lock:
                self.in_flight -= 1


def _seq(events, uid="u1"):
    return build_sequence(uid, events)


def test_empty_input_sentinel():
    seq = _seq([])
    doc = fuse(render_sequence(seq), seq, MockBackend())
    assert doc.text == EMPTY_SENTINEL
    assert doc.facets.top_categories == ()
    assert doc.facets.price_stats is None


def test_weighted_category_counts():
    evs = [make_event(ts=T0 + i, subject_id=f"s{i}", category="Sichuan") for i in range(5)]
    evs += [make_event(ts=T0 + 10 + i, subject_id=f"d{i}", category="Dessert", content_kind="click") for i in range(2)]
    facets = compute_facets(_seq(evs))
    assert facets.top_categories == (("Sichuan", 50), ("Dessert", 6))


def test_price_percentiles():
    one = compute_facets(_seq([make_event(price_minor=2000)]))
    assert one.price_stats == PriceStats(2000, 2000, 2000)
    three = compute_facets(_seq([make_event(ts=T0 + i, price_minor=p) for i, p in enumerate([3000, 1000, 2000])]))
    assert three.price_stats == PriceStats(2000, 1000, 3000)


def test_clicks_only_no_price_stats():
    facets = compute_facets(_seq([make_event(content_kind="click")]))
    assert facets.price_stats is None
    assert facets.top_categories == (("Sichuan", 3),)


def test_nearest_rank():
    assert nearest_rank([1, 2, 3, 4], 50) == 2
    assert nearest_rank([1, 2, 3, 4], 75) == 3
    assert nearest_rank([5], 25) == 5


def test_mock_deterministic_bytes():
    evs = [make_event(ts=T0 + i, subject_id=f"s{i}") for i in range(20)]
    seq = _seq(evs)
    a = fuse(render_sequence(seq), seq, MockBackend()).to_dict()
    b = fuse(render_sequence(seq), seq, MockBackend()).to_dict()
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    assert a["provenance"]["prompt_sha256"] == PROMPT_SHA256


def test_document_round_trip():
    seq = _seq([make_event(ts=T0 + i, subject_id=f"s{i}") for i in range(4)])
    doc = mock_fuse(render_sequence(seq), seq)
    assert KnowledgeDocument.from_dict(json.loads(json.dumps(doc.to_dict()))) == doc


def test_backend_failure_wrapped_and_batch_continues():
    seqs = [_seq([make_event(user_id=u, subject_name=f"dish-{u}")], u) for u in ("a", "b", "c")]
    backend = EchoBackend(fail_for={"dish-b"})
    run = fuse_batch([(render_sequence(s), s) for s in seqs], backend)
    assert [d.user_id for d in run.documents] == ["a", "c"]
    assert [f.user_id for f in run.failures] == ["b"]
    assert isinstance(run.failures[0], FusionError)


def test_empty_backend_text_is_error():
    class Blank(EchoBackend):
        def fusion_text(self, messages, facets, names):
            return "  "

    seq = _seq([make_event()])
    with pytest.raises(FusionError):
        fuse(render_sequence(seq), seq, Blank())


def test_concurrency_bound():
    seqs = [_seq([make_event(user_id=f"u{i}")], f"u{i}") for i in range(40)]
    backend = EchoBackend()
    fuse_batch([(render_sequence(s), s) for s in seqs], backend, FusionConfig(concurrency=3))
    assert backend.peak <= 3


def test_cache_skips_backend(tmp_path):
    seq = _seq([make_event()])
    backend = EchoBackend()
    cfg = FusionConfig(cache_dir=tmp_path)
    first = fuse(render_sequence(seq), seq, backend, cfg)
    second = fuse(render_sequence(seq), seq, backend, cfg)
    assert backend.calls == 1
    assert first.text == second.text


_events = st.builds(
    make_event,
    ts=st.integers(T0, T0 + 10**6),
    content_kind=st.sampled_from(["exposure", "click", "order"]),
    subject_kind=st.sampled_from(["merchant", "product"]),
    subject_id=st.sampled_from(["s1", "s2", "s3", "s4"]),
    category=st.sampled_from(["Sichuan", "Dessert", "Ramen"]),
    scenario=st.sampled_from(["app_homepage", "mini_program", "search", "other"]),
    price_minor=st.integers(0, 9000),
)


@settings(max_examples=60, deadline=None)
@given(st.lists(_events, max_size=50))
def test_facets_backend_independent_and_recount(events):
    seq = _seq(events)
    text = render_sequence(seq)
    facets = fuse(text, seq, EchoBackend()).facets
    assert facets == mock_fuse(text, seq).facets
    counts = defaultdict(lambda: defaultdict(int))
    for e in seq.events:
        counts[e.category][e.content_kind] += 1
    for cat, n in counts.items():
        assert facets.category_weight(cat) == 10 * n["order"] + 3 * n["click"] + n["exposure"]
    merchants = defaultdict(int)
    for e in seq.events:
        if event_merchant(e):
            merchants[event_merchant(e)] += {"order": 10, "click": 3, "exposure": 1}[e.content_kind]
    assert dict(facets.top_merchants) == dict(merchants)
