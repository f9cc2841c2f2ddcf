from __future__ import annotations

import math
from collections import Counter

import pytest

from hkfr.behavior_store import BehaviorEvent, parse_event
from hkfr.catalog import default_catalog
from hkfr.synthetic import (
    DAY,
    SyntheticProfile,
    _generate_stream,
    derive_labels,
    generate_corpus,
    generate_events,
    generate_profiles,
)

CUTOFF = 1_683_590_400


def test_profiles_deterministic():
    a = [p.to_json() for p in generate_profiles(1, 7)]
    b = [p.to_json() for p in generate_profiles(1, 7)]
    assert a == b


def test_profiles_distinct_ids_and_weights_sum():
    profiles = generate_profiles(500, 3)
    assert len({p.user_id for p in profiles}) == 500
    for p in profiles:
        ws = [w for _, w in p.category_weights]
        assert abs(math.fsum(ws) - 1.0) <= 1e-9
        assert len(set(ws)) == len(ws)
        assert ws == sorted(ws, reverse=True)


def test_profile_round_trip():
    for p in generate_profiles(5, 11):
        assert SyntheticProfile.from_dict(p.to_dict()) == p


def test_profiles_reject_zero_users():
    with pytest.raises(ValueError):
        generate_profiles(0, 1)


def test_single_category_noise_free_orders():
    cat = default_catalog()
    m = cat.merchants_by_category["Sichuan"][0]
    profile = SyntheticProfile("solo", (("Sichuan", 1.0),), (2000, 3000), (m.merchant_id,), 0.0, 99)
    events, labels = generate_events(profile, 60, CUTOFF)
    orders = [e for e in events if e.content_kind == "order"]
    assert orders and all(e.category == "Sichuan" for e in orders)
    assert {l.label_kind: l.label_value for l in labels}["category"] == "Sichuan"


def test_noise_rate_empirical_frequency():
    cat = default_catalog()
    flags = []
    for p in generate_profiles(120, 5, noise_rate=0.5):
        flags.extend(_generate_stream(p, 60, CUTOFF, cat).order_noise)
    assert len(flags) >= 1000
    assert abs(sum(flags) / len(flags) - 0.5) <= 0.05


def test_generated_events_valid_and_before_cutoff():
    corpus = generate_corpus(30, 2, CUTOFF, noise_rate=0.3, train_fraction=0.5)
    for e in corpus.events:
        assert parse_event(e.to_dict()) == e
        assert e.timestamp < corpus.user_cutoffs[e.user_id]
    for lab in corpus.labels:
        assert lab.cutoff_timestamp == corpus.user_cutoffs[lab.user_id]


def test_corpus_deterministic():
    def dump(c):
        return (
            [p.to_json() for p in c.profiles],
            [e.to_json() for e in c.events],
            [l.to_dict() for l in c.labels],
        )

    assert dump(generate_corpus(40, 9, CUTOFF, 0.2)) == dump(generate_corpus(40, 9, CUTOFF, 0.2))


def test_oracle_recoverability_noise_free():
    corpus = generate_corpus(300, 21, CUTOFF, 0.0)
    counts: dict[str, Counter] = {}
    for e in corpus.events:
        if e.content_kind == "order":
            counts.setdefault(e.user_id, Counter())[e.category] += 1
    for p in corpus.profiles:
        top = max(counts[p.user_id].items(), key=lambda kv: kv[1])[0]
        assert top == p.top_category


def test_noise_levels_share_planted_preferences():
    a = generate_profiles(20, 4, noise_rate=0.0)
    b = generate_profiles(20, 4, noise_rate=0.6)
    assert [p.category_weights for p in a] == [p.category_weights for p in b]


def test_train_users_label_before_global_cutoff():
    corpus = generate_corpus(100, 8, CUTOFF, train_fraction=0.8)
    train = [l for l in corpus.labels if l.cutoff_timestamp < CUTOFF]
    assert train
    # label horizon of a train user ends no later than the global cutoff
    assert all(l.cutoff_timestamp + 7 * DAY <= CUTOFF for l in train)


def test_derive_labels_first_order_in_horizon():
    def ev(ts, kind, sk, name, cat, price):
        return BehaviorEvent("u", sk, name.lower(), name, cat, price, kind, "app_homepage", ts, {})

    events = [
        ev(CUTOFF - 10, "order", "product", "Old", "Thai", 500),
        ev(CUTOFF + 50, "click", "merchant", "Noodle Bar", "Ramen", None),
        ev(CUTOFF + 100, "order", "merchant", "Noodle Bar", "Ramen", 1234),
        ev(CUTOFF + 200, "order", "product", "Later", "Thai", 4000),
        ev(CUTOFF + 8 * DAY, "order", "product", "Way Later", "Thai", 4000),
    ]
    labels = {l.label_kind: l.label_value for l in derive_labels("u", events, CUTOFF)}
    assert labels == {"category": "Ramen", "poi": "Noodle Bar", "merchant": "Noodle Bar", "price_band": "10-20"}
    assert derive_labels("u", events[:1], CUTOFF) == []


def test_category_label_is_first_future_order():
    cat = default_catalog()
    for p in generate_profiles(50, 13, noise_rate=0.3):
        events, labels = generate_events(p, 60, CUTOFF, cat, include_future=True)
        future = sorted((e for e in events if e.timestamp >= CUTOFF and e.content_kind == "order"), key=lambda e: e.timestamp)
        by_kind = {l.label_kind: l.label_value for l in labels}
        assert by_kind["category"] == future[0].category
