"""Synthetic Waimai-like behavior corpus with planted, recoverable preferences.

Each profile plants a category distribution, a price band and a ranked list
of preferred merchants.  Order histories are drawn from those preferences
(plus uniform noise), and exposures/clicks are generated around every order:
per order, 2 clicks and 5 exposures on same-category subjects and 3 exposures
on random catalog subjects.  The first order after the cutoff provides the
ground-truth labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .behavior_store import BehaviorEvent
from .catalog import Catalog, Merchant, Product, default_catalog, price_band_label
from .jsonl import dumps

LABEL_KINDS = ("category", "poi", "merchant", "price_band")
DAY = 86_400
LABEL_HORIZON_DAYS = 7

SCENARIO_MIX = (("app_homepage", 0.7), ("mini_program", 0.2), ("search", 0.1))
SAME_CATEGORY_CLICKS = 2
SAME_CATEGORY_EXPOSURES = 5
RANDOM_EXPOSURES = 3
PREFERRED_MERCHANT_RATE = 0.8
MAX_PROFILE_CATEGORIES = 5


@dataclass(frozen=True)
class SyntheticProfile:
    user_id: str
    category_weights: tuple[tuple[str, float], ...]  # descending by weight
    price_band: tuple[int, int]
    preferred_merchants: tuple[str, ...]
    noise_rate: float
    seed: int

    def __post_init__(self) -> None:
        if not self.category_weights or len(self.category_weights) > 10:
            raise ValueError("a profile needs between 1 and 10 categories")
        ws = [w for _, w in self.category_weights]
        if any(w <= 0 for w in ws) or abs(math.fsum(ws) - 1.0) > 1e-9:
            raise ValueError("category weights must be positive and sum to 1")
        if self.price_band[0] > self.price_band[1]:
            raise ValueError("price band min exceeds max")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError("noise_rate must lie in [0, 1)")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def top_category(self) -> str:
        return self.category_weights[0][0]

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "category_weights": [[c, w] for c, w in self.category_weights],
            "price_band": list(self.price_band),
            "preferred_merchants": list(self.preferred_merchants),
            "noise_rate": self.noise_rate,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticProfile":
        return cls(
            user_id=d["user_id"],
            category_weights=tuple((c, float(w)) for c, w in d["category_weights"]),
            price_band=tuple(d["price_band"]),
            preferred_merchants=tuple(d["preferred_merchants"]),
            noise_rate=float(d["noise_rate"]),
            seed=int(d["seed"]),
        )


@dataclass(frozen=True)
class LabelRecord:
    user_id: str
    task_id: str
    label_kind: str
    label_value: str
    cutoff_timestamp: int

    def __post_init__(self) -> None:
        if self.label_kind not in LABEL_KINDS:
            raise ValueError(f"unknown label kind {self.label_kind!r}")
        if not self.label_value:
            raise ValueError("label_value must be non-empty")

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "task_id": self.task_id,
            "label_kind": self.label_kind,
            "label_value": self.label_value,
            "cutoff_timestamp": self.cutoff_timestamp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabelRecord":
        return cls(**d)


def _draw_weights(rng: np.random.Generator, n_categories: int) -> list[float]:
    if n_categories == 1:
        return [1.0]
    while True:
        top = float(rng.uniform(0.6, 0.8))
        rest = rng.dirichlet(np.ones(n_categories - 1)) * (1.0 - top)
        weights = [top] + sorted((float(x) for x in rest), reverse=True)
        weights[-1] = 1.0 - math.fsum(weights[:-1])
        if weights[-1] > 0 and len(set(weights)) == n_categories:
            return weights


def generate_profiles(
    n: int,
    seed: int,
    noise_rate: float = 0.0,
    catalog: Catalog | None = None,
) -> list[SyntheticProfile]:
    """Draw ``n`` profiles; identical ``(n, seed)`` give identical profiles.

    ``noise_rate`` does not influence any draw, so corpora generated at
    different noise levels share the same planted preferences.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    catalog = catalog or default_catalog()
    profiles = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n)):
        rng = np.random.default_rng(child)
        k = int(rng.integers(1, MAX_PROFILE_CATEGORIES + 1))
        cats = [catalog.categories[j] for j in rng.choice(len(catalog.categories), k, replace=False)]
        weights = _draw_weights(rng, k)
        lo = int(rng.integers(15, 41)) * 100
        band = (lo, lo + int(rng.integers(10, 26)) * 100)
        preferred = []
        for c in cats:
            pool = catalog.merchants_by_category[c]
            preferred += [pool[j].merchant_id for j in rng.choice(len(pool), 2, replace=False)]
        profiles.append(
            SyntheticProfile(
                user_id=f"u{i:06d}",
                category_weights=tuple(zip(cats, weights)),
                price_band=band,
                preferred_merchants=tuple(preferred),
                noise_rate=float(noise_rate),
                seed=int(child.generate_state(1, dtype=np.uint64)[0]),
            )
        )
    return profiles


def _systematic_categories(rng: np.random.Generator, weights: np.ndarray, n: int) -> np.ndarray:
    """``n`` draws from ``weights`` by systematic sampling, then shuffled.

    Each draw is marginally distributed as ``weights`` while the counts stay
    within one of ``n * weights``, which keeps the planted argmax visible.
    """
    points = (rng.random() + np.arange(n)) / n
    idx = np.searchsorted(np.cumsum(weights), points, side="right")
    return rng.permutation(np.minimum(idx, len(weights) - 1))


@dataclass
class _Episode:
    product: Product
    merchant: Merchant
    price: int
    noisy: bool
    timestamp: int


@dataclass
class GeneratedStream:
    events: list[BehaviorEvent]
    order_noise: list[bool] = field(default_factory=list)  # per pre-cutoff order, oldest first


def _generate_stream(
    profile: SyntheticProfile,
    horizon_days: int,
    cutoff_timestamp: int,
    catalog: Catalog,
) -> GeneratedStream:
    if horizon_days < 1:
        raise ValueError("horizon_days must be at least 1")
    rng = np.random.default_rng(profile.seed)
    cats = [c for c, _ in profile.category_weights]
    weights = np.array([w for _, w in profile.category_weights])
    start = cutoff_timestamp - horizon_days * DAY

    n_orders = max(1, int(rng.integers(horizon_days // 3, horizon_days // 2 + 1)))
    order_ts = np.sort(rng.integers(start + 3600, cutoff_timestamp - 60, size=n_orders))
    planted_idx = _systematic_categories(rng, weights, n_orders)
    # every draw happens regardless of branch so noise levels stay coupled
    noise_u = rng.random(n_orders)
    pick_u = rng.random(n_orders)
    alt_u = rng.random(n_orders)
    product_u = rng.random(n_orders)
    price_u = rng.integers(profile.price_band[0], profile.price_band[1] + 1, size=n_orders)
    noise_product = rng.integers(0, len(catalog.products), size=n_orders)

    episodes = []
    for i in range(n_orders):
        noisy = bool(noise_u[i] < profile.noise_rate)
        if noisy:
            product = catalog.products[int(noise_product[i])]
            merchant = catalog.merchant_by_id[product.merchant_id]
            price = product.price_minor
        else:
            merchant = _planted_merchant(profile, catalog, cats[int(planted_idx[i])], pick_u[i], alt_u[i])
            products = catalog.products_by_merchant[merchant.merchant_id]
            product = products[int(product_u[i] * len(products))]
            price = int(price_u[i])
        episodes.append(_Episode(product, merchant, price, noisy, int(order_ts[i])))

    # next-order episode after the cutoff: the dominant preference unless noisy
    label_ts = cutoff_timestamp + int(rng.integers(3600, LABEL_HORIZON_DAYS * DAY))
    label_noisy = bool(rng.random() < profile.noise_rate)
    label_noise_product = catalog.products[int(rng.integers(0, len(catalog.products)))]
    label_price = int(rng.integers(profile.price_band[0], profile.price_band[1] + 1))
    label_product_u = rng.random()
    if label_noisy:
        product = label_noise_product
        merchant = catalog.merchant_by_id[product.merchant_id]
        price = product.price_minor
    else:
        merchant = catalog.merchant_by_id[profile.preferred_merchants[0]]
        products = catalog.products_by_merchant[merchant.merchant_id]
        product = products[int(label_product_u * len(products))]
        price = label_price
    episodes.append(_Episode(product, merchant, price, label_noisy, label_ts))

    events: list[BehaviorEvent] = []
    for ep in episodes:
        events.extend(_episode_events(profile.user_id, ep, catalog, rng))
    return GeneratedStream(events=events, order_noise=[ep.noisy for ep in episodes[:-1]])


def _planted_merchant(
    profile: SyntheticProfile, catalog: Catalog, category: str, pick_u: float, alt_u: float
) -> Merchant:
    preferred = [
        m for m in profile.preferred_merchants if catalog.merchant_by_id[m].category == category
    ]
    if preferred and pick_u < PREFERRED_MERCHANT_RATE:
        return catalog.merchant_by_id[preferred[0]]
    pool = catalog.merchants_by_category[category]
    return pool[int(alt_u * len(pool))]


def _scenario(u: float) -> str:
    acc = 0.0
    for name, p in SCENARIO_MIX:
        acc += p
        if u < acc:
            return name
    return SCENARIO_MIX[-1][0]


def _merchant_event(user_id, m: Merchant, content_kind, scenario, ts) -> BehaviorEvent:
    return BehaviorEvent(
        user_id=user_id,
        subject_kind="merchant",
        subject_id=m.merchant_id,
        subject_name=m.name,
        category=m.category,
        price_minor=None,
        content_kind=content_kind,
        scenario=scenario,
        timestamp=ts,
        attributes={},
    )


def _product_event(user_id, p: Product, m: Merchant, content_kind, scenario, ts, price) -> BehaviorEvent:
    return BehaviorEvent(
        user_id=user_id,
        subject_kind="product",
        subject_id=p.product_id,
        subject_name=p.name,
        category=p.category,
        price_minor=price,
        content_kind=content_kind,
        scenario=scenario,
        timestamp=ts,
        attributes={"merchant_id": m.merchant_id, "merchant_name": m.name},
    )


def _episode_events(user_id: str, ep: _Episode, catalog: Catalog, rng: np.random.Generator) -> list[BehaviorEvent]:
    n_lead = SAME_CATEGORY_CLICKS + SAME_CATEGORY_EXPOSURES + RANDOM_EXPOSURES
    scen = rng.random(n_lead + 1)
    offsets = np.sort(rng.integers(60, 1800, size=n_lead))[::-1]
    same_cat = catalog.merchants_by_category[ep.product.category]
    picks = rng.random((n_lead, 2))
    random_products = rng.integers(0, len(catalog.products), size=RANDOM_EXPOSURES)

    out = [_product_event(user_id, ep.product, ep.merchant, "order", _scenario(scen[0]), ep.timestamp, ep.price)]
    lead_ts = [ep.timestamp - int(o) for o in offsets]

    # click the ordered merchant, then a same-category product
    out.append(_merchant_event(user_id, ep.merchant, "click", _scenario(scen[1]), lead_ts[-1]))
    m2 = same_cat[int(picks[1, 0] * len(same_cat))]
    p2 = _pick_product(catalog, m2, picks[1, 1])
    out.append(_product_event(user_id, p2, m2, "click", _scenario(scen[2]), lead_ts[-2], p2.price_minor))

    for j in range(SAME_CATEGORY_EXPOSURES):
        slot = SAME_CATEGORY_CLICKS + j
        m = same_cat[int(picks[slot, 0] * len(same_cat))]
        ts = lead_ts[slot - SAME_CATEGORY_CLICKS]
        if j % 2 == 0:
            out.append(_merchant_event(user_id, m, "exposure", _scenario(scen[slot + 1]), ts))
        else:
            p = _pick_product(catalog, m, picks[slot, 1])
            out.append(_product_event(user_id, p, m, "exposure", _scenario(scen[slot + 1]), ts, p.price_minor))

    for j in range(RANDOM_EXPOSURES):
        slot = SAME_CATEGORY_CLICKS + SAME_CATEGORY_EXPOSURES + j
        p = catalog.products[int(random_products[j])]
        m = catalog.merchant_by_id[p.merchant_id]
        ts = lead_ts[slot - SAME_CATEGORY_CLICKS]
        if j % 2 == 0:
            out.append(_product_event(user_id, p, m, "exposure", _scenario(scen[slot + 1]), ts, p.price_minor))
        else:
            out.append(_merchant_event(user_id, m, "exposure", _scenario(scen[slot + 1]), ts))
    return out


def _pick_product(catalog: Catalog, m: Merchant, u: float) -> Product:
    products = catalog.products_by_merchant[m.merchant_id]
    return products[int(u * len(products))]


def derive_labels(
    user_id: str, events: Iterable[BehaviorEvent], cutoff_timestamp: int
) -> list[LabelRecord]:
    """Labels from the first order (and first merchant click) after the cutoff.

    Only events inside the 7-day label horizon count; a user without such an
    order gets no labels and therefore drops out of the test split.
    """
    horizon_end = cutoff_timestamp + LABEL_HORIZON_DAYS * DAY
    future = sorted(
        (e for e in events if cutoff_timestamp <= e.timestamp < horizon_end),
        key=lambda e: (e.timestamp, e.subject_id, e.content_kind),
    )
    order = next((e for e in future if e.content_kind == "order"), None)
    if order is None:
        return []
    click = next((e for e in future if e.content_kind == "click" and e.subject_kind == "merchant"), None)
    values = {
        "category": order.category,
        "poi": order.attributes.get("merchant_name", order.subject_name)
        if order.subject_kind == "product"
        else order.subject_name,
        "merchant": click.subject_name if click else None,
        "price_band": price_band_label(order.price_minor) if order.price_minor is not None else None,
    }
    return [
        LabelRecord(user_id, "", kind, values[kind], cutoff_timestamp)
        for kind in LABEL_KINDS
        if values[kind]
    ]


def generate_events(
    profile: SyntheticProfile,
    horizon_days: int,
    cutoff_timestamp: int,
    catalog: Catalog | None = None,
    include_future: bool = False,
) -> tuple[list[BehaviorEvent], list[LabelRecord]]:
    """History before ``cutoff_timestamp`` plus next-order labels.

    Post-cutoff events are withheld from the returned history unless
    ``include_future`` is set, so they can never leak into model inputs.
    """
    stream = _generate_stream(profile, horizon_days, cutoff_timestamp, catalog or default_catalog())
    labels = derive_labels(profile.user_id, stream.events, cutoff_timestamp)
    events = stream.events if include_future else [e for e in stream.events if e.timestamp < cutoff_timestamp]
    return events, labels


@dataclass
class Corpus:
    profiles: list[SyntheticProfile]
    events: list[BehaviorEvent]
    labels: list[LabelRecord]
    user_cutoffs: dict[str, int]


def generate_corpus(
    n_users: int,
    seed: int,
    cutoff_timestamp: int,
    noise_rate: float = 0.0,
    horizon_days: int = 60,
    train_fraction: float = 0.0,
    catalog: Catalog | None = None,
) -> Corpus:
    """Profiles, histories and labels for ``n_users``.

    A ``train_fraction`` of users get an earlier personal cutoff (7 to 30
    days before ``cutoff_timestamp``) so their labels fall in the training
    period; the rest are labelled at ``cutoff_timestamp`` itself.
    """
    if not 0.0 <= train_fraction <= 1.0:
        raise ValueError("train_fraction must lie in [0, 1]")
    catalog = catalog or default_catalog()
    profiles = generate_profiles(n_users, seed, noise_rate, catalog)
    split_rng = np.random.default_rng([seed, 1])
    is_train = split_rng.random(n_users) < train_fraction
    shifts = split_rng.integers(LABEL_HORIZON_DAYS, 31, size=n_users)
    events, labels, cutoffs = [], [], {}
    for p, train, shift in zip(profiles, is_train, shifts):
        user_cutoff = cutoff_timestamp - int(shift) * DAY if train else cutoff_timestamp
        ev, lab = generate_events(p, horizon_days, user_cutoff, catalog)
        events.extend(ev)
        labels.extend(lab)
        cutoffs[p.user_id] = user_cutoff
    return Corpus(profiles, events, labels, cutoffs)
