"""Knowledge fusion: behavior text -> KnowledgeDocument.

Facets are always aggregated locally from the structured sequence; only the
free-text summary comes from the backend.  The rule-based summary produced
by :func:`mock_fuse` is the deterministic reference the tests lean on.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

from .behavior_store import SCENARIOS, BehaviorEvent, BehaviorSequence
from .chat import ChatMessage
from .prompts import DEFAULT_MAX_INPUT_CHARS, SCENARIO_DISPLAY, BehaviorText, format_price

logger = logging.getLogger(__name__)

FUSION_SYSTEM_PROMPT = (
    "Summarize this user's dining preferences: top categories, price range, "
    "favorite merchants, usage scenarios."
)
PROMPT_SHA256 = hashlib.sha256(FUSION_SYSTEM_PROMPT.encode("utf-8")).hexdigest()
EMPTY_SENTINEL = "no recorded behavior"
BEHAVIOR_WEIGHTS = {"order": 10, "click": 3, "exposure": 1}


class FusionError(RuntimeError):
    def __init__(self, user_id: str, message: str) -> None:
        super().__init__(f"fusion failed for {user_id!r}: {message}")
        self.user_id = user_id


@dataclass(frozen=True)
class PriceStats:
    median_minor: int
    p25_minor: int
    p75_minor: int


@dataclass(frozen=True)
class Facets:
    top_categories: tuple[tuple[str, int], ...] = ()
    price_stats: PriceStats | None = None
    top_merchants: tuple[tuple[str, int], ...] = ()
    scenario_mix: Mapping[str, float] = field(default_factory=dict)

    def category_weight(self, category: str) -> int:
        return dict(self.top_categories).get(category, 0)

    def merchant_weight(self, merchant_id: str) -> int:
        return dict(self.top_merchants).get(merchant_id, 0)

    def to_dict(self) -> dict:
        return {
            "top_categories": [[c, n] for c, n in self.top_categories],
            "price_stats": None
            if self.price_stats is None
            else {
                "median_minor": self.price_stats.median_minor,
                "p25_minor": self.price_stats.p25_minor,
                "p75_minor": self.price_stats.p75_minor,
            },
            "top_merchants": [[m, n] for m, n in self.top_merchants],
            "scenario_mix": dict(self.scenario_mix),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Facets":
        ps = d.get("price_stats")
        return cls(
            top_categories=tuple((c, int(n)) for c, n in d["top_categories"]),
            price_stats=PriceStats(**ps) if ps else None,
            top_merchants=tuple((m, int(n)) for m, n in d["top_merchants"]),
            scenario_mix=dict(d["scenario_mix"]),
        )


@dataclass(frozen=True)
class Provenance:
    backend_id: str
    model_name: str
    prompt_sha256: str
    created_at: int


@dataclass(frozen=True)
class KnowledgeDocument:
    user_id: str
    text: str
    facets: Facets
    provenance: Provenance

    def to_dict(self) -> dict:
        p = self.provenance
        return {
            "user_id": self.user_id,
            "text": self.text,
            "facets": self.facets.to_dict(),
            "provenance": {
                "backend_id": p.backend_id,
                "model_name": p.model_name,
                "prompt_sha256": p.prompt_sha256,
                "created_at": p.created_at,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KnowledgeDocument":
        return cls(
            user_id=d["user_id"],
            text=d["text"],
            facets=Facets.from_dict(d["facets"]),
            provenance=Provenance(**d["provenance"]),
        )


def nearest_rank(sorted_values: Sequence[int], pct: float) -> int:
    """Nearest-rank percentile of already sorted values."""
    n = len(sorted_values)
    rank = max(1, math.ceil(pct / 100.0 * n))
    return sorted_values[rank - 1]


def event_merchant(event: BehaviorEvent) -> str | None:
    if event.subject_kind == "merchant":
        return event.subject_id
    return event.attributes.get("merchant_id")


def _ranked(counts: Mapping[str, int]) -> tuple[tuple[str, int], ...]:
    return tuple(sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])))


def compute_facets(seq: BehaviorSequence, weights: Mapping[str, int] = BEHAVIOR_WEIGHTS) -> Facets:
    if not seq.events:
        return Facets()
    cats: dict[str, int] = defaultdict(int)
    merchants: dict[str, int] = defaultdict(int)
    scen: dict[str, int] = defaultdict(int)
    prices = []
    for e in seq.events:
        w = weights[e.content_kind]
        cats[e.category] += w
        mid = event_merchant(e)
        if mid:
            merchants[mid] += w
        scen[e.scenario] += 1
        if e.content_kind == "order" and e.price_minor is not None:
            prices.append(e.price_minor)
    stats = None
    if prices:
        prices.sort()
        stats = PriceStats(nearest_rank(prices, 50), nearest_rank(prices, 25), nearest_rank(prices, 75))
    n = len(seq.events)
    return Facets(
        top_categories=_ranked(cats),
        price_stats=stats,
        top_merchants=_ranked(merchants),
        scenario_mix={s: scen[s] / n for s in SCENARIOS},
    )


def merchant_names(seq: BehaviorSequence) -> dict[str, str]:
    names = {}
    for e in seq.events:
        if e.subject_kind == "merchant":
            names.setdefault(e.subject_id, e.subject_name)
        elif "merchant_id" in e.attributes:
            names.setdefault(e.attributes["merchant_id"], e.attributes.get("merchant_name", e.attributes["merchant_id"]))
    return names


def _join(items: Sequence[str]) -> str:
    if len(items) <= 1:
        return "".join(items)
    return ", ".join(items[:-1]) + " and " + items[-1]


def summary_text(facets: Facets, names: Mapping[str, str]) -> str:
    """Fixed summary over the top-3 categories, price band and top-3 merchants."""
    if not facets.top_categories:
        return EMPTY_SENTINEL
    parts = [f"This user mostly engages with {_join([c for c, _ in facets.top_categories[:3]])}."]
    ps = facets.price_stats
    if ps:
        parts.append(
            f"Typical order price is {format_price(ps.median_minor)} "
            f"(interquartile range {format_price(ps.p25_minor)} to {format_price(ps.p75_minor)})."
        )
    else:
        parts.append("No priced orders are recorded.")
    if facets.top_merchants:
        top = [names.get(m, m) for m, _ in facets.top_merchants[:3]]
        parts.append(f"Favorite merchants: {_join(top)}.")
    mix = sorted(
        ((s, f) for s, f in facets.scenario_mix.items() if f > 0),
        key=lambda kv: (-kv[1], SCENARIOS.index(kv[0])),
    )
    parts.append(
        "Activity comes from "
        + _join([f"{SCENARIO_DISPLAY[s]} ({round(f * 100)}%)" for s, f in mix])
        + "."
    )
    return " ".join(parts)


class FusionBackend(Protocol):
    backend_id: str
    model_name: str
    deterministic: bool

    def fusion_text(self, messages: Sequence[ChatMessage], facets: Facets, names: Mapping[str, str]) -> str: ...


@dataclass
class FusionConfig:
    weights: Mapping[str, int] = field(default_factory=lambda: dict(BEHAVIOR_WEIGHTS))
    max_input_chars: int = DEFAULT_MAX_INPUT_CHARS
    concurrency: int = 4
    cache_dir: Path | None = None


def _provenance(backend, seq: BehaviorSequence) -> Provenance:
    if getattr(backend, "deterministic", False):
        created = seq.events[0].timestamp if seq.events else 0
    else:
        created = int(time.time())
    return Provenance(backend.backend_id, backend.model_name, PROMPT_SHA256, created)


def mock_fuse(behavior_text: BehaviorText, seq: BehaviorSequence, weights: Mapping[str, int] = BEHAVIOR_WEIGHTS) -> KnowledgeDocument:
    facets = compute_facets(seq, weights)
    return KnowledgeDocument(
        user_id=seq.user_id,
        text=summary_text(facets, merchant_names(seq)),
        facets=facets,
        provenance=Provenance("mock", "rule-summary", PROMPT_SHA256, seq.events[0].timestamp if seq.events else 0),
    )


def fusion_messages(behavior_text: BehaviorText, max_chars: int = DEFAULT_MAX_INPUT_CHARS) -> tuple[ChatMessage, ...]:
    return (
        ChatMessage("system", FUSION_SYSTEM_PROMPT),
        ChatMessage("user", behavior_text.as_text(max_chars)),
    )


class FusionCache:
    """On-disk summary cache keyed by (user_id, prompt digest, sequence digest)."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)

    def _path(self, user_id: str, seq_digest: str) -> Path:
        key = hashlib.sha256(f"{user_id}\x00{PROMPT_SHA256}\x00{seq_digest}".encode("utf-8")).hexdigest()
        return self.root / key[:2] / f"{key}.json"

    def get(self, user_id: str, seq_digest: str) -> str | None:
        path = self._path(user_id, seq_digest)
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))["text"]

    def put(self, user_id: str, seq_digest: str, text: str) -> None:
        path = self._path(user_id, seq_digest)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"user_id": user_id, "text": text}), encoding="utf-8")
        tmp.replace(path)


def fuse(
    behavior_text: BehaviorText,
    seq: BehaviorSequence,
    backend: FusionBackend,
    config: FusionConfig | None = None,
) -> KnowledgeDocument:
    """Fuse one user's behavior into a knowledge document.

    ``behavior_text`` is what the backend sees (it may come from an
    anonymized sequence); ``seq`` feeds the locally computed facets.
    """
    config = config or FusionConfig()
    facets = compute_facets(seq, config.weights)
    provenance = _provenance(backend, seq)
    if not seq.events:
        return KnowledgeDocument(seq.user_id, EMPTY_SENTINEL, facets, provenance)

    cache = FusionCache(config.cache_dir) if config.cache_dir else None
    digest = seq.digest()
    text = cache.get(seq.user_id, digest) if cache else None
    if text is None:
        try:
            text = backend.fusion_text(
                fusion_messages(behavior_text, config.max_input_chars), facets, merchant_names(seq)
            )
        except Exception as exc:
            raise FusionError(seq.user_id, str(exc)) from exc
        if not text or not text.strip():
            raise FusionError(seq.user_id, "backend returned empty text")
        if cache:
            cache.put(seq.user_id, digest, text)
    return KnowledgeDocument(seq.user_id, text, facets, provenance)


@dataclass
class FusionRun:
    documents: list[KnowledgeDocument]
    failures: list[FusionError]


def fuse_batch(
    items: Sequence[tuple[BehaviorText, BehaviorSequence]],
    backend: FusionBackend,
    config: FusionConfig | None = None,
) -> FusionRun:
    """Fuse many users with at most ``config.concurrency`` backend calls in flight."""
    config = config or FusionConfig()
    if config.concurrency < 1:
        raise ValueError("concurrency must be at least 1")

    def one(item):
        try:
            return fuse(item[0], item[1], backend, config)
        except FusionError as exc:
            logger.error("%s", exc)
            return exc

    with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
        results = list(pool.map(one, items))
    docs = sorted((r for r in results if isinstance(r, KnowledgeDocument)), key=lambda d: d.user_id)
    failures = sorted((r for r in results if isinstance(r, FusionError)), key=lambda e: e.user_id)
    return FusionRun(docs, failures)
