"""Recommendation inference, ranked-list parsing and semantic-feature export."""

from __future__ import annotations

import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence, Union

from .behavior_store import SCENARIOS
from .catalog import Candidate, Catalog, price_band_label, price_band_midpoint
from .fusion import Facets, FusionError, KnowledgeDocument
from .instructions import DEFAULT_TASKS, TaskTemplate
from .jsonl import iter_jsonl
from .prompts import DEFAULT_MAX_INPUT_CHARS, BehaviorText

logger = logging.getLogger(__name__)

PARSE_STATUSES = ("parsed", "fuzzy_matched", "failed")
OUTPUT_DIRECTIVE = "Answer with a numbered list of exactly {k} items."
# mock ranking: score = 3 * category match + 2 * price proximity + 1 * merchant match
SCORE_WEIGHTS = {"category": 3.0, "price": 2.0, "merchant": 1.0}
NO_ANSWER = "Sorry, I cannot recommend anything for this user."

_NUMBERED = re.compile(r"^\s*\d+[.)]\s+(.+)$", re.MULTILINE)
_DATE = re.compile(r"\d{4}-\d{2}-\d{2}")
_PRICE = re.compile(r"price: (\d+)\.(\d{2})")


class MissingInput(LookupError):
    pass


def normalize(text: str) -> str:
    return " ".join(text.split()).casefold()


@dataclass(frozen=True)
class RecItem:
    item_id: str | None
    display: str


@dataclass(frozen=True)
class RankedRecommendation:
    user_id: str
    task_id: str
    items: tuple[RecItem, ...]
    raw_output: str
    parse_status: str

    def __post_init__(self) -> None:
        if self.parse_status not in PARSE_STATUSES:
            raise ValueError(f"bad parse_status {self.parse_status!r}")
        if (self.parse_status == "failed") != (not self.items):
            raise ValueError("parse_status must be 'failed' exactly when items is empty")
        if len({normalize(i.display) for i in self.items}) != len(self.items):
            raise ValueError("recommended items must be distinct")

    @property
    def displays(self) -> list[str]:
        return [i.display for i in self.items]

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "task_id": self.task_id,
            "items": self.displays,
            "raw_output": self.raw_output,
            "parse_status": self.parse_status,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RankedRecommendation":
        return cls(
            user_id=d["user_id"],
            task_id=d["task_id"],
            items=tuple(RecItem(None, s) for s in d["items"]),
            raw_output=d["raw_output"],
            parse_status=d["parse_status"],
        )


def read_predictions(path: str | Path) -> list[RankedRecommendation]:
    return [RankedRecommendation.from_dict(r) for r in iter_jsonl(path)]


def scan_mentions(text: str, names: Sequence[str]) -> list[int]:
    """Indices into ``names`` found in ``text``, by first occurrence.

    Matching is case-insensitive; at each position the longest name wins and
    matches may not overlap.  Equal start and length fall back to ``names``
    order.
    """
    lowered = text.casefold()
    hits = []
    for idx, name in enumerate(names):
        needle = name.casefold()
        if not needle:
            continue
        start = lowered.find(needle)
        while start != -1:
            hits.append((start, -len(needle), idx))
            start = lowered.find(needle, start + 1)
    hits.sort()
    out, seen, last_end = [], set(), 0
    for start, neg_len, idx in hits:
        if start < last_end:
            continue
        last_end = start - neg_len
        if idx not in seen:
            seen.add(idx)
            out.append(idx)
    return out


def parse_ranked_list(
    raw: str, k: int, candidates: Sequence[Candidate] | None = None
) -> tuple[list[RecItem], str]:
    if k < 1:
        raise ValueError("k must be positive")
    by_name = {normalize(c.display): c for c in candidates or ()}
    items: list[RecItem] = []
    seen: set[str] = set()
    lines = [m.group(1).strip() for m in _NUMBERED.finditer(raw)]
    if lines:
        for display in lines:
            key = normalize(display)
            if not key or key in seen:
                continue
            seen.add(key)
            cand = by_name.get(key)
            items.append(RecItem(cand.item_id if cand else None, display))
            if len(items) == k:
                break
        return items, ("parsed" if items else "failed")
    if candidates:
        found = scan_mentions(raw, [c.display for c in candidates])[:k]
        items = [RecItem(candidates[i].item_id, candidates[i].display) for i in found]
        if items:
            return items, "fuzzy_matched"
    return [], "failed"


def build_prompt(task: TaskTemplate, k: int, input_text: str) -> str:
    return "\n\n".join([task.instruction(k), input_text, OUTPUT_DIRECTIVE.format(k=k)])


@dataclass(frozen=True)
class RecommendContext:
    """Structured view of a request, used only by the deterministic mock."""

    user_id: str
    task: TaskTemplate
    k: int
    variant: str
    candidates: tuple[Candidate, ...]
    input_text: str
    facets: Facets | None = None


class RecommendBackend(Protocol):
    backend_id: str
    model_name: str

    def recommend_text(self, prompt: str, context: RecommendContext) -> str: ...


def _proximity(price: float, facets: Facets, catalog: Catalog) -> float:
    if facets.price_stats is None:
        return 0.0
    gap = abs(price - facets.price_stats.median_minor) / catalog.max_price
    return max(0.0, 1.0 - gap)


def score_candidates(
    facets: Facets, label_kind: str, candidates: Sequence[Candidate], catalog: Catalog
) -> list[float]:
    """Mock ranking scores, one per candidate."""
    max_cat = max((n for _, n in facets.top_categories), default=0) or 1
    max_mer = max((n for _, n in facets.top_merchants), default=0) or 1
    top_merchant_cat = None
    if facets.top_merchants and facets.top_merchants[0][0] in catalog.merchant_by_id:
        top_merchant_cat = catalog.merchant_by_id[facets.top_merchants[0][0]].category
    w = SCORE_WEIGHTS
    scores = []
    for c in candidates:
        if label_kind == "category":
            cat = facets.category_weight(c.item_id) / max_cat
            price = _proximity(catalog.category_mean_price.get(c.item_id, 0.0), facets, catalog)
            mer = 1.0 if c.item_id == top_merchant_cat else 0.0
        elif label_kind in ("poi", "merchant"):
            m = catalog.merchant_by_id[c.item_id]
            cat = facets.category_weight(m.category) / max_cat
            price = _proximity(catalog.merchant_mean_price[m.merchant_id], facets, catalog)
            mer = facets.merchant_weight(m.merchant_id) / max_mer
        else:
            cat, mer = 0.0, 0.0
            price = _proximity(price_band_midpoint(c.item_id), facets, catalog)
        scores.append(w["category"] * cat + w["price"] * price + w["merchant"] * mer)
    return scores


def rank_by_facets(facets: Facets, label_kind: str, candidates: Sequence[Candidate], catalog: Catalog, k: int) -> list[str]:
    scores = score_candidates(facets, label_kind, candidates, catalog)
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], i))
    return [candidates[i].display for i in order[:k]]


def rank_by_recency(input_text: str, label_kind: str, candidates: Sequence[Candidate], k: int) -> list[str]:
    """Rank candidates by how recently the raw behavior text mentions them."""
    mentions = []  # (date, line number, candidate index)
    displays = [c.display for c in candidates]
    band_index = {c.display: i for i, c in enumerate(candidates)}
    for lineno, line in enumerate(input_text.splitlines()):
        date = _DATE.search(line)
        if not date:
            continue
        if label_kind == "price_band":
            for m in _PRICE.finditer(line):
                band = price_band_label(int(m.group(1)) * 100 + int(m.group(2)))
                if band in band_index:
                    mentions.append((date.group(0), lineno, band_index[band]))
        else:
            for idx in scan_mentions(line, displays):
                mentions.append((date.group(0), lineno, idx))
    mentions.sort(key=lambda t: (_neg_date(t[0]), t[1]))
    out, seen = [], set()
    for _, _, idx in mentions:
        if idx not in seen:
            seen.add(idx)
            out.append(displays[idx])
            if len(out) == k:
                break
    return out


def _neg_date(date: str) -> int:
    return -int(date.replace("-", ""))


def mock_answer(context: RecommendContext, catalog: Catalog) -> str:
    """Numbered-list answer of the rule-based mock model."""
    kind = context.task.label_kind
    if context.variant == "no_hkf" or context.facets is None:
        ranked = rank_by_recency(context.input_text, kind, context.candidates, context.k)
    else:
        ranked = rank_by_facets(context.facets, kind, context.candidates, catalog, context.k)
    if not ranked:
        return NO_ANSWER
    return "\n".join(f"{i}. {d}" for i, d in enumerate(ranked, 1))


Inputs = Mapping[str, Union[KnowledgeDocument, BehaviorText]]


def recommend(
    user_id: str,
    task: TaskTemplate,
    k: int,
    backend: RecommendBackend,
    inputs: Inputs,
    candidates: Sequence[Candidate] | None = None,
    variant: str = "full",
    max_input_chars: int = DEFAULT_MAX_INPUT_CHARS,
) -> RankedRecommendation:
    """Ask ``backend`` for ``k`` ranked items for one user and parse the reply.

    ``inputs`` maps user ids to knowledge documents (full variant) or
    behavior texts (no_hkf).
    """
    source = inputs.get(user_id)
    if source is None:
        what = "knowledge document" if variant == "full" else "behavior text"
        raise MissingInput(f"no {what} for user {user_id!r}")
    if isinstance(source, KnowledgeDocument):
        input_text, facets = source.text[:max_input_chars], source.facets
    else:
        input_text, facets = source.as_text(max_input_chars), None
    context = RecommendContext(
        user_id=user_id,
        task=task,
        k=k,
        variant=variant,
        candidates=tuple(candidates or ()),
        input_text=input_text,
        facets=facets if variant == "full" else None,
    )
    try:
        raw = backend.recommend_text(build_prompt(task, k, input_text), context)
    except Exception as exc:
        raise FusionError(user_id, str(exc)) from exc
    items, status = parse_ranked_list(raw, k, candidates)
    return RankedRecommendation(user_id, task.task_id, tuple(items), raw, status)


@dataclass
class InferenceRun:
    recommendations: list[RankedRecommendation]
    failures: list[FusionError]


def recommend_batch(
    requests: Sequence[tuple[str, TaskTemplate]],
    k: int,
    backend: RecommendBackend,
    inputs: Inputs,
    catalog: Catalog,
    variant: str = "full",
    concurrency: int = 4,
    max_input_chars: int = DEFAULT_MAX_INPUT_CHARS,
) -> InferenceRun:
    if concurrency < 1:
        raise ValueError("concurrency must be at least 1")
    candidate_sets = {kind: catalog.candidates(kind) for kind in {t.label_kind for _, t in requests}}

    def one(req):
        user_id, task = req
        try:
            return recommend(user_id, task, k, backend, inputs, candidate_sets[task.label_kind], variant, max_input_chars)
        except FusionError as exc:
            logger.error("%s", exc)
            return exc

    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        results = list(pool.map(one, requests))
    recs = sorted((r for r in results if isinstance(r, RankedRecommendation)), key=lambda r: (r.user_id, r.task_id))
    failures = [r for r in results if isinstance(r, FusionError)]
    return InferenceRun(recs, failures)


@dataclass(frozen=True)
class SemanticFeatureRow:
    user_id: str
    feature_names: tuple[str, ...]
    feature_values: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.feature_names) != len(self.feature_values):
            raise ValueError("feature names and values differ in length")
        if not all(math.isfinite(v) for v in self.feature_values):
            raise ValueError("feature values must be finite")


def feature_names(catalog: Catalog) -> tuple[str, ...]:
    """Fixed export schema.

    ``top_category[c]``  one-hot of the top-1 item of the user's first
                         category-task recommendation (catalog order)
    ``price_mid_norm``   (p25 + p75) / 2 over the catalog's max price
    ``scenario_mix[s]``  scenario fractions from the knowledge facets
    ``rr_top{1,2,3}``    1/r when the recommendation has an item at rank r,
                         taken from the first poi/merchant-task recommendation
                         (else the first recommendation of any task)
    """
    return (
        *(f"top_category[{c}]" for c in catalog.categories),
        "price_mid_norm",
        *(f"scenario_mix[{s}]" for s in SCENARIOS),
        "rr_top1",
        "rr_top2",
        "rr_top3",
    )


def export_semantic_features(
    docs: Sequence[KnowledgeDocument],
    recs: Sequence[RankedRecommendation],
    catalog: Catalog,
    tasks: Sequence[TaskTemplate] = DEFAULT_TASKS,
) -> list[SemanticFeatureRow]:
    names = feature_names(catalog)
    kind_of = {t.task_id: t.label_kind for t in tasks}
    by_user: dict[str, list[RankedRecommendation]] = {}
    for r in sorted(recs, key=lambda r: (r.user_id, r.task_id)):
        by_user.setdefault(r.user_id, []).append(r)
    doc_by_user = {d.user_id: d for d in docs}
    for uid in sorted(set(by_user) - set(doc_by_user)):
        logger.warning("recommendations for %r have no knowledge document; skipped", uid)

    cat_index = {normalize(c): i for i, c in enumerate(catalog.categories)}
    rows = []
    for uid in sorted(doc_by_user):
        doc, user_recs = doc_by_user[uid], by_user.get(uid, [])
        onehot = [0.0] * len(catalog.categories)
        cat_recs = [r for r in user_recs if kind_of.get(r.task_id) == "category"]
        if cat_recs and cat_recs[0].items:
            idx = cat_index.get(normalize(cat_recs[0].items[0].display))
            if idx is not None:
                onehot[idx] = 1.0
        ps = doc.facets.price_stats
        price = (ps.p25_minor + ps.p75_minor) / 2 / catalog.max_price if ps else 0.0
        mix = [float(doc.facets.scenario_mix.get(s, 0.0)) for s in SCENARIOS]
        poi_recs = [r for r in user_recs if kind_of.get(r.task_id) in ("poi", "merchant")]
        rr_source = (poi_recs or user_recs or [None])[0]
        n_items = len(rr_source.items) if rr_source else 0
        rr = [1.0 / r if r <= n_items else 0.0 for r in (1, 2, 3)]
        rows.append(SemanticFeatureRow(uid, names, tuple(onehot + [price] + mix + rr)))
    return rows


def write_features(path: str | Path, rows: Sequence[SemanticFeatureRow], catalog: Catalog) -> None:
    """CSV: a ``user_id`` key column followed by the fixed numeric schema."""
    names = rows[0].feature_names if rows else feature_names(catalog)
    lines = [",".join(("user_id", *names))]
    for row in rows:
        lines.append(",".join((row.user_id, *(repr(v) for v in row.feature_values))))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
