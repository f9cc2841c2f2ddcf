"""Templated textualization of heterogeneous behavior.

A template matches on ``(subject_kind, content_kind, scenario)`` where any
field may be the wildcard ``"*"``.  The most specific match wins and ties go
to the earlier registry entry.

Default registry (search templates precede subject templates, so a product
order placed from search renders with the search wording):

====================  =========  ============  ============  ===================================================================================
template_id           subject    content       scenario      pattern
====================  =========  ============  ============  ===================================================================================
order.search          *          order         search        On {date}, searched and ordered '{subject_name}' (category: {category}, price: {price}).
order.merchant        merchant   order         *             On {date} via {scenario}, placed an order at '{subject_name}' (category: {category}, price: {price}).
order.product         product    order         *             On {date} via {scenario}, ordered '{subject_name}' (category: {category}, price: {price}).
click.search          *          click         search        On {date}, searched and clicked '{subject_name}' (category: {category}, price: {price}).
click.merchant        merchant   click         *             On {date} via {scenario}, clicked merchant '{subject_name}' (category: {category}).
click.product         product    click         *             On {date} via {scenario}, clicked '{subject_name}' (category: {category}, price: {price}).
exposure.search       *          exposure      search        On {date}, saw '{subject_name}' in search results (category: {category}, price: {price}).
exposure.merchant     merchant   exposure      *             On {date} via {scenario}, was shown merchant '{subject_name}' (category: {category}).
exposure.product      product    exposure      *             On {date} via {scenario}, was shown '{subject_name}' (category: {category}, price: {price}).
fallback              *          *             *             On {date} via {scenario}, interacted with '{subject_name}' (category: {category}, price: {price}).
====================  =========  ============  ============  ===================================================================================
"""

from __future__ import annotations

import string
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from .behavior_store import CONTENT_KINDS, SCENARIOS, SUBJECT_KINDS, BehaviorEvent, BehaviorSequence
from .jsonl import iter_jsonl

WILDCARD = "*"
PLACEHOLDERS = frozenset({"date", "scenario", "subject_name", "category", "price"})
DEFAULT_MAX_INPUT_CHARS = 8000

SCENARIO_DISPLAY = {
    "app_homepage": "the app homepage",
    "mini_program": "the mini-program",
    "search": "search",
    "other": "another entry point",
}
SECTION_HEADERS = {
    "app_homepage": "## App homepage",
    "mini_program": "## Mini-program",
    "search": "## Search",
    "other": "## Other",
}


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class BehaviorTemplate:
    template_id: str
    subject_kind: str
    content_kind: str
    scenario: str
    pattern: str

    def __post_init__(self) -> None:
        for name, allowed in (
            ("subject_kind", SUBJECT_KINDS),
            ("content_kind", CONTENT_KINDS),
            ("scenario", SCENARIOS),
        ):
            value = getattr(self, name)
            if value != WILDCARD and value not in allowed:
                raise TemplateError(f"{self.template_id}: invalid {name} {value!r}")
        names = set()
        try:
            parsed = list(string.Formatter().parse(self.pattern))
        except ValueError as exc:
            raise TemplateError(f"{self.template_id}: {exc}") from exc
        for _, fname, spec, conv in parsed:
            if fname is None:
                continue
            if fname not in PLACEHOLDERS or spec or conv:
                raise TemplateError(f"{self.template_id}: unknown placeholder {{{fname}}}")
            names.add(fname)
        if "subject_name" not in names:
            raise TemplateError(f"{self.template_id}: pattern lacks {{subject_name}}")

    @property
    def specificity(self) -> int:
        return sum(v != WILDCARD for v in (self.subject_kind, self.content_kind, self.scenario))

    @property
    def is_fallback(self) -> bool:
        return self.specificity == 0

    def matches(self, event: BehaviorEvent) -> bool:
        return (
            self.subject_kind in (WILDCARD, event.subject_kind)
            and self.content_kind in (WILDCARD, event.content_kind)
            and self.scenario in (WILDCARD, event.scenario)
        )


def _t(tid, subject, content, scenario, pattern) -> BehaviorTemplate:
    return BehaviorTemplate(tid, subject, content, scenario, pattern)


_TAIL = "(category: {category}, price: {price})."
DEFAULT_REGISTRY: tuple[BehaviorTemplate, ...] = (
    _t("order.search", "*", "order", "search", "On {date}, searched and ordered '{subject_name}' " + _TAIL),
    _t("order.merchant", "merchant", "order", "*", "On {date} via {scenario}, placed an order at '{subject_name}' " + _TAIL),
    _t("order.product", "product", "order", "*", "On {date} via {scenario}, ordered '{subject_name}' " + _TAIL),
    _t("click.search", "*", "click", "search", "On {date}, searched and clicked '{subject_name}' " + _TAIL),
    _t("click.merchant", "merchant", "click", "*", "On {date} via {scenario}, clicked merchant '{subject_name}' (category: {category})."),
    _t("click.product", "product", "click", "*", "On {date} via {scenario}, clicked '{subject_name}' " + _TAIL),
    _t("exposure.search", "*", "exposure", "search", "On {date}, saw '{subject_name}' in search results " + _TAIL),
    _t("exposure.merchant", "merchant", "exposure", "*", "On {date} via {scenario}, was shown merchant '{subject_name}' (category: {category})."),
    _t("exposure.product", "product", "exposure", "*", "On {date} via {scenario}, was shown '{subject_name}' " + _TAIL),
    _t("fallback", "*", "*", "*", "On {date} via {scenario}, interacted with '{subject_name}' " + _TAIL),
)


def validate_registry(registry: Sequence[BehaviorTemplate]) -> None:
    if not registry:
        raise TemplateError("template registry is empty")
    ids = [t.template_id for t in registry]
    if len(set(ids)) != len(ids):
        raise TemplateError("duplicate template_id in registry")
    if not any(t.is_fallback for t in registry):
        raise TemplateError("registry lacks a full-wildcard fallback template")


def load_registry(path: str | Path) -> list[BehaviorTemplate]:
    """Read a JSONL registry; bad placeholders fail here, not at render time."""
    registry = []
    for rec in iter_jsonl(path):
        try:
            registry.append(BehaviorTemplate(**rec))
        except TypeError as exc:
            raise TemplateError(f"bad template record: {exc}") from exc
    validate_registry(registry)
    return registry


def registry_records(registry: Sequence[BehaviorTemplate]) -> list[dict]:
    return [asdict(t) for t in registry]


def select_template(registry: Sequence[BehaviorTemplate], event: BehaviorEvent) -> BehaviorTemplate:
    best = None
    for t in registry:
        if t.matches(event) and (best is None or t.specificity > best.specificity):
            best = t
    if best is None:
        raise TemplateError("no template matches; registry lacks a fallback")
    return best


def format_price(price_minor: int | None) -> str:
    if price_minor is None:
        return "n/a"
    return f"{price_minor // 100}.{price_minor % 100:02d}"


def format_date(timestamp: int) -> str:
    return datetime.fromtimestamp(timestamp, tz=timezone.utc).strftime("%Y-%m-%d")


def render_event(event: BehaviorEvent, template: BehaviorTemplate) -> str:
    return template.pattern.format(
        date=format_date(event.timestamp),
        scenario=SCENARIO_DISPLAY[event.scenario],
        subject_name=event.subject_name,
        category=event.category,
        price=format_price(event.price_minor),
    )


@dataclass(frozen=True)
class BehaviorText:
    """Rendered behavior of one user.

    ``scenarios`` and ``timestamps`` run parallel to ``lines`` so the text can
    be re-assembled or truncated (oldest behavior first) without the events.
    """

    user_id: str
    lines: tuple[str, ...]
    section_headers: dict[str, str] = field(default_factory=dict)
    scenarios: tuple[str, ...] = ()
    timestamps: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not (len(self.lines) == len(self.scenarios) == len(self.timestamps)):
            raise ValueError("lines, scenarios and timestamps must have equal length")

    def _assemble(self, keep: Sequence[bool]) -> str:
        if not self.section_headers:
            return "\n".join(line for line, k in zip(self.lines, keep) if k)
        blocks = []
        for scen in SCENARIOS:
            body = [l for l, s, k in zip(self.lines, self.scenarios, keep) if k and s == scen]
            if body:
                blocks.append("\n".join([self.section_headers[scen], *body]))
        return "\n\n".join(blocks)

    def as_text(self, max_chars: int | None = None) -> str:
        """Prompt text; with ``max_chars`` the oldest lines are dropped to fit."""
        n = len(self.lines)
        full = self._assemble([True] * n)
        if max_chars is None or len(full) <= max_chars:
            return full
        # drop order: oldest timestamp first; among equal timestamps the line
        # that sorts later in sequence order counts as older
        drop_order = sorted(range(n), key=lambda i: (self.timestamps[i], -i))

        def text_after_dropping(d: int) -> str:
            keep = [True] * n
            for i in drop_order[:d]:
                keep[i] = False
            return self._assemble(keep)

        lo, hi = 1, n
        while lo < hi:
            mid = (lo + hi) // 2
            if len(text_after_dropping(mid)) <= max_chars:
                hi = mid
            else:
                lo = mid + 1
        return text_after_dropping(lo)

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "lines": list(self.lines),
            "section_headers": dict(self.section_headers),
            "scenarios": list(self.scenarios),
            "timestamps": list(self.timestamps),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BehaviorText":
        return cls(
            user_id=d["user_id"],
            lines=tuple(d["lines"]),
            section_headers=dict(d.get("section_headers") or {}),
            scenarios=tuple(d["scenarios"]),
            timestamps=tuple(d["timestamps"]),
        )


def render_sequence(
    seq: BehaviorSequence,
    registry: Sequence[BehaviorTemplate] = DEFAULT_REGISTRY,
    grouped: bool = True,
) -> BehaviorText:
    """Render a sequence, grouped by scenario unless ``grouped`` is false.

    Groups follow the fixed scenario order and keep newest-first order inside
    each group; flat mode keeps the sequence order and emits no headers.
    """
    events = list(seq.events[: seq.cap])
    if grouped:
        rank = {s: i for i, s in enumerate(SCENARIOS)}
        events = sorted(events, key=lambda e: rank[e.scenario])  # stable: keeps newest-first
    lines = tuple(render_event(e, select_template(registry, e)) for e in events)
    headers = {}
    if grouped:
        headers = {s: SECTION_HEADERS[s] for s in SCENARIOS if any(e.scenario == s for e in events)}
    return BehaviorText(
        user_id=seq.user_id,
        lines=lines,
        section_headers=headers,
        scenarios=tuple(e.scenario for e in events),
        timestamps=tuple(e.timestamp for e in events),
    )
