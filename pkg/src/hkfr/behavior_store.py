"""Per-user heterogeneous behavior storage.

Each user owns one append-only JSONL partition under a two-level fan-out
(``<root>/ab/cd/<quoted user id>.jsonl``, where ``abcd`` is the start of the
SHA-256 of the user id).  Lines are the canonical JSON encoding of a
:class:`BehaviorEvent`, so duplicate detection is an exact string compare.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Union
from urllib.parse import quote, unquote

from .jsonl import dumps

logger = logging.getLogger(__name__)

SUBJECT_KINDS = ("merchant", "product")
CONTENT_KINDS = ("exposure", "click", "order")
SCENARIOS = ("app_homepage", "mini_program", "search", "other")
DEFAULT_CAP = 300

EVENT_FIELDS = (
    "user_id",
    "subject_kind",
    "subject_id",
    "subject_name",
    "category",
    "price_minor",
    "content_kind",
    "scenario",
    "timestamp",
    "attributes",
)
_OPTIONAL_FIELDS = {"price_minor", "attributes"}
_STRING_FIELDS = ("user_id", "subject_id", "subject_name", "category")


class InvalidEvent(ValueError):
    """A single record failed validation; ``reason`` is a short stable key."""

    def __init__(self, reason: str, detail: str = "") -> None:
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


class StorageError(RuntimeError):
    pass


class CorruptPartition(StorageError):
    pass


@dataclass(frozen=True)
class BehaviorEvent:
    user_id: str
    subject_kind: str
    subject_id: str
    subject_name: str
    category: str
    price_minor: int | None
    content_kind: str
    scenario: str
    timestamp: int
    attributes: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        _check_invariants(self)

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "subject_kind": self.subject_kind,
            "subject_id": self.subject_id,
            "subject_name": self.subject_name,
            "category": self.category,
            "price_minor": self.price_minor,
            "content_kind": self.content_kind,
            "scenario": self.scenario,
            "timestamp": self.timestamp,
            "attributes": dict(self.attributes),
        }

    def to_json(self) -> str:
        return dumps(self.to_dict())

    @classmethod
    def from_dict(cls, record: Mapping) -> "BehaviorEvent":
        return parse_event(record)

    def sort_key(self) -> tuple:
        # newest first, then (subject_id, content_kind) ascending; the
        # remaining fields settle full ties so ordering is total
        return (
            -self.timestamp,
            self.subject_id,
            self.content_kind,
            self.scenario,
            self.subject_kind,
            self.subject_name,
            self.category,
            -1 if self.price_minor is None else self.price_minor,
            tuple(sorted(self.attributes.items())),
        )


def _check_invariants(ev: BehaviorEvent) -> None:
    for name in _STRING_FIELDS:
        if not isinstance(getattr(ev, name), str):
            raise InvalidEvent("bad type", f"{name} must be a string")
    if not ev.user_id:
        raise InvalidEvent("empty user_id")
    if ev.subject_kind not in SUBJECT_KINDS:
        raise InvalidEvent("invalid subject_kind", repr(ev.subject_kind))
    if ev.content_kind not in CONTENT_KINDS:
        raise InvalidEvent("invalid content_kind", repr(ev.content_kind))
    if ev.scenario not in SCENARIOS:
        raise InvalidEvent("invalid scenario", repr(ev.scenario))
    if isinstance(ev.timestamp, bool) or not isinstance(ev.timestamp, int):
        raise InvalidEvent("bad type", "timestamp must be an integer")
    if ev.timestamp <= 0:
        raise InvalidEvent("nonpositive timestamp")
    if ev.price_minor is not None:
        if isinstance(ev.price_minor, bool) or not isinstance(ev.price_minor, int):
            raise InvalidEvent("bad type", "price_minor must be an integer")
        if ev.price_minor < 0:
            raise InvalidEvent("negative price")
    elif ev.content_kind == "order" and ev.subject_kind == "product":
        raise InvalidEvent("missing price for product order")
    if not isinstance(ev.attributes, Mapping) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in ev.attributes.items()
    ):
        raise InvalidEvent("bad type", "attributes must map strings to strings")


def parse_event(record: Mapping) -> BehaviorEvent:
    """Validate a decoded JSON object and build an event.

    ``price_minor`` and ``attributes`` may be omitted; any other missing key
    or any unknown key rejects the record.
    """
    if not isinstance(record, Mapping):
        raise InvalidEvent("not an object")
    unknown = set(record) - set(EVENT_FIELDS)
    if unknown:
        raise InvalidEvent("unknown keys", ",".join(sorted(unknown)))
    missing = [f for f in EVENT_FIELDS if f not in record and f not in _OPTIONAL_FIELDS]
    if missing:
        raise InvalidEvent("missing field", ",".join(missing))
    attrs = record.get("attributes") or {}
    if not isinstance(attrs, Mapping):
        raise InvalidEvent("bad type", "attributes must be an object")
    return BehaviorEvent(
        user_id=record["user_id"],
        subject_kind=record["subject_kind"],
        subject_id=record["subject_id"],
        subject_name=record["subject_name"],
        category=record["category"],
        price_minor=record.get("price_minor"),
        content_kind=record["content_kind"],
        scenario=record["scenario"],
        timestamp=record["timestamp"],
        attributes=dict(attrs),
    )


@dataclass(frozen=True)
class BehaviorSequence:
    user_id: str
    events: tuple[BehaviorEvent, ...]
    cap: int = DEFAULT_CAP

    def __post_init__(self) -> None:
        if self.cap < 1:
            raise ValueError("cap must be positive")
        if len(self.events) > self.cap:
            raise ValueError(f"{len(self.events)} events exceed cap {self.cap}")
        keys = [e.sort_key() for e in self.events]
        if keys != sorted(keys):
            raise ValueError("events are not in sequence order")
        if any(e.user_id != self.user_id for e in self.events):
            raise ValueError("event user_id does not match sequence user_id")

    def __len__(self) -> int:
        return len(self.events)

    def digest(self) -> str:
        h = hashlib.sha256()
        for e in self.events:
            h.update(e.to_json().encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()


def build_sequence(user_id: str, events: Iterable[BehaviorEvent], cap: int = DEFAULT_CAP) -> BehaviorSequence:
    """Order events newest-first and keep the ``cap`` most recent."""
    if cap < 1:
        raise ValueError("cap must be positive")
    ordered = sorted((e for e in events if e.user_id == user_id), key=BehaviorEvent.sort_key)
    return BehaviorSequence(user_id=user_id, events=tuple(ordered[:cap]), cap=cap)


@dataclass
class IngestSummary:
    accepted: int = 0
    rejected: int = 0
    duplicates: int = 0
    reject_reasons: dict[str, int] = field(default_factory=dict)


Record = Union[BehaviorEvent, Mapping, str]


class BehaviorStore:
    """Filesystem store of per-user behavior partitions.

    Writes to one user's partition are serialized by a per-user lock; reads
    take no lock because appends only ever add whole lines.
    """

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self._locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._locks_guard = threading.Lock()

    def _lock_for(self, user_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks[user_id]

    def partition_path(self, user_id: str) -> Path:
        digest = hashlib.sha256(user_id.encode("utf-8")).hexdigest()
        return self.root / digest[:2] / digest[2:4] / (quote(user_id, safe="") + ".jsonl")

    def ingest(self, records: Iterable[Record]) -> IngestSummary:
        summary = IngestSummary()
        reasons: dict[str, int] = defaultdict(int)
        pending: dict[str, list[str]] = defaultdict(list)
        seen: dict[str, set[str]] = {}

        for rec in records:
            try:
                event = _coerce(rec)
            except InvalidEvent as exc:
                summary.rejected += 1
                reasons[exc.reason] += 1
                continue
            line = event.to_json()
            uid = event.user_id
            if uid not in seen:
                seen[uid] = set(self._read_lines(uid))
            if line in seen[uid]:
                summary.duplicates += 1
                continue
            seen[uid].add(line)
            pending[uid].append(line)
            summary.accepted += 1

        for uid, lines in pending.items():
            self._append(uid, lines)
        summary.reject_reasons = dict(sorted(reasons.items()))
        logger.info(
            "ingested accepted=%d rejected=%d duplicates=%d",
            summary.accepted, summary.rejected, summary.duplicates,
        )
        return summary

    def _append(self, user_id: str, lines: list[str]) -> None:
        path = self.partition_path(user_id)
        with self._lock_for(user_id):
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("a", encoding="utf-8", newline="\n") as fh:
                fh.write("".join(line + "\n" for line in lines))

    def _read_lines(self, user_id: str) -> list[str]:
        path = self.partition_path(user_id)
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            return []
        except (OSError, UnicodeDecodeError) as exc:
            raise CorruptPartition(f"cannot read partition for {user_id!r}: {exc}") from exc
        if text and not text.endswith("\n"):
            raise CorruptPartition(f"partition for {user_id!r} ends with a truncated record")
        return text.splitlines()

    def read_events(self, user_id: str) -> list[BehaviorEvent]:
        """All stored events for ``user_id`` in file order."""
        events = []
        for lineno, line in enumerate(self._read_lines(user_id), 1):
            try:
                event = parse_event(json.loads(line))
            except (json.JSONDecodeError, InvalidEvent) as exc:
                raise CorruptPartition(
                    f"{self.partition_path(user_id)}:{lineno}: {exc}"
                ) from exc
            if event.user_id != user_id:
                raise CorruptPartition(
                    f"{self.partition_path(user_id)}:{lineno}: foreign user_id {event.user_id!r}"
                )
            events.append(event)
        return events

    def get_user_sequence(self, user_id: str, cap: int = DEFAULT_CAP) -> BehaviorSequence:
        return build_sequence(user_id, self.read_events(user_id), cap)

    def list_users(self) -> list[str]:
        if not self.root.exists():
            return []
        return sorted(unquote(p.name[: -len(".jsonl")]) for p in self.root.glob("*/*/*.jsonl"))


def _coerce(rec: Record) -> BehaviorEvent:
    if isinstance(rec, BehaviorEvent):
        return rec
    if isinstance(rec, str):
        try:
            rec = json.loads(rec)
        except json.JSONDecodeError:
            raise InvalidEvent("malformed json") from None
    return parse_event(rec)


def read_event_lines(path: str | Path) -> Iterable[str]:
    """Yield raw non-blank lines; an unreadable file raises immediately."""
    path = Path(path)
    fh = path.open("r", encoding="utf-8")

    def gen():
        with fh:
            for line in fh:
                if line.strip():
                    yield line

    return gen()


def ingest_events(records: Iterable[Record], store_path: str | Path) -> IngestSummary:
    return BehaviorStore(store_path).ingest(records)


@dataclass(frozen=True)
class AnonymizationPolicy:
    salt: bytes
    fields_to_mask: frozenset[str] = frozenset({"user_id", "subject_id"})

    def __post_init__(self) -> None:
        if not self.salt:
            raise ValueError("anonymization salt must be non-empty")
        bad = set(self.fields_to_mask) - set(_STRING_FIELDS)
        if bad:
            raise ValueError(f"cannot mask non-string fields: {sorted(bad)}")


def mask_value(value: str, salt: bytes) -> str:
    return hashlib.sha256(salt + value.encode("utf-8")).hexdigest()[:16]


def anonymize_event(event: BehaviorEvent, policy: AnonymizationPolicy) -> BehaviorEvent:
    changes = {name: mask_value(getattr(event, name), policy.salt) for name in policy.fields_to_mask}
    return dataclasses.replace(event, **changes)
