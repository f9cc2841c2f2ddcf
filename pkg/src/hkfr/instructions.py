"""Instruction-tuning dataset construction and trainer hand-off files."""

from __future__ import annotations

import logging
import random
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .fusion import KnowledgeDocument
from .jsonl import dumps, iter_jsonl, sha256_bytes
from .prompts import DEFAULT_MAX_INPUT_CHARS, BehaviorText
from .synthetic import LABEL_KINDS, LabelRecord

logger = logging.getLogger(__name__)

VARIANTS = ("full", "no_hkf")
SPLITS = ("train", "test")
TRIPLE_FIELDS = ("instruction", "input", "output")
DEFAULT_K = 10


@dataclass(frozen=True)
class TaskTemplate:
    task_id: str
    label_kind: str
    instruction_text: str

    def __post_init__(self) -> None:
        if self.label_kind not in LABEL_KINDS:
            raise ValueError(f"{self.task_id}: unknown label kind {self.label_kind!r}")
        if "{k}" not in self.instruction_text:
            raise ValueError(f"{self.task_id}: instruction must ask for {{k}} items")

    def instruction(self, k: int = DEFAULT_K) -> str:
        return self.instruction_text.replace("{k}", str(k))


_CATEGORY = [
    "Based on the user's profile, recommend the {k} food categories the user is most likely to order next, ranked from most to least likely.",
    "Predict which cuisine category this user will order from next. List the top {k} categories in ranked order.",
    "Which {k} categories best match this user's dining preferences? Rank them.",
    "Rank the {k} food categories this user prefers most for their next meal.",
    "Given the user's recent behavior, list {k} categories the user is likely to purchase next, most likely first.",
    "Identify the user's favorite categories and give a ranked list of {k} categories for the next order.",
    "Recommend {k} categories for this user's next delivery order, ordered by preference.",
    "What will this user most likely order next? Answer with {k} ranked categories.",
]
_POI = [
    "Recommend {k} restaurants this user is most likely to order from next, ranked.",
    "Predict the store of the user's next order. List the top {k} candidate stores in ranked order.",
    "Which {k} stores should be shown to this user for their next order? Rank them.",
]
_MERCHANT = [
    "Predict which merchant this user will click next. List {k} merchants, most likely first.",
    "Rank {k} merchants by how likely the user is to click on them next.",
    "Recommend {k} merchants this user is likely to visit next, ranked by likelihood.",
]
_PRICE = [
    "Predict the price band of the user's next order. Rank {k} price bands from most to least likely.",
    "How much will this user spend on the next order? List {k} price bands in ranked order.",
    "Rank {k} price bands by how well they fit this user's spending habits.",
    "Recommend {k} price bands for this user's next order, most likely first.",
]
_COMBINED = [
    ("category", "Considering the user's preferred categories, price range and favorite merchants together, recommend {k} categories for the next order, ranked."),
    ("poi", "Considering the user's preferred categories, price range and favorite merchants together, recommend {k} stores for the next order, ranked."),
]

DEFAULT_TASKS: tuple[TaskTemplate, ...] = (
    *(TaskTemplate(f"category_{i + 1:02d}", "category", t) for i, t in enumerate(_CATEGORY)),
    *(TaskTemplate(f"poi_{i + 1:02d}", "poi", t) for i, t in enumerate(_POI)),
    *(TaskTemplate(f"merchant_{i + 1:02d}", "merchant", t) for i, t in enumerate(_MERCHANT)),
    *(TaskTemplate(f"price_band_{i + 1:02d}", "price_band", t) for i, t in enumerate(_PRICE)),
    *(TaskTemplate(f"combined_{kind}", kind, t) for kind, t in _COMBINED),
)


def validate_tasks(tasks: Sequence[TaskTemplate]) -> None:
    ids = [t.task_id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ValueError("task_id values must be unique")


def load_tasks(path: str | Path) -> list[TaskTemplate]:
    tasks = [TaskTemplate(**rec) for rec in iter_jsonl(path)]
    validate_tasks(tasks)
    return tasks


def task_records(tasks: Sequence[TaskTemplate]) -> list[dict]:
    return [asdict(t) for t in tasks]


def expand_labels(labels: Iterable[LabelRecord], tasks: Sequence[TaskTemplate]) -> list[LabelRecord]:
    """Turn per-kind labels (empty task_id) into one record per matching task."""
    out = []
    for lab in labels:
        if lab.task_id:
            out.append(lab)
            continue
        for t in tasks:
            if t.label_kind == lab.label_kind:
                out.append(LabelRecord(lab.user_id, t.task_id, lab.label_kind, lab.label_value, lab.cutoff_timestamp))
    return sorted(out, key=lambda r: (r.user_id, r.task_id, r.cutoff_timestamp))


@dataclass(frozen=True)
class InstructionExample:
    example_id: str
    task_id: str
    instruction: str
    input: str
    output: str
    user_id: str
    split: str

    def __post_init__(self) -> None:
        if not (self.instruction and self.input and self.output):
            raise ValueError(f"{self.example_id}: instruction, input and output must be non-empty")
        if self.split not in SPLITS:
            raise ValueError(f"{self.example_id}: bad split {self.split!r}")

    def triple(self) -> dict:
        return {"instruction": self.instruction, "input": self.input, "output": self.output}

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DatasetBuild:
    examples: list[InstructionExample]
    skipped: list[tuple[str, str, str]] = field(default_factory=list)  # (user_id, task_id, reason)


def _select_labels(
    by_user_kind: Mapping[tuple[str, str], list[LabelRecord]], user_id: str, task: TaskTemplate
) -> list[LabelRecord]:
    pool = by_user_kind.get((user_id, task.label_kind), [])
    own = [l for l in pool if l.task_id == task.task_id]
    chosen = own or [l for l in pool if not l.task_id]
    seen, out = set(), []
    for l in sorted(chosen, key=lambda l: l.cutoff_timestamp):
        if l.cutoff_timestamp not in seen:
            seen.add(l.cutoff_timestamp)
            out.append(l)
    return out


def build_examples(
    knowledge: Iterable[KnowledgeDocument],
    labels: Iterable[LabelRecord],
    tasks: Sequence[TaskTemplate],
    cutoff_timestamp: int,
    variant: str = "full",
    behavior_texts: Iterable[BehaviorText] = (),
    k: int = DEFAULT_K,
    max_input_chars: int = DEFAULT_MAX_INPUT_CHARS,
) -> DatasetBuild:
    """One example per (user, task) that has a label of the task's kind.

    Split is decided only by the label's cutoff: strictly before
    ``cutoff_timestamp`` is train, anything else is test.  The ``no_hkf``
    variant swaps the fused knowledge text for the raw behavior text.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    validate_tasks(tasks)
    docs = {d.user_id: d for d in knowledge}
    texts = {b.user_id: b for b in behavior_texts}
    by_user_kind: dict[tuple[str, str], list[LabelRecord]] = defaultdict(list)
    for lab in labels:
        by_user_kind[(lab.user_id, lab.label_kind)].append(lab)
    users = sorted({u for u, _ in by_user_kind})
    input_cache: dict[str, str | None] = {}

    def input_for(user_id: str) -> str | None:
        if user_id not in input_cache:
            if variant == "full":
                doc = docs.get(user_id)
                input_cache[user_id] = doc.text[:max_input_chars] if doc else None
            else:
                bt = texts.get(user_id)
                input_cache[user_id] = bt.as_text(max_input_chars) if bt else None
        return input_cache[user_id]

    build = DatasetBuild(examples=[])
    for user_id in users:
        for task in sorted(tasks, key=lambda t: t.task_id):
            for lab in _select_labels(by_user_kind, user_id, task):
                text = input_for(user_id)
                if not text:
                    reason = "no knowledge document" if variant == "full" else "no behavior text"
                    if text == "":
                        reason = "empty input"
                    build.skipped.append((user_id, task.task_id, reason))
                    continue
                build.examples.append(
                    InstructionExample(
                        example_id=f"{user_id}/{task.task_id}/{lab.cutoff_timestamp}",
                        task_id=task.task_id,
                        instruction=task.instruction(k),
                        input=text,
                        output=lab.label_value,
                        user_id=user_id,
                        split="train" if lab.cutoff_timestamp < cutoff_timestamp else "test",
                    )
                )
    if build.skipped:
        logger.warning("skipped %d (user, task) pairs without input", len(build.skipped))
    return build


def sample_per_user(examples: Sequence[InstructionExample], n: int, seed: int) -> list[InstructionExample]:
    """Keep at most ``n`` examples per user and split, chosen reproducibly."""
    groups: dict[tuple[str, str], list[InstructionExample]] = defaultdict(list)
    for ex in examples:
        groups[(ex.user_id, ex.split)].append(ex)
    rng = random.Random(seed)
    kept = []
    for key in sorted(groups):
        group = groups[key]
        kept.extend(group if len(group) <= n else rng.sample(group, n))
    return sorted(kept, key=lambda e: (e.user_id, e.task_id, e.example_id))


@dataclass(frozen=True)
class ExportSummary:
    train_count: int
    test_count: int
    sha256: str


def export_dataset(examples: Sequence[InstructionExample], path: str | Path, format: str = "triples") -> ExportSummary:
    """Write ``train.jsonl``/``test.jsonl`` triples plus an ``examples.jsonl`` manifest.

    The digest covers the exact bytes of the train file followed by the test
    file.
    """
    if format != "triples":
        raise ValueError(f"unsupported export format {format!r}")
    if not examples:
        raise ValueError("nothing to export")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    ordered = sorted(examples, key=lambda e: (e.user_id, e.task_id, e.example_id))
    blobs = {}
    for split in SPLITS:
        blobs[split] = "".join(dumps(e.triple()) + "\n" for e in ordered if e.split == split).encode("utf-8")
        (out / f"{split}.jsonl").write_bytes(blobs[split])
    (out / "examples.jsonl").write_bytes("".join(dumps(e.to_dict()) + "\n" for e in ordered).encode("utf-8"))
    return ExportSummary(
        train_count=sum(e.split == "train" for e in ordered),
        test_count=sum(e.split == "test" for e in ordered),
        sha256=sha256_bytes(blobs["train"], blobs["test"]),
    )


def read_triples(path: str | Path) -> list[dict]:
    rows = []
    for rec in iter_jsonl(path):
        if set(rec) != set(TRIPLE_FIELDS):
            raise ValueError(f"{path}: record fields {sorted(rec)} are not {list(TRIPLE_FIELDS)}")
        rows.append(rec)
    return rows


def read_examples(path: str | Path) -> list[InstructionExample]:
    return [InstructionExample(**rec) for rec in iter_jsonl(path)]
