"""Stage functions with file boundaries, plus an in-memory mock experiment.

Stage outputs (all UTF-8, one JSON object per line unless noted):

==================  ==========================================================
synth               profiles.jsonl, events.jsonl, labels.jsonl, tasks.jsonl,
                    catalog.json (single JSON document)
ingest              behavior store partitions under ``store_path``
fuse                knowledge.jsonl, behavior.jsonl (both sorted by user_id)
build-dataset       train.jsonl, test.jsonl (triples), examples.jsonl
infer               predictions.jsonl, optional features CSV
eval / ablate       report.json, report.txt
==================  ==========================================================
"""

from __future__ import annotations

import dataclasses
import logging
from collections import defaultdict
from pathlib import Path
from typing import Mapping, Sequence

from .backends import MockBackend
from .behavior_store import AnonymizationPolicy, BehaviorStore, anonymize_event, build_sequence
from .catalog import Catalog, default_catalog
from .config import DEFAULT_CUTOFF
from .fusion import FusionConfig, FusionRun, KnowledgeDocument, fuse, fuse_batch
from .instructions import (
    DEFAULT_TASKS,
    ExportSummary,
    InstructionExample,
    TaskTemplate,
    build_examples,
    expand_labels,
    export_dataset,
    sample_per_user,
    task_records,
)
from .jsonl import iter_jsonl, sha256_file, write_jsonl
from .metrics import EvalReport, evaluate_cases, join_cases, read_labels, run_eval
from .prompts import DEFAULT_REGISTRY, BehaviorTemplate, BehaviorText, render_sequence
from .recommender import (
    InferenceRun,
    RankedRecommendation,
    export_semantic_features,
    recommend_batch,
    write_features,
)
from .synthetic import generate_corpus

logger = logging.getLogger(__name__)


def stage_synth(
    out_dir: str | Path,
    n_users: int,
    seed: int,
    cutoff_timestamp: int = DEFAULT_CUTOFF,
    noise_rate: float = 0.0,
    horizon_days: int = 60,
    train_fraction: float = 0.8,
    tasks: Sequence[TaskTemplate] = DEFAULT_TASKS,
) -> dict[str, str]:
    """Write a synthetic corpus and return ``{file name: sha256}``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = generate_corpus(n_users, seed, cutoff_timestamp, noise_rate, horizon_days, train_fraction)
    write_jsonl(out / "profiles.jsonl", (p.to_dict() for p in corpus.profiles))
    write_jsonl(out / "events.jsonl", (e.to_dict() for e in corpus.events))
    write_jsonl(out / "labels.jsonl", (l.to_dict() for l in expand_labels(corpus.labels, tasks)))
    write_jsonl(out / "tasks.jsonl", task_records(tasks))
    default_catalog().save(out / "catalog.json")
    names = ("profiles.jsonl", "events.jsonl", "labels.jsonl", "tasks.jsonl", "catalog.json")
    return {n: sha256_file(out / n) for n in names}


def stage_ingest(events_path: str | Path, store_path: str | Path):
    from .behavior_store import read_event_lines

    return BehaviorStore(store_path).ingest(read_event_lines(events_path))


def stage_fuse(
    store_path: str | Path,
    out_dir: str | Path,
    backend,
    sequence_cap: int = 300,
    concurrency: int = 4,
    registry: Sequence[BehaviorTemplate] = DEFAULT_REGISTRY,
    grouped: bool = True,
    anonymize_salt: bytes | None = None,
    cache_dir: str | Path | None = None,
) -> FusionRun:
    """Fuse every stored user; behavior.jsonl holds the text the backend saw."""
    store = BehaviorStore(store_path)
    policy = AnonymizationPolicy(anonymize_salt) if anonymize_salt else None
    items = []
    for uid in store.list_users():
        seq = store.get_user_sequence(uid, sequence_cap)
        shown = seq
        if policy is not None:
            masked = [anonymize_event(e, policy) for e in seq.events]
            shown = build_sequence(masked[0].user_id, masked, sequence_cap) if masked else seq
        text = dataclasses.replace(render_sequence(shown, registry, grouped), user_id=uid)
        items.append((text, seq))
    config = FusionConfig(concurrency=concurrency, cache_dir=Path(cache_dir) if cache_dir else None)
    run = fuse_batch(items, backend, config)
    out = Path(out_dir)
    write_jsonl(out / "knowledge.jsonl", (d.to_dict() for d in run.documents))
    write_jsonl(out / "behavior.jsonl", (t.to_dict() for t, _ in sorted(items, key=lambda it: it[0].user_id)))
    return run


def read_knowledge(path: str | Path) -> list[KnowledgeDocument]:
    return [KnowledgeDocument.from_dict(r) for r in iter_jsonl(path)]


def read_behavior(path: str | Path) -> list[BehaviorText]:
    return [BehaviorText.from_dict(r) for r in iter_jsonl(path)]


def stage_build_dataset(
    knowledge_path: str | Path | None,
    behavior_path: str | Path | None,
    labels_path: str | Path,
    out_dir: str | Path,
    tasks: Sequence[TaskTemplate] = DEFAULT_TASKS,
    cutoff_timestamp: int = DEFAULT_CUTOFF,
    variant: str = "full",
    k: int = 10,
    tasks_per_user: int | None = None,
    seed: int = 0,
) -> ExportSummary:
    docs = read_knowledge(knowledge_path) if knowledge_path else []
    texts = read_behavior(behavior_path) if behavior_path else []
    build = build_examples(docs, read_labels(labels_path), tasks, cutoff_timestamp, variant, texts, k)
    examples = build.examples
    if tasks_per_user:
        examples = sample_per_user(examples, tasks_per_user, seed)
    return export_dataset(examples, out_dir)


def _test_requests(
    examples: Sequence[InstructionExample], tasks: Sequence[TaskTemplate]
) -> list[tuple[str, TaskTemplate]]:
    by_id = {t.task_id: t for t in tasks}
    pairs = sorted({(e.user_id, e.task_id) for e in examples if e.split == "test"})
    missing = sorted({t for _, t in pairs if t not in by_id})
    if missing:
        raise ValueError(f"examples reference unknown tasks: {missing}")
    return [(u, by_id[t]) for u, t in pairs]


def stage_infer(
    examples: Sequence[InstructionExample],
    inputs: Mapping[str, KnowledgeDocument | BehaviorText],
    out_path: str | Path,
    backend,
    catalog: Catalog,
    variant: str = "full",
    k: int = 10,
    concurrency: int = 4,
    tasks: Sequence[TaskTemplate] = DEFAULT_TASKS,
) -> InferenceRun:
    run = recommend_batch(_test_requests(examples, tasks), k, backend, inputs, catalog, variant, concurrency)
    write_jsonl(out_path, (r.to_dict() for r in run.recommendations))
    return run


def stage_features(
    docs: Sequence[KnowledgeDocument],
    recs: Sequence[RankedRecommendation],
    catalog: Catalog,
    out_path: str | Path,
    tasks: Sequence[TaskTemplate] = DEFAULT_TASKS,
) -> int:
    rows = export_semantic_features(docs, recs, catalog, tasks)
    write_features(out_path, rows, catalog)
    return len(rows)


def stage_eval(
    predictions: Mapping[str, str | Path], labels_path: str | Path, out_dir: str | Path, ks: Sequence[int]
) -> EvalReport:
    report = run_eval(predictions, labels_path, ks)
    report.write(out_dir)
    return report


def stage_ablate(
    knowledge_path: str | Path,
    behavior_path: str | Path,
    labels_path: str | Path,
    out_dir: str | Path,
    backend,
    catalog: Catalog,
    base_backend=None,
    tasks: Sequence[TaskTemplate] = DEFAULT_TASKS,
    cutoff_timestamp: int = DEFAULT_CUTOFF,
    ks: Sequence[int] = (5, 10),
    concurrency: int = 4,
) -> EvalReport:
    """Evaluate full vs no_hkf, plus no_it when a base-model backend is given.

    ``backend`` plays the instruction-tuned model; ``base_backend`` the
    untuned one.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    docs = read_knowledge(knowledge_path)
    texts = read_behavior(behavior_path)
    labels = read_labels(labels_path)
    k = max(ks)
    runs = [("full", "full", backend), ("no_hkf", "no_hkf", backend)]
    if base_backend is not None:
        runs.append(("no_it", "full", base_backend))
    predictions = {}
    for name, variant, be in runs:
        build = build_examples(docs, labels, tasks, cutoff_timestamp, variant, texts, k)
        inputs = {d.user_id: d for d in docs} if variant == "full" else {t.user_id: t for t in texts}
        path = out / f"predictions_{name}.jsonl"
        stage_infer(build.examples, inputs, path, be, catalog, variant, k, concurrency, tasks)
        predictions[name] = path
    return stage_eval(predictions, labels_path, out, ks)


def run_mock_experiment(
    n_users: int = 500,
    seed: int = 7,
    noise_rate: float = 0.0,
    variants: Sequence[str] = ("full", "no_hkf"),
    task_ids: Sequence[str] | None = None,
    ks: Sequence[int] = (5, 10),
    sequence_cap: int = 300,
    horizon_days: int = 60,
    cutoff_timestamp: int = DEFAULT_CUTOFF,
) -> EvalReport:
    """End-to-end mock pipeline in memory, every user in the test split."""
    catalog = default_catalog()
    backend = MockBackend(catalog=catalog)
    tasks = [t for t in DEFAULT_TASKS if task_ids is None or t.task_id in task_ids]
    corpus = generate_corpus(n_users, seed, cutoff_timestamp, noise_rate, horizon_days, 0.0, catalog)
    by_user = defaultdict(list)
    for e in corpus.events:
        by_user[e.user_id].append(e)
    docs, texts = {}, {}
    for p in corpus.profiles:
        seq = build_sequence(p.user_id, by_user[p.user_id], sequence_cap)
        texts[p.user_id] = render_sequence(seq)
        docs[p.user_id] = fuse(texts[p.user_id], seq, backend)
    labels = expand_labels(corpus.labels, tasks)
    cases = {}
    for variant in variants:
        inputs = docs if variant == "full" else texts
        requests = sorted({(l.user_id, l.task_id) for l in labels})
        by_id = {t.task_id: t for t in tasks}
        run = recommend_batch([(u, by_id[t]) for u, t in requests], max(ks), backend, inputs, catalog, variant, 1)
        cases[variant] = join_cases(run.recommendations, labels)
    return evaluate_cases(cases, ks)
