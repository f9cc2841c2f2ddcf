"""Top-k HR and NDCG over single-label next-item cases.

Each case has exactly one relevant item, so the ideal DCG is 1 and
NDCG@k reduces to ``1 / log2(1 + rank)`` for a hit at ``rank <= k``.
Parse failures arrive as empty prediction lists and score zero.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .jsonl import iter_jsonl
from .recommender import normalize, read_predictions
from .synthetic import LabelRecord

DEFAULT_KS = (5, 10)


class ConsistencyError(ValueError):
    def __init__(self, message: str, offenders: Sequence[tuple[str, str]] = ()) -> None:
        super().__init__(message)
        self.offenders = list(offenders)


@dataclass(frozen=True)
class EvalCase:
    user_id: str
    task_id: str
    label_value: str
    predicted: tuple[str, ...]
    parse_failed: bool = False

    def __post_init__(self) -> None:
        if not self.label_value:
            raise ValueError("label_value must be non-empty")


def hit_rank(case: EvalCase) -> int | None:
    target = normalize(case.label_value)
    for rank, item in enumerate(case.predicted, 1):
        if normalize(item) == target:
            return rank
    return None


def _check(cases: Sequence[EvalCase], k: int) -> None:
    if not cases:
        raise ValueError("metrics need at least one case")
    if k < 1:
        raise ValueError("k must be positive")


def hr_at_k(cases: Sequence[EvalCase], k: int) -> float:
    _check(cases, k)
    hits = 0
    for c in cases:
        r = hit_rank(c)
        hits += r is not None and r <= k
    return hits / len(cases)


def ndcg_at_k(cases: Sequence[EvalCase], k: int) -> float:
    _check(cases, k)
    total = 0.0
    for c in cases:
        r = hit_rank(c)
        if r is not None and r <= k:
            total += 1.0 / math.log2(1 + r)
    return total / len(cases)


@dataclass
class CellMetrics:
    hr_at: dict[int, float]
    ndcg_at: dict[int, float]
    n_cases: int
    n_parse_failures: int


@dataclass
class EvalReport:
    ks: tuple[int, ...]
    cells: dict[tuple[str, str], CellMetrics] = field(default_factory=dict)  # (task_id, variant)

    @property
    def tasks(self) -> list[str]:
        return sorted({t for t, _ in self.cells})

    @property
    def variants(self) -> list[str]:
        seen: list[str] = []
        for _, v in self.cells:
            if v not in seen:
                seen.append(v)
        return seen

    def to_dict(self) -> dict:
        return {
            "ks": list(self.ks),
            "rows": [
                {
                    "task_id": t,
                    "variant": v,
                    "hr_at": {str(k): m.hr_at[k] for k in self.ks},
                    "ndcg_at": {str(k): m.ndcg_at[k] for k in self.ks},
                    "n_cases": m.n_cases,
                    "n_parse_failures": m.n_parse_failures,
                }
                for (t, v), m in self.cells.items()
            ],
        }

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (out / "report.txt").write_text(render_table(self), encoding="utf-8")


def evaluate_cases(
    cases_by_variant: Mapping[str, Sequence[EvalCase]], ks: Sequence[int] = DEFAULT_KS
) -> EvalReport:
    report = EvalReport(ks=tuple(ks))
    for variant, cases in cases_by_variant.items():
        by_task: dict[str, list[EvalCase]] = {}
        for c in cases:
            by_task.setdefault(c.task_id, []).append(c)
        for task_id in sorted(by_task):
            group = by_task[task_id]
            report.cells[(task_id, variant)] = CellMetrics(
                hr_at={k: hr_at_k(group, k) for k in ks},
                ndcg_at={k: ndcg_at_k(group, k) for k in ks},
                n_cases=len(group),
                n_parse_failures=sum(c.parse_failed for c in group),
            )
    report.cells = dict(sorted(report.cells.items(), key=lambda kv: (kv[0][0], list(cases_by_variant).index(kv[0][1]))))
    return report


def join_cases(predictions: Iterable, labels: Iterable[LabelRecord]) -> list[EvalCase]:
    """Pair predictions with labels by (user_id, task_id).

    A prediction without a label is a consistency error naming every
    offending pair; labels without predictions are ignored.
    """
    label_by_key: dict[tuple[str, str], LabelRecord] = {}
    for lab in labels:
        label_by_key[(lab.user_id, lab.task_id)] = lab
    cases, offenders = [], []
    for p in predictions:
        lab = label_by_key.get((p.user_id, p.task_id))
        if lab is None:
            offenders.append((p.user_id, p.task_id))
            continue
        cases.append(
            EvalCase(p.user_id, p.task_id, lab.label_value, tuple(p.displays), p.parse_status == "failed")
        )
    if offenders:
        listed = ", ".join(f"({u}, {t})" for u, t in offenders[:20])
        more = f" and {len(offenders) - 20} more" if len(offenders) > 20 else ""
        raise ConsistencyError(f"{len(offenders)} predictions lack labels: {listed}{more}", offenders)
    return cases


def read_labels(path: str | Path) -> list[LabelRecord]:
    return [LabelRecord.from_dict(r) for r in iter_jsonl(path)]


def run_eval(
    predictions: Mapping[str, str | Path],
    labels_path: str | Path,
    ks: Sequence[int] = DEFAULT_KS,
) -> EvalReport:
    """Evaluate one predictions file per variant against a shared label file."""
    labels = read_labels(labels_path)
    cases = {variant: join_cases(read_predictions(path), labels) for variant, path in predictions.items()}
    empty = [v for v, c in cases.items() if not c]
    if empty:
        raise ConsistencyError(f"no predictions to evaluate for variant(s) {empty}")
    return evaluate_cases(cases, ks)


def render_table(report: EvalReport) -> str:
    """Fixed-width table: one row per variant, one HR/NDCG@k column group per task."""
    metric_cols = [f"{m}@{k}" for k in report.ks for m in ("HR", "NDCG")]
    col_w = max(8, *(len(c) for c in metric_cols)) + 1
    group_w = col_w * len(metric_cols)
    label_w = max([len("variant")] + [len(v) for v in report.variants]) + 2
    tasks = report.tasks
    head1 = f"{'':<{label_w}}" + "".join(f"|{t[:group_w]:^{group_w}}" for t in tasks)
    head2 = f"{'variant':<{label_w}}" + "".join("|" + "".join(f"{c:>{col_w}}" for c in metric_cols) for _ in tasks)
    lines = [head1, head2, "-" * len(head2)]
    for v in report.variants:
        row = f"{v:<{label_w}}"
        for t in tasks:
            m = report.cells.get((t, v))
            if m is None:
                row += "|" + f"{'-':>{col_w}}" * len(metric_cols)
                continue
            vals = [(m.hr_at if name == "HR" else m.ndcg_at)[k] for k in report.ks for name in ("HR", "NDCG")]
            row += "|" + "".join(f"{x:>{col_w}.4f}" for x in vals)
        lines.append(row)
    return "\n".join(lines) + "\n"
