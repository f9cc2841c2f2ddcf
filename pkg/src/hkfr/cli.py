"""``hkfr`` command line: synth, ingest, fuse, build-dataset, infer, eval, ablate.

Exit codes: 0 success, 1 usage error, 2 consistency/validation error,
3 backend unavailable or rejecting requests.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .backends import make_backend
from .behavior_store import StorageError
from .catalog import Catalog, default_catalog
from .chat import BackendError
from .config import ConfigError, RunConfig, load_config
from .fusion import FusionError
from .instructions import DEFAULT_TASKS, load_tasks, read_examples
from .metrics import ConsistencyError
from .pipeline import (
    read_behavior,
    read_knowledge,
    stage_ablate,
    stage_build_dataset,
    stage_eval,
    stage_features,
    stage_fuse,
    stage_infer,
    stage_ingest,
    stage_synth,
)
from .prompts import DEFAULT_REGISTRY, TemplateError, load_registry

logger = logging.getLogger("hkfr")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_BACKEND = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _ks(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad k list {text!r}") from None


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run configuration (flags override the config file)")
    g.add_argument("--config", type=Path, help="YAML run configuration")
    g.add_argument("--store-path")
    g.add_argument("--backend", dest="backend_kind", choices=["mock", "http"])
    g.add_argument("--endpoint")
    g.add_argument("--model-name")
    g.add_argument("--concurrency", type=int)
    g.add_argument("--sequence-cap", type=int)
    g.add_argument("--cutoff", dest="cutoff_timestamp", type=int, help="epoch seconds")
    g.add_argument("--ks", type=_ks, help="comma-separated cutoffs, e.g. 5,10")
    g.add_argument("--variant", choices=["full", "no_hkf"])
    g.add_argument("--seed", type=int)
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="hkfr", description="Behavior-log to LLM recommendation pipeline with file-based stages")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--noise-rate", type=float, default=0.0)
    p.add_argument("--horizon-days", type=int, default=60)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--tasks", type=Path, help="task registry (JSONL)")

    p = sub.add_parser("ingest", parents=[common], help="load behavior events into the store")
    p.add_argument("--events", type=Path, required=True)

    p = sub.add_parser("fuse", parents=[common], help="fuse stored behavior into knowledge")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--templates", type=Path, help="template registry (JSONL)")
    p.add_argument("--flat", action="store_true", help="chronological text without scenario sections")
    p.add_argument("--anonymize-salt", help="mask user and subject ids before text reaches the backend")
    p.add_argument("--cache-dir", type=Path)

    p = sub.add_parser("build-dataset", parents=[common], help="build instruction-tuning files")
    p.add_argument("--knowledge", type=Path)
    p.add_argument("--behavior", type=Path)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--tasks", type=Path)
    p.add_argument("--k", type=int)
    p.add_argument("--tasks-per-user", type=int)

    p = sub.add_parser("infer", parents=[common], help="recommend for the test split")
    p.add_argument("--examples", type=Path, required=True, help="examples.jsonl from build-dataset")
    p.add_argument("--knowledge", type=Path)
    p.add_argument("--behavior", type=Path)
    p.add_argument("--catalog", type=Path)
    p.add_argument("--tasks", type=Path)
    p.add_argument("--k", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--features", type=Path, help="also write semantic features (CSV)")

    p = sub.add_parser("eval", parents=[common], help="score predictions with HR@k/NDCG@k")
    p.add_argument("--predictions", action="append", required=True, metavar="[VARIANT=]PATH")
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("ablate", parents=[common], help="full vs no_hkf (vs no_it) comparison")
    p.add_argument("--knowledge", type=Path, required=True)
    p.add_argument("--behavior", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--catalog", type=Path)
    p.add_argument("--tasks", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--base-config", type=Path, help="config whose backend is the untuned base model")
    return parser


def _config(args) -> RunConfig:
    return load_config(
        args.config,
        {
            "store_path": args.store_path,
            "backend.kind": args.backend_kind,
            "backend.endpoint": args.endpoint,
            "backend.model_name": args.model_name,
            "concurrency": args.concurrency,
            "sequence_cap": args.sequence_cap,
            "cutoff_timestamp": args.cutoff_timestamp,
            "ks": args.ks,
            "variant": args.variant,
            "seed": args.seed,
        },
    )


def _backend(cfg: RunConfig, catalog: Catalog | None = None):
    return make_backend(cfg.backend.kind, cfg.backend.model_name, cfg.backend.endpoint, catalog)


def _tasks(path):
    return load_tasks(path) if path else list(DEFAULT_TASKS)


def _catalog(path):
    return Catalog.load(path) if path else default_catalog()


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _raise_backend_failures(failures) -> None:
    if failures:
        cause = failures[0].__cause__
        raise BackendError(f"{len(failures)} backend call(s) failed; first: {failures[0]} ({cause})")


def cmd_synth(args, cfg: RunConfig) -> int:
    digests = stage_synth(
        args.out, args.users, cfg.seed, cfg.cutoff_timestamp, args.noise_rate,
        args.horizon_days, args.train_fraction, _tasks(args.tasks),
    )
    _emit(digests)
    return EXIT_OK


def cmd_ingest(args, cfg: RunConfig) -> int:
    summary = stage_ingest(args.events, cfg.store_path)
    _emit(
        {
            "accepted": summary.accepted,
            "rejected": summary.rejected,
            "duplicates": summary.duplicates,
            "reject_reasons": summary.reject_reasons,
        }
    )
    return EXIT_OK


def cmd_fuse(args, cfg: RunConfig) -> int:
    registry = load_registry(args.templates) if args.templates else DEFAULT_REGISTRY
    run = stage_fuse(
        cfg.store_path, args.out, _backend(cfg), cfg.sequence_cap, cfg.concurrency, registry,
        grouped=not args.flat,
        anonymize_salt=args.anonymize_salt.encode("utf-8") if args.anonymize_salt else None,
        cache_dir=args.cache_dir,
    )
    _emit({"fused": len(run.documents), "failed": [f.user_id for f in run.failures]})
    _raise_backend_failures(run.failures)
    return EXIT_OK


def cmd_build_dataset(args, cfg: RunConfig) -> int:
    if cfg.variant == "full" and not args.knowledge:
        raise UsageError("--knowledge is required for the full variant")
    if cfg.variant == "no_hkf" and not args.behavior:
        raise UsageError("--behavior is required for the no_hkf variant")
    summary = stage_build_dataset(
        args.knowledge, args.behavior, args.labels, args.out, _tasks(args.tasks), cfg.cutoff_timestamp,
        cfg.variant, args.k or max(cfg.ks), args.tasks_per_user, cfg.seed,
    )
    _emit({"train_count": summary.train_count, "test_count": summary.test_count, "sha256": summary.sha256})
    return EXIT_OK


def cmd_infer(args, cfg: RunConfig) -> int:
    catalog = _catalog(args.catalog)
    tasks = _tasks(args.tasks)
    docs = read_knowledge(args.knowledge) if args.knowledge else []
    if cfg.variant == "full":
        if not args.knowledge:
            raise UsageError("--knowledge is required for the full variant")
        inputs = {d.user_id: d for d in docs}
    else:
        if not args.behavior:
            raise UsageError("--behavior is required for the no_hkf variant")
        inputs = {t.user_id: t for t in read_behavior(args.behavior)}
    run = stage_infer(
        read_examples(args.examples), inputs, args.out, _backend(cfg, catalog), catalog,
        cfg.variant, args.k or max(cfg.ks), cfg.concurrency, tasks,
    )
    if args.features:
        if not docs:
            raise UsageError("--features needs --knowledge")
        stage_features(docs, run.recommendations, catalog, args.features, tasks)
    statuses = {}
    for r in run.recommendations:
        statuses[r.parse_status] = statuses.get(r.parse_status, 0) + 1
    _emit({"predictions": len(run.recommendations), "parse_status": statuses, "failed": len(run.failures)})
    _raise_backend_failures(run.failures)
    return EXIT_OK


def _prediction_specs(specs: Sequence[str], default_variant: str) -> dict[str, Path]:
    out = {}
    for spec in specs:
        variant, sep, path = spec.partition("=")
        if not sep:
            variant, path = default_variant, spec
        if variant in out:
            raise UsageError(f"variant {variant!r} given twice")
        out[variant] = Path(path)
    return out


def cmd_eval(args, cfg: RunConfig) -> int:
    report = stage_eval(_prediction_specs(args.predictions, cfg.variant), args.labels, args.out, cfg.ks)
    print((args.out / "report.txt").read_text(encoding="utf-8"), end="")
    logger.info("evaluated %d (task, variant) cells", len(report.cells))
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    catalog = _catalog(args.catalog)
    base = None
    if args.base_config:
        base = _backend(load_config(args.base_config), catalog)
    stage_ablate(
        args.knowledge, args.behavior, args.labels, args.out, _backend(cfg, catalog), catalog, base,
        _tasks(args.tasks), cfg.cutoff_timestamp, cfg.ks, cfg.concurrency,
    )
    print((args.out / "report.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "fuse": cmd_fuse,
    "build-dataset": cmd_build_dataset,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def cmd_pipeline(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"hkfr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = _config(args)
        logger.info("command=%s config_digest=%s seed=%d", args.command, cfg.digest(), cfg.seed)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"hkfr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BackendError, FusionError) as exc:
        print(f"hkfr: backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (ConsistencyError, ConfigError, TemplateError, StorageError, ValueError, KeyError, OSError) as exc:
        print(f"hkfr: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:  # pragma: no cover
    sys.exit(cmd_pipeline())


if __name__ == "__main__":  # pragma: no cover
    main()
