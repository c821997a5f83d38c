"""Command-line entry point: ``datasetagent --task {build,expand,metrics,resume}``.

Exit codes: 0 success, 2 the demand needs clarification (batch mode),
3 the run aborted or its input could not be used, 130 interrupted.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .acquisition import SourceDescriptor
from .errors import (
    DatasetAgentError,
    EmptyDataset,
    IrrelevantDemand,
    LocatorMissing,
    MalformedBackendReply,
    NoCheckpoint,
    RunAborted,
    UnrecognizedLayout,
    WorkspaceCorrupt,
)
from .gateway import MockTransport, load_replies, make_backends
from .pipeline import RunConfig, apply_quality, load_config, load_run, open_run
from .report import build_report, load_dataset
from .spec_intake import ClarificationRequest, DatasetSpec, clarify, inspect_dataset, keyword_reply, parse_demand
from .supervision import diagnosis_reply

EXIT_OK = 0
EXIT_CLARIFY = 2
EXIT_ABORT = 3
EXIT_INTERRUPT = 130


def offline_text_reply(prompt: str) -> str:
    """Text answers of the mock backend: rule-based demand extraction and diagnosis."""
    for responder in (keyword_reply, diagnosis_reply):
        reply = responder(prompt)
        if reply is not None:
            return reply
    return "Skip"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="datasetagent", description="Build, expand and score image datasets.")
    p.add_argument("--task", choices=("build", "expand", "metrics", "resume"), required=True)
    demand = p.add_mutually_exclusive_group()
    demand.add_argument("--demand", help="the dataset request as text")
    demand.add_argument("--demand-file", type=Path, help="read the request from a file")
    p.add_argument("--config", type=Path, help="TOML configuration file")
    p.add_argument("--workspace", type=Path, help="directory holding run directories")
    p.add_argument("--root", type=Path, help="existing dataset (expand, metrics)")
    p.add_argument("--corpus", help="candidate images: a directory, a manifest .tsv or a URL list")
    p.add_argument("--source-id", help="source label recorded for every candidate")
    p.add_argument("--mock-backends", action="store_true", help="use offline backends that replay fixture sidecars")
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--run-id", help="run identifier (default: derived from spec, seed and corpus)")
    p.add_argument("--interactive", action="store_true", help="ask clarification questions on the terminal")
    p.add_argument("--inspections", type=Path, help="directory with human inspection results (metrics)")
    p.add_argument("--out", type=Path, help="write the metric report JSON here (metrics)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _config(args) -> RunConfig:
    config = load_config(args.config)
    overrides = {}
    if args.workspace is not None:
        overrides["workspace"] = str(args.workspace)
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.corpus is not None:
        overrides["corpus"] = args.corpus
    if args.source_id is not None:
        overrides["source_id"] = args.source_id
    if args.mock_backends:
        overrides["mock"] = True
    return replace(config, **overrides)


def _backends(config: RunConfig):
    transport = MockTransport(load_replies(config.mock_replies), fallback=offline_text_reply) if config.mock else None
    return make_backends(config.backends, mock=config.mock, mock_transport=transport)


def _demand_text(args) -> str:
    if args.demand is not None:
        return args.demand
    if args.demand_file is not None:
        return args.demand_file.read_text()
    if not sys.stdin.isatty():
        return sys.stdin.read()
    raise SystemExit("a demand is required: pass --demand, --demand-file or pipe it on stdin")


def _ask_terminal(request: ClarificationRequest) -> dict[str, str]:
    return {field: input(f"{question}\n> ") for field, question in zip(request.missing, request.questions)}


def _resolve_spec(args, config: RunConfig, backends, source: SourceDescriptor) -> DatasetSpec | ClarificationRequest:
    raw = _demand_text(args)
    if args.task == "expand":
        raw = clarify(raw, {"task_kind": "expand"})
    kwargs = {"dataset_root": args.root, "source": source}
    for _ in range(5):
        result = parse_demand(raw, backends.text, **kwargs)
        if isinstance(result, DatasetSpec) or not args.interactive:
            return result
        raw = clarify(raw, _ask_terminal(result))
    return result


def cmd_run(args, config: RunConfig) -> int:
    corpus = config.corpus
    if not corpus:
        print("error: no candidate corpus; pass --corpus or set run.corpus", file=sys.stderr)
        return EXIT_ABORT
    if args.task == "expand" and args.root is None:
        print("error: --task expand needs --root", file=sys.stderr)
        return EXIT_ABORT
    backends = _backends(config)
    source = SourceDescriptor.infer(corpus, config.source_id)
    result = _resolve_spec(args, config, backends, source)
    if isinstance(result, ClarificationRequest):
        print("Demand: clarification needed", file=sys.stderr)
        for field, question in zip(result.missing, result.questions):
            print(f"  {field}: {question}", file=sys.stderr)
        for v in result.violations:
            print(f"  invalid {v.field}: {v.rule}", file=sys.stderr)
        return EXIT_CLARIFY
    spec = apply_quality(result, config.quality)
    meta = None
    if args.task == "expand":
        found = inspect_dataset(args.root)
        meta = {
            "root": str(args.root),
            "layout": found.layout.value,
            "per_class_counts": found.per_class_counts,
            "image_count": found.image_count,
        }
        for v in found.conflicts:
            print(f"Demand: {v.field} {v.rule}; using the dataset's value", file=sys.stderr)
    names = ", ".join(spec.class_names())
    print(f"Demand: {spec.task_kind.value} a {spec.task_type.value} dataset '{spec.name}' with classes [{names}], {spec.per_class_target} per class")
    if spec.target_resolution:
        print(f"Demand: resize images to {spec.target_resolution[0]}x{spec.target_resolution[1]}")
    run = open_run(config.workspace, spec, config, backends, source, args.run_id, meta)
    return _execute(run)


def _execute(run) -> int:
    try:
        run.start()
        print(f"Supervisor: run {run.run_id} in {run.ws.root}")
        run.execute()
    except RunAborted as exc:
        print(f"Supervisor: run aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except KeyboardInterrupt:
        return EXIT_INTERRUPT
    finally:
        run.close()
    print(f"Output: {run.ws.out}")
    return EXIT_OK


def cmd_resume(args, config: RunConfig) -> int:
    if not args.run_id:
        print("error: --task resume needs --run-id", file=sys.stderr)
        return EXIT_ABORT
    run = load_run(config.workspace, args.run_id, config, _backends(config))
    return _execute(run)


def cmd_metrics(args, config: RunConfig) -> int:
    if args.root is None:
        print("error: --task metrics needs --root", file=sys.stderr)
        return EXIT_ABORT
    report = build_report(load_dataset(args.root), args.inspections)
    print(report.to_text(), end="")
    if args.out is not None:
        args.out.write_text(report.to_json())
    else:
        print(json.dumps({"columns": report.columns}))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _config(args)
        if args.task in ("build", "expand"):
            return cmd_run(args, config)
        if args.task == "resume":
            return cmd_resume(args, config)
        return cmd_metrics(args, config)
    except IrrelevantDemand as exc:
        print(f"Demand: not a dataset request ({exc})", file=sys.stderr)
        return EXIT_CLARIFY
    except (NoCheckpoint, UnrecognizedLayout, EmptyDataset, LocatorMissing, WorkspaceCorrupt, MalformedBackendReply) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except DatasetAgentError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
