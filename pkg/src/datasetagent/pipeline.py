"""End-to-end run driver: collect, analyse, optimise, label, finalise.

A run lives in ``<workspace>/<run_id>/``. Every state change is an event in
``run.log``; output files are committed through the workspace (temp write,
commit event, rename), so a run killed at any point resumes to the same
output tree an uninterrupted run produces.

Per-image work runs on a thread pool; results are committed one at a time in
source order so the log, the quota and the outputs never depend on thread
timing.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import shutil
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import metrics as M
from .acquisition import Entry, QuotaState, SourceDescriptor, SourceHandle, open_source, plan_batch
from .analysis import decide, parse_analysis, plan_tools
from .errors import MetricError, NoCheckpoint, RunAborted
from .gateway import Backends, analyze_multimodal
from .labeling import (
    LabelConfig,
    annotate_detection,
    annotate_segmentation,
    assign_class_label,
    dataset_artifacts,
    item_artifacts,
    item_record,
    manifest_tsv,
    mask_problems,
    rasterize,
    seg_variant,
    transform_annotation,
)
from .annotation import AnnotationSet
from .report import _from_metadata, build_report
from .spec_intake import DatasetSpec, TaskKind, TaskType
from .supervision import (
    NO_FAULTS,
    Agent,
    EventLog,
    FailureRecord,
    FaultInjector,
    Level,
    Resolution,
    RunState,
    Workspace,
    categorize,
    diagnose,
    resume_state,
    sha256_bytes,
)
from .templates import render_prompt
from .tools import resize, run_plan

log = logging.getLogger(__name__)

RUN_FILE = "run.json"
GEOMETRIC_OPS = ("crop", "flip_h", "flip_v", "rotate")
SUMMARY_VERB = {TaskKind.BUILD: "built", TaskKind.EXPAND: "expanded"}


@dataclass
class RunConfig:
    """Knobs for one run. Loaded from TOML by :func:`load_config`; see the README."""

    workspace: str = "runs"
    workers: int = 1
    batch_size: int = 16
    seed: int = 0
    overcollect_factor: float = 1.2
    checkpoint_every: int = 64
    checkpoint_interval_s: float = 30.0
    interp: str = "bicubic"
    alr_sample: int = 100
    corpus: str | None = None
    source_id: str | None = None
    label: LabelConfig = field(default_factory=LabelConfig)
    quality: dict[str, Any] = field(default_factory=dict)
    backends: dict[str, dict] = field(default_factory=dict)
    mock: bool = False
    mock_replies: str | None = None

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.overcollect_factor < 1.0:
            raise ValueError("overcollect_factor must be at least 1")
        if self.interp not in ("bilinear", "bicubic"):
            raise ValueError(f"interp must be bilinear or bicubic, got {self.interp!r}")

    def to_dict(self) -> dict:
        return {
            "workers": self.workers,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "overcollect_factor": self.overcollect_factor,
            "checkpoint_every": self.checkpoint_every,
            "checkpoint_interval_s": self.checkpoint_interval_s,
            "interp": self.interp,
            "alr_sample": self.alr_sample,
            "corpus": self.corpus,
            "source_id": self.source_id,
            "label": vars(self.label),
        }


_RUN_KEYS = {
    "workspace", "workers", "batch_size", "seed", "overcollect_factor", "checkpoint_every",
    "checkpoint_interval_s", "interp", "alr_sample", "corpus", "source_id",
}


def config_from_dict(doc: Mapping) -> RunConfig:
    run = dict(doc.get("run", {}))
    unknown = set(run) - _RUN_KEYS
    if unknown:
        raise ValueError(f"unknown [run] keys: {sorted(unknown)}")
    label = LabelConfig(**{k: v for k, v in doc.get("labeling", {}).items()})
    mock = doc.get("mock", {})
    return RunConfig(
        **run,
        label=label,
        quality=dict(doc.get("quality", {})),
        backends={k: dict(v) for k, v in doc.get("backends", {}).items()},
        mock=bool(mock.get("enabled", False)),
        mock_replies=mock.get("replies"),
    )


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        import tomllib
    except ModuleNotFoundError:  # Python 3.10
        import tomli as tomllib
    with open(path, "rb") as fh:
        return config_from_dict(tomllib.load(fh))


def apply_quality(spec: DatasetSpec, overrides: Mapping[str, Any]) -> DatasetSpec:
    if not overrides:
        return spec
    from .spec_intake import QualityConstraints

    doc = {**spec.quality_constraints.to_dict(), **overrides}
    return replace(spec, quality_constraints=QualityConstraints.from_dict(doc))


def make_run_id(spec: DatasetSpec, seed: int, corpus: str | None) -> str:
    body = json.dumps({"spec": spec.to_dict(), "seed": seed, "corpus": corpus}, sort_keys=True)
    return hashlib.sha256(body.encode()).hexdigest()[:12]


# ------------------------------------------------------------------ per item


@dataclass
class ItemResult:
    entry: Entry
    outcome: str  # accepted | rejected | skipped | abort
    class_name: str | None = None
    reason: str = ""
    artifacts: dict[str, bytes] = field(default_factory=dict)
    record: dict | None = None
    diagnoses: list[dict] = field(default_factory=list)
    error: dict | None = None


def reference_image(source: np.ndarray, plan_steps, size: tuple[int, int]) -> np.ndarray:
    """The pre-optimisation counterpart of an output image, for SSIM.

    The source goes through the plan's geometric steps only (so both images
    show the same content) and is resized bilinearly to the output size.
    Colour changes made by the plan therefore count against fidelity.
    """
    ref = run_plan(source, [s for s in plan_steps if s.op in GEOMETRIC_OPS])
    if (ref.shape[1], ref.shape[0]) != tuple(size):
        ref = resize(ref, size, "bilinear")
    return ref


class _Stage:
    """Tracks which stage an item is in, for failure records."""

    def __init__(self):
        self.name = "Collect"


class Run:
    """One pipeline run bound to a workspace directory."""

    def __init__(
        self,
        ws: Workspace,
        spec: DatasetSpec,
        config: RunConfig,
        backends: Backends,
        source: SourceDescriptor,
        meta: Mapping | None = None,
        out=print,
    ):
        self.ws = ws
        self.spec = spec
        self.config = config
        self.backends = backends
        self.source = source
        self.meta = dict(meta) if meta else None
        self.say = out
        self.label_config = replace(config.label, min_confidence=spec.quality_constraints.min_confidence)
        self.log: EventLog | None = None
        self.state = RunState()
        self.handle: SourceHandle | None = None
        self._since_checkpoint = 0
        self._last_checkpoint = time.monotonic()

    # ---------------------------------------------------------- lifecycle
    @property
    def run_id(self) -> str:
        return self.ws.run_id

    def run_doc(self) -> dict:
        return {
            "run_id": self.run_id,
            "spec": self.spec.to_dict(),
            "config": self.config.to_dict(),
            "source": self.source.to_dict(),
            "original": self.meta,
        }

    def start(self) -> None:
        """Create the run directory, or resume when a checkpoint already exists."""
        root = self.ws.root
        if (root / "checkpoint.json").exists() or (root / "checkpoint.json.prev").exists():
            self.resume()
            return
        if root.exists():
            # a previous attempt died before its first checkpoint; nothing in it is committed
            shutil.rmtree(root)
        root.mkdir(parents=True)
        data = (json.dumps(self.run_doc(), indent=1, sort_keys=True) + "\n").encode()
        tmp = root / (RUN_FILE + ".tmp")
        self.ws._write_durable(tmp, data)
        self.ws._rename(tmp, root / RUN_FILE)
        self.state = RunState(targets=self.spec.targets())
        self.ws.write_checkpoint(self.run_id, self.state)
        self.log = self.ws.open_log()
        self._emit(Agent.SUPERVISOR, Level.INFO, "RunStarted", {"targets": self.spec.targets(), "task": self.spec.task_kind.value})

    def resume(self) -> None:
        self.log = self.ws.open_log()
        self.state = resume_state(self.ws, self.log)
        if not self.state.targets:
            self.state.targets = self.spec.targets()
        if self.state.aborted:
            self._emit(Agent.SUPERVISOR, Level.INFO, "RunResumed", {"after": "abort"})
        self.say(f"Supervisor: restored checkpoint, last settled index {self.state.cursor()}")

    def close(self) -> None:
        if self.log is not None:
            self.log.close()

    def _emit(self, agent: Agent, level: Level, kind: str, payload: Mapping) -> int:
        seq = self.log.record(agent, level, kind, payload)
        self.state.apply(self.log.events[-1])
        return seq

    def checkpoint(self) -> None:
        doc = self.ws.write_checkpoint(self.run_id, self.state)
        self._emit(Agent.SUPERVISOR, Level.INFO, "CheckpointSaved", {"cursor": doc["last_committed_index"]})
        self._since_checkpoint = 0
        self._last_checkpoint = time.monotonic()

    # ---------------------------------------------------------- main loop
    def execute(self) -> int:
        """Run to completion and return the number of images accepted by this run."""
        if self.state.finalized:
            self.say(self.summary())
            return self.state.accepted
        self.handle = open_source(self.source)
        try:
            self._loop()
        except KeyboardInterrupt:
            self.checkpoint()
            self.say("Supervisor: interrupted, checkpoint saved; resume with --task resume")
            raise
        self.finalize()
        self.say(self.summary())
        return self.state.accepted

    def _quota(self) -> QuotaState:
        return QuotaState(dict(self.state.targets), self.state.accepted_per_class())

    def _loop(self) -> None:
        workers = self.config.workers
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="item") as pool:
            while True:
                pending = self.state.pending()
                if not pending:
                    if self._quota().satisfied():
                        break
                    self.handle.seek(self.state.position)
                    if self.handle.exhausted:
                        break
                    pending = self._plan()
                    if not pending:
                        continue
                entries = [self.handle.entries[i] for i in pending]
                results = list(pool.map(self.process, entries))
                for result in results:
                    self._settle(result)
                if (
                    self._since_checkpoint >= self.config.checkpoint_every
                    or time.monotonic() - self._last_checkpoint >= self.config.checkpoint_interval_s
                ):
                    self.checkpoint()

    def _plan(self) -> list[int]:
        passed: list[Entry] = []
        self.handle.on_skip = lambda entry, reason, exc: passed.append(entry)
        chosen = plan_batch(self.handle, self._quota(), self.config.batch_size, self.config.overcollect_factor)
        self.handle.on_skip = None
        for entry in passed:
            self._emit(Agent.PROCESS, Level.INFO, "ItemSkipped", {"index": entry.index, "id": entry.id, "reason": "quota-full"})
        indices = [e.index for e in chosen]
        self._emit(Agent.PROCESS, Level.INFO, "BatchPlanned", {"indices": indices, "position": self.handle.position})
        if indices:
            self.say(f"Process: collecting images {indices[0]}..{indices[-1]}")
        return indices

    # ---------------------------------------------------------- per item work
    def process(self, entry: Entry) -> ItemResult:
        """Decode, analyse, optimise and label one entry. Never raises ``Exception``."""
        attempts: Counter = Counter()
        diagnoses: list[dict] = []
        while True:
            stage = _Stage()
            try:
                result = self._process_once(entry, stage)
                result.diagnoses = diagnoses
                return result
            except Exception as exc:
                category = categorize(exc)
                attempts[category] += 1
                failure = FailureRecord(category, attempts[category], str(exc), stage.name, error_type=type(exc).__name__)
                resolution = diagnose(failure, self.backends.text)
                diagnoses.append(
                    {
                        "index": entry.index,
                        "category": category.value,
                        "stage": stage.name,
                        "attempt": attempts[category],
                        "resolution": resolution.value,
                        "message": str(exc),
                    }
                )
                if resolution in (Resolution.RETRY, Resolution.RESTART):
                    continue
                error = {"index": entry.index, "id": entry.id, "stage": stage.name, "category": category.value, "message": str(exc)}
                outcome = "abort" if resolution is Resolution.ABORT else "skipped"
                return ItemResult(entry, outcome, reason=category.value, diagnoses=diagnoses, error=error)

    def _process_once(self, entry: Entry, stage: _Stage) -> ItemResult:
        spec = self.spec
        stage.name = "Collect"
        image = self.handle.load(entry)

        stage.name = "Analyze"
        prompt = render_prompt(
            "image_analysis",
            target=entry.class_hint or " | ".join(spec.class_names()),
            task_type=spec.task_type.value,
            classes=", ".join(spec.class_names()),
            schema="(see the image analysis schema)",
        )
        analysis = parse_analysis(analyze_multimodal(self.backends.multimodal, image, prompt), image.pixels)
        decision = decide(analysis, spec)
        if not decision.accept:
            return ItemResult(entry, "rejected", reason=decision.reason)
        class_name = assign_class_label(analysis, spec)

        stage.name = "Optimize"
        plan = plan_tools(analysis, spec, interp=self.config.interp)
        pixels = run_plan(image.pixels, plan.steps)

        stage.name = "Label"
        file_name = f"{image.id}.png"
        if spec.task_type is TaskType.CLASSIFICATION:
            ann = AnnotationSet(image.id, image.width, image.height, class_label=class_name)
        elif spec.task_type is TaskType.DETECTION:
            ann = annotate_detection(image, spec, self.backends.grounding, self.label_config)
        else:
            ann = annotate_segmentation(image, spec, self.backends.segmentation, seg_variant(spec.task_type), self.label_config)
        ann = transform_annotation(ann, plan.steps)
        ann = replace(ann, class_label=class_name, file_name=file_name)
        variant = seg_variant(spec.task_type)
        if variant is not None:
            ann = rasterize(ann, spec, variant)
            if not self.label_config.keep_negatives and not ann.masks.masks:
                return ItemResult(entry, "rejected", class_name, reason="unlabeled")
            problems = mask_problems(ann, self.label_config)
            if problems:
                return ItemResult(entry, "rejected", class_name, reason=f"mask:{problems[0].rule}")
        elif spec.task_type is TaskType.DETECTION and not ann.detections and not self.label_config.keep_negatives:
            return ItemResult(entry, "rejected", class_name, reason="unlabeled")

        h, w = pixels.shape[:2]
        try:
            ssim = M.ssim(reference_image(image.pixels, plan.steps, (w, h)), pixels)
        except MetricError:
            ssim = None
        record = item_record(
            ann,
            spec,
            source_id=image.source_id,
            origin=os.path.basename(image.origin_uri),
            alignment=decision.alignment,
            risk=decision.risk,
            confidence=decision.confidence,
            occlusion_level=float(analysis.occlusion_level),
            ssim=ssim,
            plan=plan.ops(),
        )
        return ItemResult(entry, "accepted", class_name, artifacts=item_artifacts(ann, pixels, spec), record=record)

    # ---------------------------------------------------------- committing
    def _settle(self, result: ItemResult) -> None:
        entry = result.entry
        if result.error is not None:
            self._settle_failure(result)
            return
        for d in result.diagnoses:
            self._emit(Agent.SUPERVISOR, Level.WARN, "Diagnosis", d)
        base = {"index": entry.index, "id": entry.id}
        if result.outcome == "rejected":
            self._emit(Agent.PROCESS, Level.INFO, "ItemRejected", {**base, "class": result.class_name, "reason": result.reason})
            return
        cls = result.class_name
        if self.state.accepted_per_class().get(cls, 0) >= self.state.targets.get(cls, 0):
            self._emit(Agent.PROCESS, Level.INFO, "ItemRejected", {**base, "class": cls, "reason": "quota-full"})
            return
        hashes = self.ws.stage_artifacts(result.artifacts)
        self._emit(Agent.LABEL, Level.INFO, "ItemCommitted", {**base, "class": cls, "item": result.record, "artifacts": hashes})
        self.ws.publish(hashes)
        self._since_checkpoint += 1

    def _settle_failure(self, result: ItemResult) -> None:
        entry = result.entry
        err = result.error
        self._emit(Agent.SUPERVISOR, Level.ERROR, "Error", err)
        self.say(f"Error: image #{entry.index} ({entry.id}) failed in {err['stage']}: {err['category']}")
        self.checkpoint()
        for d in result.diagnoses:
            self._emit(Agent.SUPERVISOR, Level.WARN, "Diagnosis", d)
        if result.outcome == "abort":
            self._emit(Agent.SUPERVISOR, Level.ERROR, "RunAborted", {"index": entry.index, "reason": err["category"]})
            self.ws.write_checkpoint(self.run_id, self.state)
            raise RunAborted(f"image #{entry.index}: {err['message']}")
        self._emit(Agent.PROCESS, Level.INFO, "ItemSkipped", {"index": entry.index, "id": entry.id, "reason": result.reason})
        self._emit(
            Agent.SUPERVISOR,
            Level.INFO,
            "Recovered",
            {"restored_cursor": entry.index - 1, "skipped": entry.index, "next_index": entry.index + 1},
        )
        self.say(f"Supervisor: skipped image #{entry.index}, restored from checkpoint #{entry.index - 1}, continuing with #{entry.index + 1}")

    # ---------------------------------------------------------- finalising
    def finalize(self) -> None:
        records = [self.state.items[i] for i in sorted(self.state.items)]
        extra: dict[str, Any] = {"seed": self.config.seed}
        if self.meta is not None:
            extra["original"] = self.meta
            extra["added"] = len(records)
        files = dataset_artifacts(records, self.spec, self.ws.out, extra)
        view = _from_metadata(self.ws.out, json.loads(files["metadata.json"]))
        report = build_report(view)
        files["report.json"] = report.to_json().encode()
        files["report.txt"] = report.to_text().encode()
        items = [(r["id"], r["class"] or "") for r in records]
        sample = M.alr_manifest(items, min(self.config.alr_sample, len(items)), self.config.seed)
        buf = io.StringIO()
        buf.write("image_id\tlabel\tverdict\n")
        for image_id, label in sample:
            buf.write(f"{image_id}\t{label}\t\n")
        files["alr_manifest.tsv"] = buf.getvalue().encode()
        hashes = {**self.state.committed, **{rel: sha256_bytes(data) for rel, data in files.items()}}
        files["manifest.tsv"] = manifest_tsv(hashes)
        staged = self.ws.stage_artifacts(files)
        self._emit(Agent.SUPERVISOR, Level.INFO, "Finalized", {"accepted": len(records), "artifacts": staged})
        self.ws.publish(staged)
        self.ws.write_checkpoint(self.run_id, self.state)
        self.report = report

    def summary(self) -> str:
        verb = SUMMARY_VERB[self.spec.task_kind]
        return f"DatasetAgent: successfully {verb} {self.spec.name} with {self.state.accepted} high-quality images."


# ------------------------------------------------------------------ helpers


def open_run(
    workspace: str | Path,
    spec: DatasetSpec,
    config: RunConfig,
    backends: Backends,
    source: SourceDescriptor,
    run_id: str | None = None,
    meta: Mapping | None = None,
    faults: FaultInjector = NO_FAULTS,
    out=print,
) -> Run:
    rid = run_id or make_run_id(spec, config.seed, source.locator)
    ws = Workspace(Path(workspace) / rid, faults)
    return Run(ws, spec, config, backends, source, meta, out)


def load_run(workspace: str | Path, run_id: str, config: RunConfig, backends: Backends, faults: FaultInjector = NO_FAULTS, out=print) -> Run:
    """Rebuild a :class:`Run` from ``run.json``; raises NoCheckpoint for unknown runs."""
    root = Path(workspace) / run_id
    run_file = root / RUN_FILE
    if not run_file.is_file():
        raise NoCheckpoint(f"no run {run_id!r} in {workspace}")
    doc = json.loads(run_file.read_text())
    saved = doc["config"]
    config = replace(
        config,
        seed=saved["seed"],
        batch_size=saved["batch_size"],
        overcollect_factor=saved["overcollect_factor"],
        interp=saved["interp"],
        alr_sample=saved["alr_sample"],
        label=LabelConfig(**saved["label"]),
    )
    return Run(
        Workspace(root, faults),
        DatasetSpec.from_dict(doc["spec"]),
        config,
        backends,
        SourceDescriptor.from_dict(doc["source"]),
        doc.get("original"),
        out,
    )


def output_hash(out_dir: str | Path) -> str:
    """SHA-256 over every (relative path, file hash) pair in an output tree."""
    out_dir = Path(out_dir)
    h = hashlib.sha256()
    for p in sorted(out_dir.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(out_dir).as_posix().encode() + b"\0")
            h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


__all__ = [
    "RunConfig",
    "Run",
    "ItemResult",
    "config_from_dict",
    "load_config",
    "apply_quality",
    "make_run_id",
    "open_run",
    "load_run",
    "output_hash",
    "reference_image",
]
