"""Event log, checkpoints, the artifact commit protocol, failure diagnosis and scheduling.

Run state is a pure fold over the event log; a checkpoint is a snapshot of
that fold taken at a quiescent point, so resuming means "load the checkpoint,
fold the events appended after it, repair half-finished commits".
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import LogUnwritable, NoCheckpoint, WorkspaceCorrupt

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.json"
RUN_LOG = "run.log"


class InjectedCrash(BaseException):
    """Simulated process death raised by :class:`FaultInjector`.

    Derives from BaseException so that ordinary ``except Exception`` handlers
    cannot swallow it, just as they could not survive a real kill.
    """


class FaultInjector:
    """Crash after the ``kill_after``-th durable operation (1-based).

    With ``partial_append`` set, a crash that lands on a log append writes
    only the first half of the line first, leaving a torn record behind.
    """

    def __init__(self, kill_after: int | None = None, partial_append: bool = False):
        self.kill_after = kill_after
        self.partial_append = partial_append
        self.ops = 0

    def due(self) -> bool:
        return self.kill_after is not None and self.ops + 1 == self.kill_after

    def tick(self, what: str) -> None:
        self.ops += 1
        if self.kill_after is not None and self.ops == self.kill_after:
            raise InjectedCrash(f"injected crash after durable op {self.ops} ({what})")


NO_FAULTS = FaultInjector()


def _fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ------------------------------------------------------------------ events


class Agent(str, enum.Enum):
    DEMAND = "Demand"
    PROCESS = "Process"
    LABEL = "Label"
    SUPERVISOR = "Supervisor"


class Level(str, enum.Enum):
    INFO = "Info"
    WARN = "Warn"
    ERROR = "Error"


@dataclass(frozen=True)
class Event:
    seq: int
    time: float
    agent: Agent
    level: Level
    kind: str
    payload: dict

    def to_json(self) -> str:
        return json.dumps(
            {
                "seq": self.seq,
                "time": round(self.time, 6),
                "agent": self.agent.value,
                "level": self.level.value,
                "kind": self.kind,
                "payload": self.payload,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "Event":
        d = json.loads(line)
        return cls(d["seq"], d["time"], Agent(d["agent"]), Level(d["level"]), d["kind"], d["payload"])


class EventLog:
    """Append-only NDJSON log; every append is fsynced before returning.

    A torn final line (from a crash mid-append) is dropped when the log is opened.
    """

    def __init__(self, path: str | Path, faults: FaultInjector = NO_FAULTS):
        self.path = Path(path)
        self.faults = faults
        self.events: list[Event] = []
        if self.path.exists():
            raw = self.path.read_bytes()
            keep = raw.rfind(b"\n") + 1
            if keep < len(raw):
                log.warning("dropping torn record at the end of %s", self.path)
                with open(self.path, "r+b") as fh:
                    fh.truncate(keep)
                    fh.flush()
                    os.fsync(fh.fileno())
            for line in raw[:keep].decode().splitlines():
                if line.strip():
                    self.events.append(Event.from_json(line))
        try:
            self._fh = open(self.path, "ab")
        except OSError as exc:
            raise LogUnwritable(str(exc)) from exc

    @property
    def next_seq(self) -> int:
        return self.events[-1].seq + 1 if self.events else 1

    def record(self, agent: Agent | str, level: Level | str, kind: str, payload: Mapping | None = None) -> int:
        event = Event(self.next_seq, time.time(), Agent(agent), Level(level), kind, dict(payload or {}))
        line = (event.to_json() + "\n").encode()
        try:
            if self.faults.partial_append and self.faults.due():
                self._fh.write(line[: len(line) // 2])
                self._fh.flush()
                os.fsync(self._fh.fileno())
                self.faults.tick(f"append {kind} (torn)")
            self._fh.write(line)
            self._fh.flush()
            os.fsync(self._fh.fileno())
        except OSError as exc:
            raise LogUnwritable(str(exc)) from exc
        self.events.append(event)
        self.faults.tick(f"append {kind}")
        return event.seq

    def close(self) -> None:
        self._fh.close()


def record_event(log_: EventLog, agent, level, kind: str, payload: Mapping | None = None) -> int:
    return log_.record(agent, level, kind, payload)


# --------------------------------------------------------------- run state


class Stage(str, enum.Enum):
    COLLECT = "Collect"
    ANALYZE = "Analyze"
    OPTIMIZE = "Optimize"
    LABEL = "Label"
    FINALIZE = "Finalize"


@dataclass
class RunState:
    """Everything needed to continue a run, derived from events alone."""

    targets: dict[str, int] = field(default_factory=dict)
    position: int = 0
    batch: list[int] = field(default_factory=list)
    outcomes: dict[int, str] = field(default_factory=dict)
    classes: dict[int, str] = field(default_factory=dict)
    items: dict[int, dict] = field(default_factory=dict)
    committed: dict[str, str] = field(default_factory=dict)
    finalized: bool = False
    aborted: bool = False
    last_seq: int = 0

    # derived views -------------------------------------------------
    def count(self, outcome: str) -> int:
        return sum(1 for o in self.outcomes.values() if o == outcome)

    @property
    def accepted(self) -> int:
        return self.count("accepted")

    @property
    def rejected(self) -> int:
        return self.count("rejected")

    @property
    def skipped(self) -> int:
        return self.count("skipped")

    def accepted_per_class(self) -> dict[str, int]:
        out = {c: 0 for c in self.targets}
        for i, o in self.outcomes.items():
            if o == "accepted":
                out[self.classes[i]] = out.get(self.classes[i], 0) + 1
        return out

    def pending(self) -> list[int]:
        return [i for i in self.batch if i not in self.outcomes]

    def cursor(self) -> int:
        """Highest index such that it and every lower index are settled (-1 when none)."""
        i = -1
        while (i + 1) in self.outcomes:
            i += 1
        return i

    def manifest_hash(self) -> str:
        body = "".join(f"{k}\t{v}\n" for k, v in sorted(self.committed.items()))
        return sha256_bytes(body.encode())

    def stage(self) -> Stage:
        if self.finalized:
            return Stage.FINALIZE
        if self.pending():
            return Stage.ANALYZE
        return Stage.COLLECT

    # folding -------------------------------------------------------
    def apply(self, event: Event) -> None:
        p = event.payload
        k = event.kind
        if k == "RunStarted":
            self.targets = dict(p.get("targets", {}))
        elif k == "BatchPlanned":
            self.batch = list(p["indices"])
            self.position = int(p["position"])
        elif k == "ItemSkipped":
            self.outcomes[int(p["index"])] = "skipped"
        elif k == "ItemRejected":
            self.outcomes[int(p["index"])] = "rejected"
            if p.get("class") is not None:
                self.classes[int(p["index"])] = p["class"]
        elif k == "ItemCommitted":
            i = int(p["index"])
            self.outcomes[i] = "accepted"
            self.classes[i] = p["class"]
            self.items[i] = p["item"]
            self.committed.update(p["artifacts"])
        elif k == "Finalized":
            self.committed.update(p["artifacts"])
            self.finalized = True
        elif k == "RunAborted":
            self.aborted = True
        elif k == "RunResumed":
            self.aborted = False
        self.last_seq = event.seq

    def to_dict(self) -> dict:
        return {
            "targets": self.targets,
            "position": self.position,
            "batch": self.batch,
            "outcomes": {str(k): v for k, v in sorted(self.outcomes.items())},
            "classes": {str(k): v for k, v in sorted(self.classes.items())},
            "items": {str(k): v for k, v in sorted(self.items.items())},
            "committed": dict(sorted(self.committed.items())),
            "finalized": self.finalized,
            "aborted": self.aborted,
            "last_seq": self.last_seq,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunState":
        return cls(
            targets=dict(d["targets"]),
            position=int(d["position"]),
            batch=list(d["batch"]),
            outcomes={int(k): v for k, v in d["outcomes"].items()},
            classes={int(k): v for k, v in d["classes"].items()},
            items={int(k): v for k, v in d["items"].items()},
            committed=dict(d["committed"]),
            finalized=bool(d["finalized"]),
            aborted=bool(d.get("aborted", False)),
            last_seq=int(d["last_seq"]),
        )


def fold(events: Iterable[Event], start: RunState | None = None) -> RunState:
    state = start if start is not None else RunState()
    for e in events:
        if e.seq > state.last_seq:
            state.apply(e)
    return state


# ------------------------------------------------------------- workspace


class Workspace:
    """One run directory: ``run.json``, ``run.log``, ``checkpoint.json`` and ``out/``."""

    def __init__(self, root: str | Path, faults: FaultInjector = NO_FAULTS):
        self.root = Path(root)
        self.out = self.root / "out"
        self.faults = faults
        self._stat_cache: dict[str, tuple[int, int, str]] = {}

    @property
    def run_id(self) -> str:
        return self.root.name

    @property
    def checkpoint_path(self) -> Path:
        return self.root / CHECKPOINT

    def open_log(self) -> EventLog:
        self.root.mkdir(parents=True, exist_ok=True)
        return EventLog(self.root / RUN_LOG, self.faults)

    # durable file primitives ----------------------------------------
    def _write_durable(self, path: Path, data: bytes) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        self.faults.tick(f"write {path.name}")

    def _rename(self, src: Path, dst: Path) -> None:
        os.replace(src, dst)
        _fsync_dir(dst.parent)
        self.faults.tick(f"rename {dst.name}")

    def stage_artifacts(self, artifacts: Mapping[str, bytes]) -> dict[str, str]:
        """Write every artifact to ``<name>.tmp`` and return {relpath: sha256}."""
        hashes = {}
        for rel in sorted(artifacts):
            data = artifacts[rel]
            self._write_durable(self.out / (rel + ".tmp"), data)
            hashes[rel] = sha256_bytes(data)
        return hashes

    def publish(self, relpaths: Iterable[str]) -> None:
        for rel in sorted(relpaths):
            self._rename(self.out / (rel + ".tmp"), self.out / rel)

    def commit(self, log_: EventLog, kind: str, artifacts: Mapping[str, bytes], payload: Mapping, agent=Agent.LABEL) -> int:
        """Temp write + fsync, then the commit event, then rename into place."""
        hashes = self.stage_artifacts(artifacts)
        seq = log_.record(agent, Level.INFO, kind, {**payload, "artifacts": hashes})
        self.publish(hashes)
        return seq

    def repair(self, state: RunState) -> list[str]:
        """Finish renames of committed artifacts and delete temp files nobody committed."""
        actions = []
        if not self.out.exists():
            return actions
        for tmp in sorted(self.out.rglob("*.tmp")):
            rel = tmp.relative_to(self.out).as_posix()[: -len(".tmp")]
            if rel in state.committed and sha256_file(tmp) == state.committed[rel]:
                os.replace(tmp, self.out / rel)
                actions.append(f"rolled forward {rel}")
            else:
                tmp.unlink()
                actions.append(f"removed {rel}.tmp")
        return actions

    # hashing ----------------------------------------------------------
    def _cached_hash(self, rel: str) -> str | None:
        path = self.out / rel
        try:
            st = path.stat()
        except FileNotFoundError:
            return None
        hit = self._stat_cache.get(rel)
        if hit and hit[0] == st.st_size and hit[1] == st.st_mtime_ns:
            return hit[2]
        digest = sha256_file(path)
        self._stat_cache[rel] = (st.st_size, st.st_mtime_ns, digest)
        return digest

    def verify(self, committed: Mapping[str, str], full: bool = False) -> None:
        if full:
            self._stat_cache.clear()
        bad = [rel for rel, sha in sorted(committed.items()) if self._cached_hash(rel) != sha]
        if bad:
            raise WorkspaceCorrupt(f"{len(bad)} committed file(s) missing or modified, e.g. {bad[0]}")

    # checkpoints --------------------------------------------------------
    def write_checkpoint(self, run_id: str, state: RunState) -> dict:
        """Verify committed files, then atomically replace the checkpoint (old copy kept as ``.prev``)."""
        self.verify(state.committed)
        doc = {
            "run_id": run_id,
            "stage": state.stage().value,
            "last_committed_index": state.cursor(),
            "quota": {"targets": state.targets, "accepted": state.accepted_per_class()},
            "manifest_hash": state.manifest_hash(),
            "state": state.to_dict(),
        }
        data = (json.dumps(doc, sort_keys=True, indent=1) + "\n").encode()
        path = self.checkpoint_path
        if path.exists() and path.read_bytes() == data:
            return doc
        tmp = path.with_name(CHECKPOINT + ".tmp")
        self._write_durable(tmp, data)
        if path.exists():
            os.replace(path, path.with_name(CHECKPOINT + ".prev"))
        self._rename(tmp, path)
        return doc

    def read_checkpoint(self) -> dict:
        for name in (CHECKPOINT, CHECKPOINT + ".prev"):
            p = self.root / name
            if p.exists():
                try:
                    return json.loads(p.read_text())
                except ValueError:
                    log.warning("unreadable checkpoint %s, trying the previous one", p)
        raise NoCheckpoint(f"no checkpoint in {self.root}")


def resume_state(ws: Workspace, log_: EventLog) -> RunState:
    """Load the latest checkpoint, replay newer events, repair the output tree, verify it."""
    doc = ws.read_checkpoint()
    state = fold(log_.events, RunState.from_dict(doc["state"]))
    for action in ws.repair(state):
        log.info("resume: %s", action)
    ws.verify(state.committed, full=True)
    return state


# ------------------------------------------------------------- diagnosis


class FailureCategory(str, enum.Enum):
    DECODE_FAILURE = "DecodeFailure"
    BACKEND_UNAVAILABLE = "BackendUnavailable"
    MALFORMED_BACKEND_REPLY = "MalformedBackendReply"
    TOOL_ERROR = "ToolError"
    SCHEMA_VIOLATION = "SchemaViolation"
    CRASH = "Crash"
    OTHER = "Other"


class Resolution(str, enum.Enum):
    SKIP = "Skip"
    RETRY = "Retry"
    RESTART = "Restart"
    ABORT = "Abort"


@dataclass(frozen=True)
class FailureRecord:
    category: FailureCategory
    attempts: int = 1
    message: str = ""
    stage: str = ""
    event_seq: int | None = None
    error_type: str = ""


MAX_BACKEND_RETRIES = 3


def diagnose(failure: FailureRecord, backend=None) -> Resolution:
    """Rule table first; the text backend is only consulted for uncategorised failures.

    ``attempts`` counts failures so far for the same item, including this one.
    """
    c = failure.category
    if c is FailureCategory.DECODE_FAILURE:
        return Resolution.SKIP
    if c is FailureCategory.BACKEND_UNAVAILABLE:
        return Resolution.RETRY if failure.attempts <= MAX_BACKEND_RETRIES else Resolution.ABORT
    if c in (FailureCategory.MALFORMED_BACKEND_REPLY, FailureCategory.SCHEMA_VIOLATION):
        return Resolution.RETRY if failure.attempts <= 1 else Resolution.SKIP
    if c is FailureCategory.TOOL_ERROR:
        return Resolution.RESTART if failure.attempts <= 1 else Resolution.SKIP
    if c is FailureCategory.CRASH:
        return Resolution.RESTART
    if backend is None:
        return Resolution.SKIP
    from .gateway import complete_text
    from .templates import render_prompt

    prompt = render_prompt(
        "diagnosis",
        stage=failure.stage or "unknown",
        error_type=failure.error_type or c.value,
        message=failure.message,
        attempts=failure.attempts,
    )
    try:
        reply = complete_text(backend, prompt)
    except Exception as exc:  # diagnosis is advisory; never let it fail the run
        log.warning("diagnosis backend failed: %s", exc)
        return Resolution.SKIP
    words = reply.strip().split()
    word = words[0].strip(".,:;!\"'").capitalize() if words else ""
    try:
        return Resolution(word)
    except ValueError:
        return Resolution.SKIP


def categorize(exc: BaseException) -> FailureCategory:
    from .errors import (
        BackendUnavailable,
        DecodeFailure,
        MalformedBackendReply,
        NotADocument,
        SchemaViolation,
        ToolError,
    )

    if isinstance(exc, InjectedCrash):
        return FailureCategory.CRASH
    if isinstance(exc, DecodeFailure):
        return FailureCategory.DECODE_FAILURE
    if isinstance(exc, BackendUnavailable):
        return FailureCategory.BACKEND_UNAVAILABLE
    if isinstance(exc, (MalformedBackendReply, NotADocument)):
        return FailureCategory.MALFORMED_BACKEND_REPLY
    if isinstance(exc, SchemaViolation):
        return FailureCategory.SCHEMA_VIOLATION
    if isinstance(exc, ToolError):
        return FailureCategory.TOOL_ERROR
    return FailureCategory.OTHER


def diagnosis_reply(prompt: str) -> str | None:
    """Offline text-model answer for diagnosis prompts: always the conservative Skip."""
    from .templates import between

    if between(prompt, "DIAGNOSIS") is None:
        return None
    return "Skip"


# ------------------------------------------------------------- scheduling


def schedule(queues: Mapping[str, int] | list[int], worker_budget: int) -> dict | list:
    """Split ``worker_budget`` across stages in proportion to queue depth.

    Largest-remainder rounding; every non-empty queue gets at least one worker
    when the budget allows. With fewer workers than non-empty queues, the
    deepest queues are served first (ties by stage order), which is the
    round-robin order for a budget of one.
    """
    if worker_budget < 1:
        raise ValueError("worker budget must be at least 1")
    as_list = not isinstance(queues, Mapping)
    names = list(range(len(queues))) if as_list else list(queues)
    depth = {n: max(0, int(queues[n])) for n in names}
    active = [n for n in names if depth[n] > 0]
    alloc = {n: 0 for n in names}
    if active:
        if worker_budget < len(active):
            order = sorted(active, key=lambda n: (-depth[n], names.index(n)))
            for n in order[:worker_budget]:
                alloc[n] = 1
        else:
            total = sum(depth[n] for n in active)
            exact = {n: worker_budget * depth[n] / total for n in active}
            for n in active:
                alloc[n] = max(1, int(exact[n]))
            used = sum(alloc.values())
            if used > worker_budget:
                # floors plus minimums overshot: take back from the largest allocations
                for n in sorted(active, key=lambda n: (-alloc[n], names.index(n))):
                    while used > worker_budget and alloc[n] > 1:
                        alloc[n] -= 1
                        used -= 1
            rest = worker_budget - used
            order = sorted(active, key=lambda n: (-(exact[n] - int(exact[n])), names.index(n)))
            for j in range(rest):
                alloc[order[j % len(order)]] += 1
    return [alloc[n] for n in names] if as_list else alloc
