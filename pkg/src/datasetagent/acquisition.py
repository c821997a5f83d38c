"""Candidate image sources and the per-class quota controller."""

from __future__ import annotations

import copy
import enum
import io
import math
import time
import urllib.request
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeFailure, LocatorMissing, UnknownClass

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp")
DEFAULT_OVERCOLLECT = 1.2


class SourceKind(str, enum.Enum):
    LOCAL_DIR = "LocalDir"
    URL_LIST = "UrlList"
    CORPUS_MANIFEST = "CorpusManifest"


@dataclass(frozen=True)
class SourceDescriptor:
    kind: SourceKind
    locator: str
    source_id: str = "local"
    politeness_delay_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "locator": self.locator,
            "source_id": self.source_id,
            "politeness_delay_s": self.politeness_delay_s,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "SourceDescriptor":
        return cls(
            SourceKind(doc["kind"]),
            str(doc["locator"]),
            str(doc.get("source_id", "local")),
            float(doc.get("politeness_delay_s", 0.0)),
        )

    @classmethod
    def infer(cls, locator: str | Path, source_id: str | None = None) -> "SourceDescriptor":
        """Directory -> LocalDir, ``*.tsv`` -> CorpusManifest, any other file -> UrlList."""
        path = Path(locator)
        if path.is_dir():
            kind = SourceKind.LOCAL_DIR
        elif path.suffix.lower() == ".tsv":
            kind = SourceKind.CORPUS_MANIFEST
        else:
            kind = SourceKind.URL_LIST
        return cls(kind, str(path), source_id or path.stem or "local")


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray
    source_id: str
    origin_uri: str
    acquired_at: float = 0.0
    class_hint: str | None = None
    index: int = -1

    def __post_init__(self):
        px = self.pixels
        if px.dtype != np.uint8 or px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"pixels must be uint8 HxWx{{1,3}}, got {px.dtype} {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("empty image")

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])


def decode_image(data: bytes, name: str = "<bytes>") -> np.ndarray:
    """Decode JPEG/PNG/BMP bytes to an RGB uint8 array; raise DecodeFailure otherwise."""
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            rgb = img.convert("RGB")
    except (UnidentifiedImageError, OSError, ValueError, SyntaxError) as exc:
        raise DecodeFailure(f"{name}: {exc}") from exc
    return np.asarray(rgb, dtype=np.uint8).copy()


@dataclass(frozen=True)
class Entry:
    """One addressable item of a source, before decoding."""

    index: int
    id: str
    uri: str
    source_id: str
    class_hint: str | None = None


def _read_uri(uri: str, delay: float) -> bytes:
    if uri.startswith(("http://", "https://")):
        if delay > 0:
            time.sleep(delay)
        try:
            with urllib.request.urlopen(uri, timeout=30) as resp:
                return resp.read()
        except OSError as exc:
            raise DecodeFailure(f"{uri}: {exc}") from exc
    path = uri[len("file://") :] if uri.startswith("file://") else uri
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DecodeFailure(f"{uri}: {exc}") from exc


SkipHook = Callable[[Entry, str, Exception | None], None]


class SourceHandle:
    """Single-consumer cursor over a source's entries in deterministic order."""

    def __init__(self, desc: SourceDescriptor, entries: Sequence[Entry], on_skip: SkipHook | None = None):
        self.desc = desc
        self.entries = list(entries)
        self.position = 0
        self.on_skip = on_skip
        self.consumed = 0
        self.skipped = 0

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def exhausted(self) -> bool:
        return self.position >= len(self.entries)

    def seek(self, position: int) -> None:
        self.position = max(0, min(position, len(self.entries)))

    def _skip(self, entry: Entry, reason: str, exc: Exception | None = None) -> None:
        self.skipped += 1
        if self.on_skip is not None:
            self.on_skip(entry, reason, exc)

    def load(self, entry: Entry) -> ImageRecord:
        data = _read_uri(entry.uri, self.desc.politeness_delay_s)
        return ImageRecord(
            id=entry.id,
            pixels=decode_image(data, entry.uri),
            source_id=entry.source_id,
            origin_uri=entry.uri,
            acquired_at=time.time(),
            class_hint=entry.class_hint,
            index=entry.index,
        )

    def fetch(self, index: int) -> ImageRecord:
        """Decode one entry by index (raises DecodeFailure); used when replaying a batch."""
        return self.load(self.entries[index])

    def __iter__(self):
        while not self.exhausted:
            entry = self.entries[self.position]
            self.position += 1
            self.consumed += 1
            try:
                yield self.load(entry)
            except DecodeFailure as exc:
                self._skip(entry, "decode", exc)


def _local_entries(root: Path, source_id: str) -> list[Entry]:
    files = sorted(
        p.relative_to(root).as_posix()
        for p in root.rglob("*")
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )
    out = []
    for i, rel in enumerate(files):
        parts = rel.split("/")
        hint = parts[0] if len(parts) > 1 else None
        out.append(Entry(i, rel.rsplit(".", 1)[0].replace("/", "__"), str(root / rel), source_id, hint))
    return out


def _manifest_entries(path: Path, default_source: str) -> list[Entry]:
    out = []
    base = path.parent
    for line in path.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) < 2:
            raise LocatorMissing(f"{path}: manifest line needs at least id and path: {line!r}")
        rid, loc = cols[0].strip(), cols[1].strip()
        source_id = cols[2].strip() if len(cols) > 2 and cols[2].strip() else default_source
        hint = cols[3].strip() if len(cols) > 3 and cols[3].strip() else None
        if not loc.startswith(("http://", "https://", "file://")) and not Path(loc).is_absolute():
            loc = str(base / loc)
        out.append(Entry(len(out), rid, loc, source_id, hint))
    return out


def _url_entries(path: Path, source_id: str) -> list[Entry]:
    out = []
    for line in path.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        hint = cols[1].strip() if len(cols) > 1 and cols[1].strip() else None
        out.append(Entry(len(out), f"u{len(out):06d}", cols[0].strip(), source_id, hint))
    return out


def open_source(desc: SourceDescriptor, on_skip: SkipHook | None = None) -> SourceHandle:
    path = Path(desc.locator)
    if not path.exists():
        raise LocatorMissing(str(path))
    if desc.kind is SourceKind.LOCAL_DIR:
        if not path.is_dir():
            raise LocatorMissing(f"{path} is not a directory")
        entries = _local_entries(path, desc.source_id)
    elif desc.kind is SourceKind.CORPUS_MANIFEST:
        entries = _manifest_entries(path, desc.source_id)
    else:
        entries = _url_entries(path, desc.source_id)
    return SourceHandle(desc, entries, on_skip)


# -------------------------------------------------------------------- quota


class Outcome(str, enum.Enum):
    ACCEPTED = "Accepted"
    REJECTED = "Rejected"


@dataclass
class QuotaState:
    targets: dict[str, int]
    accepted: dict[str, int] = field(default_factory=dict)
    rejected: dict[str, int] = field(default_factory=dict)
    in_flight: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for counter in (self.accepted, self.rejected, self.in_flight):
            for name in self.targets:
                counter.setdefault(name, 0)

    @classmethod
    def for_targets(cls, targets: Mapping[str, int]) -> "QuotaState":
        return cls(dict(targets))

    def remaining(self, class_name: str) -> int:
        self._check(class_name)
        return max(0, self.targets[class_name] - self.accepted[class_name])

    def remaining_all(self) -> dict[str, int]:
        return {c: self.remaining(c) for c in self.targets}

    def satisfied(self) -> bool:
        return all(r == 0 for r in self.remaining_all().values())

    def _check(self, class_name: str) -> None:
        if class_name not in self.targets:
            raise UnknownClass(class_name)

    def to_dict(self) -> dict:
        return {
            "targets": dict(self.targets),
            "accepted": dict(self.accepted),
            "rejected": dict(self.rejected),
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "QuotaState":
        return cls(dict(doc["targets"]), dict(doc["accepted"]), dict(doc["rejected"]))


def update_quota(quota: QuotaState, class_name: str, outcome: Outcome | str) -> QuotaState:
    """Return a new state with one outcome recorded for ``class_name``."""
    quota._check(class_name)
    outcome = Outcome(outcome)
    new = copy.deepcopy(quota)
    if outcome is Outcome.ACCEPTED:
        new.accepted[class_name] += 1
    else:
        new.rejected[class_name] += 1
    if new.in_flight[class_name] > 0:
        new.in_flight[class_name] -= 1
    return new


def plan_batch(
    handle: SourceHandle,
    quota: QuotaState,
    batch_size: int,
    overcollect_factor: float = DEFAULT_OVERCOLLECT,
) -> list[Entry]:
    """Select up to ``batch_size`` entries without decoding them.

    An entry whose class hint names a full class is passed over (and reported
    to the skip hook as "quota-full"). When a class already has
    ``ceil(remaining * overcollect_factor)`` images in flight, the batch ends
    before that entry so it is reconsidered once outcomes are known.
    """
    return [e for e, _ in _take(handle, quota, batch_size, overcollect_factor, decode=False)]


def next_batch(
    handle: SourceHandle,
    quota: QuotaState,
    batch_size: int,
    overcollect_factor: float = DEFAULT_OVERCOLLECT,
) -> list[ImageRecord]:
    """Up to ``batch_size`` decodable records under the same steering as :func:`plan_batch`.

    Undecodable entries are reported to the skip hook and do not count toward the batch.
    """
    return [r for _, r in _take(handle, quota, batch_size, overcollect_factor, decode=True)]


def _take(handle, quota, batch_size, overcollect_factor, decode):
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    out = []
    fetched: Counter[str] = Counter()
    while len(out) < batch_size and not handle.exhausted:
        entry = handle.entries[handle.position]
        hint = entry.class_hint
        if hint is not None and hint in quota.targets:
            rem = quota.remaining(hint)
            if rem == 0:
                handle.position += 1
                handle.consumed += 1
                handle._skip(entry, "quota-full")
                continue
            cap = math.ceil(rem * overcollect_factor)
            if fetched[hint] + quota.in_flight[hint] >= cap:
                break
        handle.position += 1
        handle.consumed += 1
        record = None
        if decode:
            try:
                record = handle.load(entry)
            except DecodeFailure as exc:
                handle._skip(entry, "decode", exc)
                continue
        out.append((entry, record))
        if hint is not None:
            fetched[hint] += 1
    return out
