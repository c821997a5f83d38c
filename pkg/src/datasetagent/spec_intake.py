"""Turn a natural-language demand into a validated DatasetSpec.

The text backend is asked for a JSON extraction that must validate against
``schemas/demand.schema.json``. One repair round is allowed. Missing required
fields come back as a :class:`ClarificationRequest` instead of guesses. In
Expand mode the class list, resolution and formats are inherited from the
existing dataset on disk.
"""

from __future__ import annotations

import enum
import json
import re
import statistics
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import jsonschema
import numpy as np
from PIL import Image

from .acquisition import IMAGE_SUFFIXES, SourceDescriptor
from .errors import EmptyDataset, IrrelevantDemand, MalformedBackendReply, UnrecognizedLayout
from .gateway import ModelHandle, complete_text
from .templates import between, render_prompt
from .validation import Violation


class TaskKind(str, enum.Enum):
    BUILD = "Build"
    EXPAND = "Expand"


class TaskType(str, enum.Enum):
    CLASSIFICATION = "Classification"
    DETECTION = "Detection"
    SEMANTIC_SEG = "SemanticSeg"
    INSTANCE_SEG = "InstanceSeg"
    PANOPTIC_SEG = "PanopticSeg"

    @property
    def is_segmentation(self) -> bool:
        return self in (TaskType.SEMANTIC_SEG, TaskType.INSTANCE_SEG, TaskType.PANOPTIC_SEG)


class AnnotationFormat(str, enum.Enum):
    CLASS_DIRS = "ClassDirs"
    YOLO = "YOLO"
    VOC = "VOC"
    COCO = "COCO"
    MASK_PNG = "MaskPNG"


DEFAULT_FORMATS = {
    TaskType.CLASSIFICATION: {AnnotationFormat.CLASS_DIRS},
    TaskType.DETECTION: {AnnotationFormat.YOLO, AnnotationFormat.VOC, AnnotationFormat.COCO},
    TaskType.SEMANTIC_SEG: {AnnotationFormat.MASK_PNG},
    TaskType.INSTANCE_SEG: {AnnotationFormat.MASK_PNG, AnnotationFormat.COCO},
    TaskType.PANOPTIC_SEG: {AnnotationFormat.MASK_PNG},
}


@dataclass(frozen=True)
class ClassDef:
    name: str
    target_count: int = 0
    synonyms: tuple[str, ...] = ()
    is_thing: bool = True

    def keywords(self) -> list[str]:
        return [self.name, *self.synonyms]


@dataclass(frozen=True)
class QualityConstraints:
    min_resolution: tuple[int, int] = (1, 1)
    max_risk_score: float = 0.5
    min_alignment_score: float = 0.5
    min_confidence: float = 0.5

    def to_dict(self) -> dict:
        return {
            "min_resolution": list(self.min_resolution),
            "max_risk_score": self.max_risk_score,
            "min_alignment_score": self.min_alignment_score,
            "min_confidence": self.min_confidence,
        }

    @classmethod
    def from_dict(cls, doc: Mapping | None) -> "QualityConstraints":
        doc = doc or {}
        base = cls()
        return cls(
            tuple(doc.get("min_resolution", base.min_resolution)),
            float(doc.get("max_risk_score", base.max_risk_score)),
            float(doc.get("min_alignment_score", base.min_alignment_score)),
            float(doc.get("min_confidence", base.min_confidence)),
        )


@dataclass(frozen=True)
class DatasetSpec:
    task_kind: TaskKind
    task_type: TaskType
    classes: tuple[ClassDef, ...]
    per_class_target: int
    annotation_formats: frozenset[AnnotationFormat] = frozenset()
    target_resolution: tuple[int, int] | None = None
    source: SourceDescriptor | None = None
    quality_constraints: QualityConstraints = QualityConstraints()
    context_docs: tuple[str, ...] = ()
    name: str = "dataset"
    dataset_root: str | None = None

    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    def class_index(self) -> dict[str, int]:
        return {c.name: i for i, c in enumerate(self.classes)}

    def targets(self) -> dict[str, int]:
        return {c.name: c.target_count for c in self.classes}

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "task_kind": self.task_kind.value,
            "task_type": self.task_type.value,
            "classes": [
                {"name": c.name, "target_count": c.target_count, "synonyms": list(c.synonyms), "is_thing": c.is_thing}
                for c in self.classes
            ],
            "per_class_target": self.per_class_target,
            "annotation_formats": sorted(f.value for f in self.annotation_formats),
            "target_resolution": list(self.target_resolution) if self.target_resolution else None,
            "source": self.source.to_dict() if self.source else None,
            "quality_constraints": self.quality_constraints.to_dict(),
            "context_docs": list(self.context_docs),
            "dataset_root": self.dataset_root,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "DatasetSpec":
        res = doc.get("target_resolution")
        return cls(
            task_kind=TaskKind(doc["task_kind"]),
            task_type=TaskType(doc["task_type"]),
            classes=tuple(
                ClassDef(c["name"], int(c.get("target_count", 0)), tuple(c.get("synonyms", ())), bool(c.get("is_thing", True)))
                for c in doc["classes"]
            ),
            per_class_target=int(doc["per_class_target"]),
            annotation_formats=frozenset(AnnotationFormat(f) for f in doc.get("annotation_formats", ())),
            target_resolution=tuple(res) if res else None,
            source=SourceDescriptor.from_dict(doc["source"]) if doc.get("source") else None,
            quality_constraints=QualityConstraints.from_dict(doc.get("quality_constraints")),
            context_docs=tuple(doc.get("context_docs", ())),
            name=doc.get("name", "dataset"),
            dataset_root=doc.get("dataset_root"),
        )


def validate_spec(spec: DatasetSpec) -> list[Violation]:
    out: list[Violation] = []
    if not spec.classes:
        out.append(Violation("classes", "non-empty"))
    names = [c.name.strip().casefold() for c in spec.classes]
    if any(not n for n in names):
        out.append(Violation("classes", "empty-name"))
    dupes = sorted(n for n, k in Counter(names).items() if k > 1 and n)
    if dupes:
        out.append(Violation("classes", "uniqueness", ", ".join(dupes)))
    if any(c.target_count < 0 for c in spec.classes):
        out.append(Violation("classes", "negative-target"))
    if spec.per_class_target < 1:
        out.append(Violation("per_class_target", "minimum", str(spec.per_class_target)))
    if spec.task_kind is TaskKind.EXPAND and not spec.dataset_root:
        out.append(Violation("source", "missing-root"))
    formats = set(spec.annotation_formats)
    if spec.task_type is TaskType.CLASSIFICATION and not formats <= {AnnotationFormat.CLASS_DIRS}:
        out.append(Violation("annotation_formats", "classification-formats"))
    if spec.task_type.is_segmentation and AnnotationFormat.MASK_PNG not in formats:
        out.append(Violation("annotation_formats", "segmentation-needs-maskpng"))
    if spec.target_resolution is not None and min(spec.target_resolution) < 1:
        out.append(Violation("target_resolution", "positive"))
    qc = spec.quality_constraints
    if min(qc.min_resolution) < 1:
        out.append(Violation("quality_constraints.min_resolution", "positive"))
    for name in ("max_risk_score", "min_alignment_score", "min_confidence"):
        if not 0.0 <= getattr(qc, name) <= 1.0:
            out.append(Violation(f"quality_constraints.{name}", "fraction"))
    return out


# ------------------------------------------------------------------ demand parsing


@dataclass(frozen=True)
class ClarificationRequest:
    missing: tuple[str, ...]
    questions: tuple[str, ...]
    violations: tuple[Violation, ...] = ()


QUESTIONS = {
    "task_type": "Which task is the dataset for: classification, detection, or semantic/instance/panoptic segmentation?",
    "classes": "Which classes should the dataset contain? Give a comma-separated list.",
    "per_class_target": "How many images per class should be collected?",
    "dataset_root": "Where is the existing dataset to expand (a directory path)?",
}


@lru_cache(maxsize=None)
def demand_schema() -> dict:
    return json.loads(resources.files("datasetagent").joinpath("schemas/demand.schema.json").read_text())


def _extract_json(reply: str) -> Any:
    text = reply.strip()
    fenced = re.search(r"```(?:json)?\s*(.*?)```", text, re.S)
    if fenced:
        text = fenced.group(1).strip()
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end < start:
        raise ValueError("no JSON object in reply")
    return json.loads(text[start : end + 1])


def _check_reply(reply: str) -> tuple[dict | None, list[str]]:
    try:
        doc = _extract_json(reply)
    except ValueError as exc:
        return None, [str(exc)]
    validator = jsonschema.Draft202012Validator(demand_schema())
    errors = [
        f"{'.'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}"
        for e in sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    ]
    return (doc if not errors else None), errors


def extract_demand(raw: str, backend: ModelHandle, context_docs: Sequence[str] = (), max_repairs: int = 1) -> dict:
    """Ask the backend for a schema-valid extraction of ``raw``."""
    schema_text = json.dumps(demand_schema(), indent=1)
    context = "\n\n".join(context_docs) if context_docs else "(none)"
    prompt = render_prompt("demand_extraction", schema=schema_text, context=context, demand=raw)
    reply = complete_text(backend, prompt)
    doc, errors = _check_reply(reply)
    repairs = 0
    while doc is None and repairs < max_repairs:
        repairs += 1
        prompt = render_prompt("demand_repair", errors="\n".join(errors), demand=raw)
        doc, errors = _check_reply(complete_text(backend, prompt))
    if doc is None:
        raise MalformedBackendReply("; ".join(errors[:5]))
    return doc


def parse_demand(
    raw: str,
    backend: ModelHandle,
    *,
    dataset_root: str | Path | None = None,
    source: SourceDescriptor | None = None,
    context_docs: Sequence[str] = (),
) -> DatasetSpec | ClarificationRequest:
    """Parse a demand; Expand demands with a reachable root are resolved against it."""
    if not raw or not raw.strip():
        raise ValueError("demand text is empty")
    doc = extract_demand(raw, backend, context_docs)
    if not doc["relevant"]:
        raise IrrelevantDemand(doc.get("reason") or "demand is not about building an image dataset")

    kind = TaskKind(doc["task_kind"] or "Build")
    root = str(dataset_root) if dataset_root is not None else doc.get("dataset_root")
    missing = []
    if kind is TaskKind.EXPAND:
        if not root:
            missing.append("dataset_root")
    else:
        if doc["task_type"] is None:
            missing.append("task_type")
        if not doc["classes"]:
            missing.append("classes")
    if doc["per_class_target"] is None:
        missing.append("per_class_target")
    if missing:
        return ClarificationRequest(tuple(missing), tuple(QUESTIONS[m] for m in missing))

    target = int(doc["per_class_target"])
    classes = tuple(
        ClassDef(
            c["name"].strip(),
            int(c.get("target_count", target)),
            tuple(c.get("synonyms", ())),
            bool(c.get("is_thing", True)),
        )
        for c in doc["classes"] or ()
    )
    task_type = TaskType(doc["task_type"]) if doc["task_type"] else TaskType.CLASSIFICATION
    formats = frozenset(AnnotationFormat(f) for f in doc.get("annotation_formats") or ()) or frozenset(
        DEFAULT_FORMATS[task_type]
    )
    res = doc.get("target_resolution")
    spec = DatasetSpec(
        task_kind=kind,
        task_type=task_type,
        classes=classes,
        per_class_target=target,
        annotation_formats=formats,
        target_resolution=tuple(res) if res else None,
        source=source,
        quality_constraints=QualityConstraints.from_dict(doc.get("quality_constraints")),
        context_docs=tuple(context_docs),
        name=doc.get("dataset_name") or (Path(root).name if root else "dataset"),
        dataset_root=root,
    )
    if kind is TaskKind.EXPAND:
        spec, _ = resolve_expand_target(spec, root, user_stated=doc)
    violations = validate_spec(spec)
    if violations:
        fields = tuple(dict.fromkeys(v.field for v in violations))
        return ClarificationRequest(
            fields, tuple(QUESTIONS.get(f, f"Please correct {f}.") for f in fields), tuple(violations)
        )
    return spec


def clarify(raw: str, answers: Mapping[str, str]) -> str:
    """Fold clarification answers into the demand text as ``field: answer`` lines."""
    lines = [raw.rstrip()]
    lines += [f"{k}: {v}" for k, v in answers.items()]
    return "\n".join(lines)


def clarification_loop(raw: str, backend: ModelHandle, ask, max_rounds: int = 5, **kwargs) -> DatasetSpec:
    """Re-parse with the answers from ``ask(request) -> {field: answer}`` until a spec results."""
    text = raw
    for _ in range(max_rounds):
        result = parse_demand(text, backend, **kwargs)
        if isinstance(result, DatasetSpec):
            return result
        text = clarify(text, ask(result))
    raise MalformedBackendReply(f"demand still incomplete after {max_rounds} clarification rounds")


# ---------------------------------------------------- keyword extraction (offline)

_FIELD_LINE = re.compile(r"^\s*(task_type|task_kind|classes|per_class_target|dataset_root|target_resolution|formats)\s*:\s*(.+)$", re.I | re.M)
_TYPE_WORDS = [
    ("panoptic", "PanopticSeg"),
    ("instance seg", "InstanceSeg"),
    ("instance mask", "InstanceSeg"),
    ("semantic", "SemanticSeg"),
    ("segment", "SemanticSeg"),
    ("detect", "Detection"),
    ("bounding box", "Detection"),
    ("classif", "Classification"),
]
_RELEVANT = ("dataset", "image", "class", "label", "detect", "segment", "classif", "annotat", "photo", "picture")


def _split_names(text: str) -> list[str]:
    parts = re.split(r",|\band\b|;", text)
    return [p.strip(" .") for p in parts if p.strip(" .")]


def keyword_extraction(demand: str) -> dict:
    """Deterministic rule-based extraction used by the offline text backend.

    It understands explicit ``field: value`` lines (the clarification format)
    plus a few common phrasings; anything else is left null.
    """
    text = demand
    low = text.lower()
    explicit = {m.group(1).lower(): m.group(2).strip() for m in _FIELD_LINE.finditer(text)}
    body = _FIELD_LINE.sub("", text)
    low_body = body.lower()

    doc: dict[str, Any] = {
        "relevant": any(w in low for w in _RELEVANT),
        "task_kind": None,
        "task_type": None,
        "classes": None,
        "per_class_target": None,
    }
    if not doc["relevant"]:
        doc["reason"] = "no dataset vocabulary in the request"
        return doc

    kind = explicit.get("task_kind", "")
    if kind:
        doc["task_kind"] = "Expand" if kind.lower().startswith("exp") else "Build"
    else:
        doc["task_kind"] = "Expand" if re.search(r"\b(expand|extend|grow|enlarge)\b", low_body) else "Build"

    type_text = explicit.get("task_type", low_body).lower()
    for word, value in _TYPE_WORDS:
        if word in type_text:
            doc["task_type"] = value
            break

    if "classes" in explicit:
        doc["classes"] = [{"name": n} for n in _split_names(explicit["classes"])]
    else:
        m = re.search(r"(?:classes|categories|labels)?\s*:\s*([^\n]+)", body)
        if not (m and "," in m.group(1)):
            # "... of cat, dog and bird with 20 images per class"
            m = re.search(r"\b(?:of|for|classes|categories)\s+([A-Za-z][\w \-]*(?:\s*(?:,|\band\b)\s*[A-Za-z][\w\-]*)+)", body)
        if m and ("," in m.group(1) or " and " in m.group(1)):
            names = [n for n in _split_names(m.group(1)) if not re.search(r"\d", n)]
            if names:
                doc["classes"] = [{"name": n} for n in names]

    count_text = explicit.get("per_class_target")
    if count_text and re.search(r"\d+", count_text):
        doc["per_class_target"] = int(re.search(r"\d+", count_text).group())
    else:
        m = re.search(r"(\d+)\s*(?:new\s+)?(?:images?|pictures?|photos?|samples?)\s*(?:per|each|for each|/)\s*(?:class|label|category)", low_body)
        m = m or re.search(r"(?:per|each)\s*(?:class|label|category)\D{0,12}?(\d+)", low_body)
        if m:
            doc["per_class_target"] = max(1, int(m.group(1)))

    res = explicit.get("target_resolution") or ""
    m = re.search(r"(\d+)\s*[x×]\s*(\d+)", res or low_body)
    if m:
        doc["target_resolution"] = [int(m.group(1)), int(m.group(2))]

    fmt_text = (explicit.get("formats") or low_body).lower()
    formats = [f for f in ("YOLO", "VOC", "COCO") if f.lower() in fmt_text]
    if formats:
        doc["annotation_formats"] = formats

    if "dataset_root" in explicit:
        doc["dataset_root"] = explicit["dataset_root"]
    m = re.search(r"\b(?:expand|extend|grow|enlarge)\s+(?:the\s+)?([A-Za-z][\w\-]*)", body)
    if m and doc["task_kind"] == "Expand":
        doc["dataset_name"] = m.group(1)
    return doc


def keyword_reply(prompt: str) -> str | None:
    """Offline text-model reply for a demand-extraction prompt, or None for other prompts."""
    demand = between(prompt, "DEMAND")
    if demand is None:
        return None
    return json.dumps(keyword_extraction(demand), sort_keys=True)


# --------------------------------------------------------------- Expand mode

RESERVED_DIRS = {
    "images", "jpegimages", "annotations", "labels", "labels_yolo", "annotations_voc",
    "masks", "masks_semantic", "masks_instance", "masks_panoptic", "segmentationclass",
    "segmentationobject", "imagesets",
}


@dataclass
class ExistingDatasetMeta:
    root: str
    layout: AnnotationFormat
    formats: frozenset[AnnotationFormat]
    class_names: list[str]
    per_class_counts: dict[str, int]
    size_stats: dict[str, Any]
    image_count: int
    task_type: TaskType
    conflicts: list[Violation] = field(default_factory=list)

    def class_distribution(self) -> list[float]:
        total = sum(self.per_class_counts.values())
        return [self.per_class_counts.get(c, 0) / total if total else 0.0 for c in self.class_names]


def _images_in(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _sizes(paths: Sequence[Path]) -> list[tuple[int, int]]:
    out = []
    for p in paths:
        try:
            with Image.open(p) as img:
                out.append(img.size)
        except OSError:
            continue
    return out


def _first_dir(root: Path, *names: str) -> Path | None:
    for n in names:
        if (root / n).is_dir():
            return root / n
    return None


def _read_class_file(root: Path, *dirs: Path | None) -> list[str] | None:
    for d in (root, *[d for d in dirs if d is not None]):
        for name in ("classes.txt", "names.txt"):
            p = d / name
            if p.is_file():
                return [line.strip() for line in p.read_text().splitlines() if line.strip()]
    return None


def _detect_class_dirs(root: Path):
    dirs = sorted(d for d in root.iterdir() if d.is_dir() and d.name.lower() not in RESERVED_DIRS and not d.name.startswith("."))
    if not dirs or any(d.name.lower() in RESERVED_DIRS for d in root.iterdir() if d.is_dir()):
        return None
    files = {d.name: _images_in(d) for d in dirs}
    if not any(files.values()):
        return None
    return {
        "classes": [d.name for d in dirs],
        "counts": {k: len(v) for k, v in files.items()},
        "sizes": _sizes([p for v in files.values() for p in v]),
        "task": TaskType.CLASSIFICATION,
    }


def _detect_voc(root: Path):
    img_dir = _first_dir(root, "JPEGImages", "images")
    ann_dir = _first_dir(root, "Annotations", "annotations_voc")
    if img_dir is None or ann_dir is None:
        return None
    xmls = sorted(ann_dir.glob("*.xml"))
    if not xmls:
        return None
    counts: Counter[str] = Counter()
    sizes = []
    for x in xmls:
        try:
            tree = ET.parse(x).getroot()
        except ET.ParseError:
            continue
        size = tree.find("size")
        if size is not None:
            sizes.append((int(size.findtext("width", "0")), int(size.findtext("height", "0"))))
        for obj in tree.iter("object"):
            counts[obj.findtext("name", "").strip()] += 1
    if not sizes:
        sizes = _sizes(_images_in(img_dir))
    classes = _read_class_file(root, ann_dir) or sorted(counts)
    return {"classes": classes, "counts": dict(counts), "sizes": sizes, "task": TaskType.DETECTION, "n": len(xmls)}


def _coco_doc(root: Path) -> dict | None:
    candidates = sorted(root.glob("*.json"))
    ann = root / "annotations"
    if ann.is_dir():
        candidates += sorted(ann.glob("*.json"))
    for c in candidates:
        try:
            doc = json.loads(c.read_text())
        except (OSError, ValueError):
            continue
        if isinstance(doc, dict) and {"images", "annotations", "categories"} <= set(doc):
            return doc
    return None


def _detect_coco(root: Path):
    doc = _coco_doc(root)
    if doc is None:
        return None
    cats = sorted(doc["categories"], key=lambda c: c["id"])
    names = {c["id"]: c["name"] for c in cats}
    counts: Counter[str] = Counter(names[a["category_id"]] for a in doc["annotations"] if a["category_id"] in names)
    seg = any("segmentation" in a for a in doc["annotations"])
    return {
        "classes": [c["name"] for c in cats],
        "counts": dict(counts),
        "sizes": [(int(i["width"]), int(i["height"])) for i in doc["images"]],
        "task": TaskType.INSTANCE_SEG if seg else TaskType.DETECTION,
        "n": len(doc["images"]),
    }


def _detect_yolo(root: Path):
    img_dir = _first_dir(root, "images")
    lab_dir = _first_dir(root, "labels", "labels_yolo")
    if img_dir is None or lab_dir is None:
        return None
    txts = sorted(p for p in lab_dir.glob("*.txt") if p.name not in ("classes.txt", "names.txt"))
    if not txts:
        return None
    ids: Counter[int] = Counter()
    for t in txts:
        for line in t.read_text().splitlines():
            if line.strip():
                ids[int(line.split()[0])] += 1
    names = _read_class_file(root, lab_dir) or [f"class_{i}" for i in range(max(ids, default=-1) + 1)]
    counts = {names[i]: n for i, n in ids.items() if i < len(names)}
    return {"classes": names, "counts": counts, "sizes": _sizes(_images_in(img_dir)), "task": TaskType.DETECTION, "n": len(txts)}


def _detect_masks(root: Path):
    img_dir = _first_dir(root, "images", "JPEGImages")
    mask_dir = _first_dir(root, "masks_semantic", "SegmentationClass", "masks")
    if img_dir is None or mask_dir is None:
        return None
    pngs = sorted(mask_dir.glob("*.png"))
    if not pngs:
        return None
    names = _read_class_file(root, mask_dir)
    counts: Counter[int] = Counter()
    for p in pngs:
        with Image.open(p) as img:
            values = np.unique(np.asarray(img))
        counts.update(int(v) for v in values)
    if names is None:
        names = [f"class_{i}" for i in range(max(counts, default=0) + 1)]
    task = TaskType.SEMANTIC_SEG
    if (root / "masks_panoptic").is_dir():
        task = TaskType.PANOPTIC_SEG
    elif (root / "masks_instance").is_dir() or (root / "SegmentationObject").is_dir():
        task = TaskType.INSTANCE_SEG
    return {
        "classes": names,
        "counts": {names[i]: n for i, n in counts.items() if i < len(names)},
        "sizes": _sizes(_images_in(img_dir)),
        "task": task,
        "n": len(pngs),
    }


_DETECTORS = [
    (AnnotationFormat.CLASS_DIRS, _detect_class_dirs),
    (AnnotationFormat.VOC, _detect_voc),
    (AnnotationFormat.COCO, _detect_coco),
    (AnnotationFormat.YOLO, _detect_yolo),
    (AnnotationFormat.MASK_PNG, _detect_masks),
]


def _modal_size(sizes: Sequence[tuple[int, int]]) -> tuple[int, int]:
    counts = Counter(sizes)
    return min(counts, key=lambda s: (-counts[s], s))


def inspect_dataset(root: str | Path) -> ExistingDatasetMeta:
    """Detect the layout of an existing dataset and collect its statistics."""
    root = Path(root)
    if not root.is_dir():
        raise UnrecognizedLayout(f"{root} is not a directory")
    matches = [(fmt, found) for fmt, detect in _DETECTORS if (found := detect(root)) is not None]
    if not matches:
        if not any(p.is_file() for p in root.rglob("*")):
            raise EmptyDataset(f"{root} holds no files")
        raise UnrecognizedLayout(str(root))
    layout, first = matches[0]
    sizes = first["sizes"]
    n = first.get("n", sum(first["counts"].values()))
    if n == 0 or not sizes:
        raise EmptyDataset(str(root))
    widths = [s[0] for s in sizes]
    heights = [s[1] for s in sizes]
    stats = {
        "count": len(sizes),
        "min": [min(widths), min(heights)],
        "max": [max(widths), max(heights)],
        "median": [statistics.median(widths), statistics.median(heights)],
        "mode": list(_modal_size(sizes)),
    }
    counts = {c: int(first["counts"].get(c, 0)) for c in first["classes"]}
    return ExistingDatasetMeta(
        root=str(root),
        layout=layout,
        formats=frozenset(fmt for fmt, _ in matches),
        class_names=list(first["classes"]),
        per_class_counts=counts,
        size_stats=stats,
        image_count=n,
        task_type=first["task"],
    )


def resolve_expand_target(
    spec: DatasetSpec, root: str | Path, user_stated: Mapping | None = None
) -> tuple[DatasetSpec, ExistingDatasetMeta]:
    """Inherit classes, resolution, formats and task type from the dataset at ``root``.

    User-stated values that disagree with the dataset are recorded as conflict
    violations in ``meta.conflicts``; the dataset wins.
    """
    if spec.task_kind is not TaskKind.EXPAND:
        raise ValueError("resolve_expand_target needs an Expand spec")
    meta = inspect_dataset(root)
    stated = user_stated or {}
    by_name = {c.name.casefold(): c for c in spec.classes}
    classes = tuple(
        ClassDef(
            name,
            spec.per_class_target,
            by_name[name.casefold()].synonyms if name.casefold() in by_name else (),
            by_name[name.casefold()].is_thing if name.casefold() in by_name else True,
        )
        for name in meta.class_names
    )
    if spec.classes and {c.name.casefold() for c in spec.classes} != {n.casefold() for n in meta.class_names}:
        meta.conflicts.append(
            Violation("classes", "conflicts-with-dataset", f"demand names {len(spec.classes)}, dataset has {len(meta.class_names)}")
        )
    resolution = tuple(meta.size_stats["mode"])
    if stated.get("target_resolution") and tuple(stated["target_resolution"]) != resolution:
        meta.conflicts.append(Violation("target_resolution", "conflicts-with-dataset"))
    if stated.get("task_type") and TaskType(stated["task_type"]) is not meta.task_type:
        meta.conflicts.append(Violation("task_type", "conflicts-with-dataset"))
    formats = set(meta.formats)
    if meta.task_type.is_segmentation:
        formats.add(AnnotationFormat.MASK_PNG)
    new = replace(
        spec,
        task_type=meta.task_type,
        classes=classes,
        target_resolution=resolution,
        annotation_formats=frozenset(formats),
        dataset_root=str(root),
    )
    return new, meta
