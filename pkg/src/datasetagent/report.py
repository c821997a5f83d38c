"""Dataset-level metric report.

The column set depends on the task: classification datasets get CBI, SSIM,
ALR, DSE, SDI and DDC; detection adds IDDE, BQI and OSR; segmentation adds
ESI, ACS and PCB. A metric that cannot be computed from what is on disk is
reported as null with a note saying what is missing (for example human
verdicts for ALR).
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from PIL import Image

from . import metrics as M
from .errors import MetricError
from .formats import (
    decode_semantic_png,
    parse_coco,
    parse_voc,
    parse_yolo,
    voc_to_detections,
    yolo_rows_to_detections,
)
from .geometry import NormalizedBox

BASE_COLUMNS = ["CBI", "SSIM", "ALR", "DSE", "SDI", "DDC"]
DETECTION_COLUMNS = BASE_COLUMNS + ["IDDE", "BQI", "OSR"]
SEGMENTATION_COLUMNS = BASE_COLUMNS + ["ESI", "ACS", "PCB"]

THRESHOLDS: dict[str, tuple[str, float]] = {
    "CBI": ("<", 0.1),
    "SSIM": (">", 0.9),
    "ALR": (">", 0.95),
    "DDC": ("<", 0.1),
    "BQI": (">", 0.9),
    "ACS": (">", 0.85),
    "PCB": (">", 0.8),
}

ALR_MANIFEST = "alr_manifest.tsv"
ALR_VERDICTS = "alr_verdicts.tsv"
BQI_FILE = "bqi_ious.tsv"
ACS_DIR = "masks_reference"


def columns_for(task_type: str) -> list[str]:
    if task_type == "Classification":
        return list(BASE_COLUMNS)
    if task_type == "Detection":
        return list(DETECTION_COLUMNS)
    return list(SEGMENTATION_COLUMNS)


@dataclass
class ImageEntry:
    id: str
    file: str
    width: int
    height: int
    class_name: str | None = None
    source_id: str | None = None
    ssim: float | None = None
    occlusion_level: float | None = None
    boxes: list[tuple[str, NormalizedBox]] = field(default_factory=list)
    mask_classes: list[str] = field(default_factory=list)


@dataclass
class DatasetView:
    root: Path
    task_type: str
    classes: list[str]
    images: list[ImageEntry]
    original_counts: dict[str, int] | None = None
    source: str = "metadata"

    def semantic_path(self, image: ImageEntry) -> Path:
        return self.root / "masks_semantic" / f"{image.id}.png"


def _from_metadata(root: Path, meta: Mapping) -> DatasetView:
    images = []
    for r in meta["images"]:
        images.append(
            ImageEntry(
                id=r["id"],
                file=r["file"],
                width=r["width"],
                height=r["height"],
                class_name=r.get("class"),
                source_id=r.get("source_id"),
                ssim=r.get("ssim"),
                occlusion_level=r.get("occlusion_level"),
                boxes=[(d["class"], NormalizedBox.from_seq(d["box"])) for d in r.get("detections", [])],
                mask_classes=[m["class"] for m in r.get("masks", [])],
            )
        )
    original = meta.get("original", {}).get("per_class_counts") if meta.get("original") else None
    return DatasetView(root, meta["task_type"], list(meta["classes"]), images, original, "metadata")


def _size(path: Path) -> tuple[int, int]:
    with Image.open(path) as img:
        return img.size


def _from_layout(root: Path) -> DatasetView:
    from .spec_intake import AnnotationFormat, inspect_dataset

    meta = inspect_dataset(root)
    images: list[ImageEntry] = []
    if meta.layout is AnnotationFormat.CLASS_DIRS:
        for cls in meta.class_names:
            for p in sorted((root / cls).iterdir()):
                if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"):
                    w, h = _size(p)
                    images.append(ImageEntry(p.stem, f"{cls}/{p.name}", w, h, class_name=cls))
    elif meta.layout is AnnotationFormat.VOC:
        ann_dir = root / ("Annotations" if (root / "Annotations").is_dir() else "annotations_voc")
        img_dir = "JPEGImages" if (root / "JPEGImages").is_dir() else "images"
        for x in sorted(ann_dir.glob("*.xml")):
            parsed = parse_voc(x.read_text())
            dets = voc_to_detections(parsed)
            images.append(
                ImageEntry(x.stem, f"{img_dir}/{parsed['filename']}", parsed["width"], parsed["height"],
                           class_name=dets[0].class_name if dets else None,
                           boxes=[(d.class_name, d.box) for d in dets])
            )
    elif meta.layout is AnnotationFormat.COCO:
        from .spec_intake import _coco_doc

        doc = _coco_doc(root)
        names = {c["id"]: c["name"] for c in doc["categories"]}
        by_image: dict[int, list] = {}
        for a in doc["annotations"]:
            by_image.setdefault(a["image_id"], []).append(a)
        for img in sorted(doc["images"], key=lambda i: i["id"]):
            W, H = img["width"], img["height"]
            anns = by_image.get(img["id"], [])
            boxes = []
            for a in anns:
                x, y, w, h = a["bbox"]
                if w > 0 and h > 0:
                    boxes.append((names[a["category_id"]], NormalizedBox(x / W, y / H, min(1.0, (x + w) / W), min(1.0, (y + h) / H))))
            images.append(
                ImageEntry(img["file_name"].rsplit(".", 1)[0], f"images/{img['file_name']}", W, H,
                           class_name=boxes[0][0] if boxes else None, boxes=boxes,
                           mask_classes=[names[a["category_id"]] for a in anns if "segmentation" in a])
            )
    elif meta.layout is AnnotationFormat.YOLO:
        lab = root / ("labels" if (root / "labels").is_dir() else "labels_yolo")
        for p in sorted((root / "images").iterdir()):
            t = lab / f"{p.stem}.txt"
            rows = parse_yolo(t.read_text()) if t.exists() else []
            dets = yolo_rows_to_detections(rows, meta.class_names)
            w, h = _size(p)
            images.append(ImageEntry(p.stem, f"images/{p.name}", w, h, class_name=dets[0].class_name if dets else None,
                                     boxes=[(d.class_name, d.box) for d in dets]))
    else:
        for p in sorted((root / "images").iterdir()):
            w, h = _size(p)
            images.append(ImageEntry(p.stem, f"images/{p.name}", w, h))
    return DatasetView(root, meta.task_type.value, list(meta.class_names), images, None, meta.layout.value)


def load_dataset(root: str | Path) -> DatasetView:
    """Read ``metadata.json`` when present, otherwise infer the layout."""
    root = Path(root)
    meta_path = root / "metadata.json"
    if meta_path.is_file():
        return _from_metadata(root, json.loads(meta_path.read_text()))
    return _from_layout(root)


@dataclass
class MetricReport:
    task_type: str
    columns: list[str]
    values: dict[str, float | None]
    thresholds: dict[str, str]
    passed: dict[str, bool | None]
    notes: dict[str, str]
    details: dict[str, Any]
    metadata: dict[str, Any]

    def to_dict(self) -> dict:
        return {
            "task_type": self.task_type,
            "columns": self.columns,
            "values": {k: (None if v is None else round(v, 6)) for k, v in self.values.items()},
            "thresholds": self.thresholds,
            "passed": self.passed,
            "notes": self.notes,
            "details": self.details,
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_text(self) -> str:
        rows = [("metric", "value", "target", "status")]
        for c in self.columns:
            v = self.values[c]
            status = {True: "pass", False: "FAIL", None: "-"}[self.passed[c]]
            rows.append((c, "n/a" if v is None else f"{v:.4f}", self.thresholds.get(c, "-"), status))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(r)).rstrip() for r in rows]
        for c in self.columns:
            if c in self.notes:
                lines.append(f"note {c}: {self.notes[c]}")
        return "\n".join(lines) + "\n"


def _class_counts(view: DatasetView) -> dict[str, int]:
    counts = Counter({c: 0 for c in view.classes})
    for img in view.images:
        if view.task_type == "Detection" and img.boxes:
            counts.update(cls for cls, _ in img.boxes if cls in counts)
        elif img.mask_classes and view.task_type == "InstanceSeg":
            counts.update(c for c in img.mask_classes if c in counts)
        elif img.class_name in counts:
            counts[img.class_name] += 1
    return dict(counts)


def _load_pixels(view: DatasetView, img: ImageEntry) -> np.ndarray:
    with Image.open(view.root / img.file) as im:
        return np.asarray(im.convert("RGB"))


def _read_tsv_floats(path: Path) -> list[float]:
    import csv

    with open(path, newline="") as fh:
        return [float(r["iou"]) for r in csv.DictReader(fh, delimiter="\t")]


def build_report(
    view: DatasetView,
    inspections: str | Path | None = None,
    feature_fn: Callable[[np.ndarray], np.ndarray] = M.histogram_features,
    feature_id: str = M.HISTOGRAM_EXTRACTOR_ID,
) -> MetricReport:
    """Compute every applicable metric for ``view``.

    ``inspections`` is a directory of human-inspection results: ``alr_verdicts.tsv``
    (with the ``alr_manifest.tsv`` it answers), ``bqi_ious.tsv`` and
    ``masks_reference/<id>.png`` semantic maps from a second annotator. It
    defaults to the dataset root.
    """
    insp = Path(inspections) if inspections is not None else view.root
    cols = columns_for(view.task_type)
    values: dict[str, float | None] = {}
    notes: dict[str, str] = {}
    details: dict[str, Any] = {}

    def attempt(name: str, fn: Callable[[], float | None], missing: str = "") -> None:
        try:
            v = fn()
        except (MetricError, ValueError, FileNotFoundError) as exc:
            values[name] = None
            notes[name] = str(exc)
            return
        values[name] = None if v is None else float(v)
        if v is None and missing:
            notes[name] = missing

    counts = _class_counts(view)
    details["class_counts"] = counts
    details["image_count"] = len(view.images)
    attempt("CBI", lambda: M.cbi([counts[c] for c in view.classes]))

    ssims = [img.ssim for img in view.images if img.ssim is not None]
    attempt("SSIM", lambda: float(np.mean(ssims)) if ssims else None, "no per-image SSIM recorded (dataset not built by this tool)")

    def alr():
        verdict_path = insp / ALR_VERDICTS
        if not verdict_path.is_file():
            return None
        manifest = []
        with open(insp / ALR_MANIFEST) as fh:
            next(fh)
            for line in fh:
                cols_ = line.rstrip("\n").split("\t")
                manifest.append((cols_[0], cols_[1]))
        return M.alr_ingest(M.read_verdicts(verdict_path), manifest)

    attempt("ALR", alr, f"needs human verdicts: fill the verdict column of {ALR_MANIFEST} and save it as {ALR_VERDICTS}")

    sources = Counter(img.source_id for img in view.images if img.source_id)
    details["source_counts"] = dict(sorted(sources.items()))
    attempt("DSE", lambda: M.dse(list(sources.values())) if sources else None, "no source ids recorded")

    def sdi():
        per_class = []
        for cls in view.classes:
            members = [img for img in view.images if img.class_name == cls]
            if len(members) < 2:
                continue
            per_class.append(M.sdi([feature_fn(_load_pixels(view, img)) for img in members]))
        return float(np.mean(per_class)) if per_class else None

    attempt("SDI", sdi, "needs at least two images in some class")

    def ddc():
        merged = dict(counts)
        if view.original_counts:
            # an expanded dataset is the original plus the emitted images
            merged = {c: counts[c] + view.original_counts.get(c, 0) for c in view.classes}
        total = sum(merged.values())
        if total == 0:
            raise MetricError("dataset is empty")
        p = [merged[c] / total for c in view.classes]
        if view.original_counts:
            orig_total = sum(view.original_counts.values())
            q = [view.original_counts.get(c, 0) / orig_total for c in view.classes]
            details["ddc_reference"] = "original dataset"
        else:
            q = [1.0 / len(view.classes)] * len(view.classes)
            details["ddc_reference"] = "uniform"
        return M.ddc(p, q)

    attempt("DDC", ddc)

    if "IDDE" in cols:
        areas = [b.width * img.width * b.height * img.height for img in view.images for _, b in img.boxes]
        attempt("IDDE", lambda: M.idde(areas) if areas else None, "no instances")
        details["area_buckets"] = dict(Counter(M.area_bucket(a) for a in areas))

        def bqi():
            path = insp / BQI_FILE
            return M.bqi(_read_tsv_floats(path)) if path.is_file() else None

        attempt("BQI", bqi, f"needs inspected IoUs in {BQI_FILE}")
        levels = [img.occlusion_level for img in view.images if img.occlusion_level is not None]
        attempt("OSR", lambda: M.osr(levels) if levels else None, "no occlusion levels recorded")
        details["occlusion_breakdown"] = M.occlusion_breakdown(levels)

    if "ESI" in cols:
        semantic = {img.id: view.semantic_path(img) for img in view.images if view.semantic_path(img).is_file()}

        def esi():
            vals = []
            for img in view.images:
                if img.id not in semantic:
                    continue
                labels = decode_semantic_png(semantic[img.id].read_bytes())
                edges = M.boundary_pixels(labels)
                if edges.any():
                    vals.append(M.esi(M.to_gray(_load_pixels(view, img)) / 255.0, edges))
            return float(np.mean(vals)) if vals else None

        attempt("ESI", esi, "no semantic masks with boundaries")

        def acs():
            ref_dir = insp / ACS_DIR
            if not ref_dir.is_dir():
                return None
            scores = []
            for img in view.images:
                ref = ref_dir / f"{img.id}.png"
                if ref.is_file() and img.id in semantic:
                    a = decode_semantic_png(semantic[img.id].read_bytes()) > 0
                    b = decode_semantic_png(ref.read_bytes()) > 0
                    scores.append(M.acs_dice(a, b))
            return float(np.mean(scores)) if scores else None

        attempt("ACS", acs, f"needs second-annotator masks in {ACS_DIR}/")

        def pcb():
            if not semantic:
                return None
            pixels = np.zeros(len(view.classes) + 1, dtype=np.int64)
            for path in semantic.values():
                labels = decode_semantic_png(path.read_bytes())
                pixels += np.bincount(labels.ravel(), minlength=len(pixels))[: len(pixels)]
            details["pixel_counts"] = {c: int(pixels[i + 1]) for i, c in enumerate(view.classes)}
            return M.pcb(pixels[1:])

        attempt("PCB", pcb, "no semantic masks")

    thresholds = {k: f"{op} {v}" for k, (op, v) in THRESHOLDS.items() if k in cols}
    passed: dict[str, bool | None] = {}
    for c in cols:
        v = values.get(c)
        if c not in THRESHOLDS or v is None:
            passed[c] = None
        else:
            op, t = THRESHOLDS[c]
            passed[c] = v < t if op == "<" else v > t
    metadata = {
        "log_base": {"DSE": "2 (bits)", "DDC": "e (nats)", "IDDE": "e (nats)"},
        "sdi_features": feature_id,
        "ssim_reference": "source image through the same geometric steps, resized bilinearly",
        "esi_intensity_scale": "[0, 1]",
        "pcb_excludes_background": True,
        "source": view.source,
    }
    return MetricReport(view.task_type, cols, {c: values.get(c) for c in cols}, thresholds, passed, notes, details, metadata)
