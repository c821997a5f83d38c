"""Turn accepted images into dataset entries and emit every output format.

Grounding and segmentation run on the original image; the resulting boxes
and masks are then carried through the geometric steps of the image's tool
plan so that they line up with the optimised pixels.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from .analysis import ImageAnalysis, match_class
from .annotation import AnnotationSet, Detection, InstanceMask, SegmentationResult
from .errors import NoMatchingClass
from .formats import (
    decode_instance_png,
    emit_coco,
    emit_instance_pngs,
    emit_panoptic_png,
    emit_semantic_png,
    emit_voc,
    emit_yolo,
    encode_png,
)
from .gateway import ModelHandle, PromptSpec, ground, segment
from .geometry import NormalizedBox, iou, reframe
from .tools import ToolStep, resize_nearest, validate_mask
from .validation import Violation

if TYPE_CHECKING:
    from .spec_intake import DatasetSpec


class SegVariant(str, enum.Enum):
    SEMANTIC = "Semantic"
    INSTANCE = "Instance"
    PANOPTIC = "Panoptic"


@dataclass(frozen=True)
class LabelConfig:
    min_confidence: float = 0.5
    requery_floor: float = 0.3
    dedupe_iou: float = 0.9
    keep_negatives: bool = False
    hole_max: int = 16
    jag_ratio: float = 4.0


def assign_class_label(analysis: ImageAnalysis, spec: "DatasetSpec") -> str:
    """Canonical spec class for the analysed target category (synonyms map to the name)."""
    cls = match_class(analysis.target_category, spec)
    if cls is None:
        raise NoMatchingClass(analysis.target_category)
    return cls.name


def filter_by_confidence(detections: Sequence[Detection], threshold: float) -> list[Detection]:
    """Keep detections with confidence >= threshold, preserving order."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    return [d for d in detections if d.confidence >= threshold]


def dedupe(detections: Sequence[Detection], iou_threshold: float = 0.9) -> list[Detection]:
    """Greedy suppression: a box overlapping a kept box with IoU > threshold is dropped.

    Candidates are visited by descending confidence (ties keep input order), so
    the higher-confidence duplicate survives. Suppression ignores class.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].confidence)
    kept: list[Detection] = []
    for i in order:
        d = detections[i]
        if all(iou(d.box, k.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def class_prompt(cls) -> PromptSpec:
    return PromptSpec("text", " . ".join(cls.keywords()))


def _canonical(name: str, spec: "DatasetSpec") -> str | None:
    cls = match_class(name, spec)
    return cls.name if cls is not None else None


def annotate_detection(image, spec: "DatasetSpec", grounder: ModelHandle, config: LabelConfig = LabelConfig()) -> AnnotationSet:
    """Boxes for every spec class on ``image`` (original coordinates).

    One text prompt per class; detections scoring in [requery_floor, min_confidence)
    get a single box-prompt re-query before the confidence gate is applied.
    """
    merged: list[Detection] = []
    for cls in spec.classes:
        for det in ground(grounder, image, [class_prompt(cls)]).detections:
            name = _canonical(det.class_name, spec)
            if name is None:
                continue
            det = replace(det, class_name=name)
            if config.requery_floor <= det.confidence < config.min_confidence:
                better = [
                    d
                    for d in ground(grounder, image, [PromptSpec("box", det.box)]).detections
                    if _canonical(d.class_name, spec) == name
                ]
                if better:
                    det = replace(better[0], class_name=name)
            merged.append(det)
    kept = dedupe(filter_by_confidence(merged, config.min_confidence), config.dedupe_iou)
    return AnnotationSet(image.id, image.width, image.height, detections=kept)


def annotate_segmentation(
    image,
    spec: "DatasetSpec",
    segmenter: ModelHandle,
    variant: SegVariant,
    config: LabelConfig = LabelConfig(),
) -> AnnotationSet:
    """Instance masks for every spec class (original coordinates), renumbered 1..n.

    The semantic and panoptic maps are rasterised later, after the masks have
    been carried through the tool plan (see :func:`rasterize`).
    """
    found: list[InstanceMask] = []
    for cls in spec.classes:
        for m in segment(segmenter, image, [class_prompt(cls)]).masks:
            name = _canonical(m.class_name, spec)
            if name is None or m.confidence < config.min_confidence:
                continue
            found.append(InstanceMask(name, m.instance_id, m.mask, m.confidence))
    order = spec.class_index()
    found.sort(key=lambda m: (order[m.class_name], m.instance_id))
    masks = [InstanceMask(m.class_name, i, m.mask, m.confidence) for i, m in enumerate(found, 1)]
    return AnnotationSet(image.id, image.width, image.height, masks=SegmentationResult(masks))


# ------------------------------------------------------------ plan transforms


def _box_step(box: NormalizedBox, step: ToolStep, dims: tuple[int, int]) -> NormalizedBox | None:
    w, h = dims
    if step.op == "crop":
        x0, y0, x1, y1 = NormalizedBox.from_seq(step.params["box"]).pixel_rect(w, h)
        return reframe(box, NormalizedBox(x0 / w, y0 / h, x1 / w, y1 / h))
    if step.op == "flip_h":
        return NormalizedBox(1 - box.x2, box.y1, 1 - box.x1, box.y2)
    if step.op == "flip_v":
        return NormalizedBox(box.x1, 1 - box.y2, box.x2, 1 - box.y1)
    if step.op == "rotate":
        for _ in range(int(step.params["degrees"]) // 90):
            box = NormalizedBox(box.y1, 1 - box.x2, box.y2, 1 - box.x1)
        return box
    return box


def _mask_step(mask: np.ndarray, step: ToolStep) -> np.ndarray:
    h, w = mask.shape[:2]
    if step.op == "crop":
        x0, y0, x1, y1 = NormalizedBox.from_seq(step.params["box"]).pixel_rect(w, h)
        return mask[y0:y1, x0:x1]
    if step.op == "resize":
        return resize_nearest(mask, (int(step.params["width"]), int(step.params["height"])))
    if step.op == "flip_h":
        return mask[:, ::-1]
    if step.op == "flip_v":
        return mask[::-1]
    if step.op == "rotate":
        return np.rot90(mask, k=int(step.params["degrees"]) // 90)
    return mask


def _dims_step(dims: tuple[int, int], step: ToolStep) -> tuple[int, int]:
    w, h = dims
    if step.op == "crop":
        x0, y0, x1, y1 = NormalizedBox.from_seq(step.params["box"]).pixel_rect(w, h)
        return x1 - x0, y1 - y0
    if step.op == "resize":
        return int(step.params["width"]), int(step.params["height"])
    if step.op == "rotate" and (int(step.params["degrees"]) // 90) % 2:
        return h, w
    return w, h


def transform_annotation(ann: AnnotationSet, steps: Sequence[ToolStep]) -> AnnotationSet:
    """Carry boxes and masks through the geometric steps of a tool plan."""
    dims = (ann.width, ann.height)
    dets = list(ann.detections)
    masks = list(ann.masks.masks) if ann.masks is not None else None
    for step in steps:
        new_dets = []
        for d in dets:
            b = _box_step(d.box, step, dims)
            if b is not None and b.width > 0 and b.height > 0:
                new_dets.append(replace(d, box=b))
        dets = new_dets
        if masks is not None:
            masks = [InstanceMask(m.class_name, m.instance_id, np.ascontiguousarray(_mask_step(m.mask, step)), m.confidence) for m in masks]
        dims = _dims_step(dims, step)
    if masks is not None:
        masks = [m for m in masks if m.mask.any()]
    return AnnotationSet(
        ann.image_id,
        dims[0],
        dims[1],
        class_label=ann.class_label,
        detections=dets,
        masks=SegmentationResult(masks) if masks is not None else None,
    )


def rasterize(ann: AnnotationSet, spec: "DatasetSpec", variant: SegVariant) -> AnnotationSet:
    """Fill the semantic map (and the panoptic map for that variant) from instance masks.

    Masks are painted in ascending confidence so the most confident one owns
    overlapping pixels. Class index k (1-based) marks class ``spec.classes[k-1]``;
    stuff classes get instance id 0 in the panoptic map.
    """
    h, w = ann.height, ann.width
    semantic = np.zeros((h, w), dtype=np.uint8)
    panoptic = np.zeros((h, w, 2), dtype=np.int64)
    index = {c.name: i + 1 for i, c in enumerate(spec.classes)}
    things = {c.name for c in spec.classes if c.is_thing}
    masks = ann.masks.masks if ann.masks is not None else []
    for m in sorted(masks, key=lambda m: (m.confidence, -m.instance_id)):
        semantic[m.mask] = index[m.class_name]
        panoptic[m.mask, 0] = index[m.class_name]
        panoptic[m.mask, 1] = m.instance_id if m.class_name in things else 0
    return replace(ann, semantic=semantic, panoptic=panoptic if variant is SegVariant.PANOPTIC else None)


def mask_problems(ann: AnnotationSet, config: LabelConfig = LabelConfig()) -> list[Violation]:
    if ann.semantic is None:
        return []
    return validate_mask(ann.semantic, (ann.width, ann.height), config.hole_max, config.jag_ratio)


# ------------------------------------------------------------------ emitting


def seg_variant(task_type) -> SegVariant | None:
    return {
        "SemanticSeg": SegVariant.SEMANTIC,
        "InstanceSeg": SegVariant.INSTANCE,
        "PanopticSeg": SegVariant.PANOPTIC,
    }.get(task_type.value)


def image_relpath(ann: AnnotationSet, spec: "DatasetSpec") -> str:
    if spec.task_type.value == "Classification":
        return f"{ann.class_label}/{ann.file_name}"
    return f"images/{ann.file_name}"


def item_artifacts(ann: AnnotationSet, pixels: np.ndarray, spec: "DatasetSpec") -> dict[str, bytes]:
    """Every per-image output file as {relative path: bytes}."""
    fmts = {f.value for f in spec.annotation_formats}
    out = {image_relpath(ann, spec): encode_png(pixels)}
    stem = ann.image_id
    if spec.task_type.value == "Detection":
        if "YOLO" in fmts:
            out[f"labels_yolo/{stem}.txt"] = emit_yolo(ann.detections, spec.class_index()).encode()
        if "VOC" in fmts:
            xml = emit_voc(ann.detections, ann.file_name, ann.width, ann.height, known_classes=spec.class_names())
            out[f"annotations_voc/{stem}.xml"] = xml.encode()
    variant = seg_variant(spec.task_type)
    if variant is not None:
        if ann.semantic is not None:
            out[f"masks_semantic/{stem}.png"] = emit_semantic_png(ann.semantic)
        if variant in (SegVariant.INSTANCE, SegVariant.PANOPTIC) and ann.masks is not None:
            for name, data in emit_instance_pngs(stem, ann.masks.masks).items():
                out[f"masks_instance/{name}"] = data
        if variant is SegVariant.PANOPTIC and ann.panoptic is not None:
            out[f"masks_panoptic/{stem}.png"] = emit_panoptic_png(ann.panoptic)
    return out


def _r(x: float) -> float:
    return round(float(x), 6)


def item_record(ann: AnnotationSet, spec: "DatasetSpec", **extra) -> dict:
    """JSON-ready description of one dataset image, stored in the commit event and metadata."""
    rec = {
        "id": ann.image_id,
        "file": image_relpath(ann, spec),
        "width": ann.width,
        "height": ann.height,
        "class": ann.class_label,
        "detections": [
            {"class": d.class_name, "box": [_r(v) for v in d.box.as_list()], "confidence": _r(d.confidence)}
            for d in ann.detections
        ],
    }
    if ann.masks is not None:
        rec["masks"] = [
            {"class": m.class_name, "instance_id": m.instance_id, "confidence": _r(m.confidence), "area": m.area}
            for m in ann.masks.masks
        ]
    for k, v in sorted(extra.items()):
        rec[k] = _r(v) if isinstance(v, float) else v
    return rec


def _annotation_from_record(rec: Mapping, out_dir: Path | None) -> AnnotationSet:
    dets = [Detection(d["class"], NormalizedBox.from_seq(d["box"]), d["confidence"]) for d in rec.get("detections", [])]
    masks = None
    if "masks" in rec and out_dir is not None:
        loaded = []
        for m in rec["masks"]:
            data = (out_dir / "masks_instance" / f"{rec['id']}_{m['instance_id']}.png").read_bytes()
            loaded.append(InstanceMask(m["class"], m["instance_id"], decode_instance_png(data), m["confidence"]))
        masks = SegmentationResult(loaded)
    return AnnotationSet(
        rec["id"], rec["width"], rec["height"], class_label=rec.get("class"), detections=dets, masks=masks
    )


def dataset_artifacts(records: Sequence[Mapping], spec: "DatasetSpec", out_dir: Path, extra_meta: Mapping | None = None) -> dict[str, bytes]:
    """Whole-dataset files written at finalisation: COCO, class list, metadata."""
    fmts = {f.value for f in spec.annotation_formats}
    out: dict[str, bytes] = {}
    if "COCO" in fmts and spec.task_type.value != "Classification":
        variant = seg_variant(spec.task_type)
        anns = [_annotation_from_record(r, out_dir if variant in (SegVariant.INSTANCE, SegVariant.PANOPTIC) else None) for r in records]
        out["annotations_coco.json"] = emit_coco(anns, spec.class_names()).encode()
    if spec.task_type.value != "Classification":
        out["classes.txt"] = ("".join(f"{n}\n" for n in spec.class_names())).encode()
    meta = {
        "name": spec.name,
        "task_kind": spec.task_kind.value,
        "task_type": spec.task_type.value,
        "classes": spec.class_names(),
        "target_resolution": list(spec.target_resolution) if spec.target_resolution else None,
        "annotation_formats": sorted(fmts),
        "images": list(records),
    }
    meta.update(extra_meta or {})
    out["metadata.json"] = (json.dumps(meta, indent=1, sort_keys=True) + "\n").encode()
    return out


def manifest_tsv(hashes: Mapping[str, str]) -> bytes:
    return "".join(f"{rel}\t{sha}\n" for rel, sha in sorted(hashes.items())).encode()
