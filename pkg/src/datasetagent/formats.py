"""Readers and writers for YOLO, Pascal VOC, COCO and PNG mask annotations.

All writers are pure: the same annotation always serializes to the same bytes,
so emit -> parse -> emit is byte-stable.
"""

from __future__ import annotations

import io
import json
import xml.etree.ElementTree as ET
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .annotation import AnnotationSet, Detection, InstanceMask, SegmentationResult
from .errors import TooManyClasses, UnknownClass
from .geometry import NormalizedBox, round_half_up

PANOPTIC_DIVISOR = 1000


# --------------------------------------------------------------------------- RLE


def rle_encode(mask: np.ndarray) -> dict:
    """Uncompressed COCO RLE: column-major run lengths, starting with a zero run."""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    flat = mask.flatten(order="F")
    counts = []
    if flat.size:
        change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
        bounds = np.concatenate(([0], change, [flat.size]))
        runs = np.diff(bounds).tolist()
        if flat[0]:
            runs = [0] + runs
        counts = runs
    return {"size": [h, w], "counts": counts}


def rle_decode(rle: Mapping) -> np.ndarray:
    h, w = rle["size"]
    counts = rle["counts"]
    if isinstance(counts, (str, bytes)):
        counts = rle_counts_from_string(counts)
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for c in counts:
        if value:
            flat[pos : pos + c] = True
        pos += c
        value = not value
    if pos != h * w:
        raise ValueError(f"RLE counts sum to {pos}, expected {h * w}")
    return flat.reshape((h, w), order="F")


def rle_counts_to_string(counts: Sequence[int]) -> str:
    # pycocotools' LEB128-like packing with deltas against counts[i-2] for i > 2
    out = []
    for i, cnt in enumerate(counts):
        x = int(cnt)
        if i > 2:
            x -= int(counts[i - 2])
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = (x != -1) if (c & 0x10) else (x != 0)
            if more:
                c |= 0x20
            out.append(chr(c + 48))
    return "".join(out)


def rle_counts_from_string(s: str | bytes) -> list[int]:
    if isinstance(s, bytes):
        s = s.decode("ascii")
    counts: list[int] = []
    p = 0
    while p < len(s):
        x = 0
        k = 0
        more = True
        while more:
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def rle_encode_compressed(mask: np.ndarray) -> dict:
    rle = rle_encode(mask)
    return {"size": rle["size"], "counts": rle_counts_to_string(rle["counts"])}


# -------------------------------------------------------------------------- YOLO


def emit_yolo(detections: Iterable[Detection], class_index: Mapping[str, int]) -> str:
    lines = []
    for det in detections:
        if det.class_name not in class_index:
            raise UnknownClass(det.class_name)
        b = det.box
        cx, w = _yolo_axis(b.x1, b.x2)
        cy, h = _yolo_axis(b.y1, b.y2)
        lines.append(f"{class_index[det.class_name]} {cx} {cy} {w} {h}\n")
    return "".join(lines)


_MICRO = 10**6


def _yolo_axis(lo: float, hi: float) -> tuple[str, str]:
    """Centre and extent on the 6-decimal grid, with the extent trimmed so that
    centre +/- extent/2 stays inside [0, 1]. Parsing such a line then needs no
    clipping, which keeps emit -> parse -> emit byte-stable at the image border."""
    c = round((lo + hi) / 2 * _MICRO)
    e = min(round((hi - lo) * _MICRO), 2 * c, 2 * (_MICRO - c))
    return f"{c / _MICRO:.6f}", f"{e / _MICRO:.6f}"


def parse_yolo(text: str) -> list[tuple[int, float, float, float, float]]:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"line {lineno}: expected 5 fields, got {len(parts)}")
        rows.append((int(parts[0]), *(float(v) for v in parts[1:])))
    return rows


def yolo_rows_to_detections(rows, class_names: Sequence[str]) -> list[Detection]:
    dets = []
    for idx, cx, cy, w, h in rows:
        if not 0 <= idx < len(class_names):
            raise UnknownClass(str(idx))
        box = NormalizedBox(
            max(0.0, cx - w / 2), max(0.0, cy - h / 2), min(1.0, cx + w / 2), min(1.0, cy + h / 2)
        )
        dets.append(Detection(class_names[idx], box, 1.0))
    return dets


# --------------------------------------------------------------------------- VOC


def voc_pixel_box(box: NormalizedBox, width: int, height: int) -> tuple[int, int, int, int]:
    """1-based inclusive pixel corners (xmin, ymin, xmax, ymax)."""
    x0, y0, x1, y1 = box.pixel_rect(width, height)
    xmin = min(max(x0 + 1, 1), width)
    ymin = min(max(y0 + 1, 1), height)
    xmax = min(max(x1, xmin), width)
    ymax = min(max(y1, ymin), height)
    return xmin, ymin, xmax, ymax


def emit_voc(
    detections: Iterable[Detection],
    filename: str,
    width: int,
    height: int,
    depth: int = 3,
    folder: str = "images",
    known_classes: Iterable[str] | None = None,
) -> str:
    known = set(known_classes) if known_classes is not None else None
    root = ET.Element("annotation")
    ET.SubElement(root, "folder").text = folder
    ET.SubElement(root, "filename").text = filename
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(width)
    ET.SubElement(size, "height").text = str(height)
    ET.SubElement(size, "depth").text = str(depth)
    ET.SubElement(root, "segmented").text = "0"
    for det in detections:
        if known is not None and det.class_name not in known:
            raise UnknownClass(det.class_name)
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = det.class_name
        ET.SubElement(obj, "pose").text = "Unspecified"
        ET.SubElement(obj, "truncated").text = "0"
        ET.SubElement(obj, "difficult").text = "0"
        bnd = ET.SubElement(obj, "bndbox")
        for tag, v in zip(("xmin", "ymin", "xmax", "ymax"), voc_pixel_box(det.box, width, height)):
            ET.SubElement(bnd, tag).text = str(v)
    ET.indent(root, space="  ")
    return ET.tostring(root, encoding="unicode") + "\n"


def parse_voc(text: str) -> dict:
    root = ET.fromstring(text)
    if root.tag != "annotation":
        raise ValueError(f"root element is <{root.tag}>, expected <annotation>")
    size = root.find("size")
    if size is None:
        raise ValueError("missing <size>")
    out = {
        "folder": root.findtext("folder", ""),
        "filename": root.findtext("filename", ""),
        "width": int(size.findtext("width")),
        "height": int(size.findtext("height")),
        "depth": int(size.findtext("depth", "3")),
        "objects": [],
    }
    for obj in root.findall("object"):
        bnd = obj.find("bndbox")
        if bnd is None:
            raise ValueError("object without <bndbox>")
        coords = tuple(int(round(float(bnd.findtext(t)))) for t in ("xmin", "ymin", "xmax", "ymax"))
        out["objects"].append((obj.findtext("name", ""), *coords))
    return out


def voc_to_detections(parsed: dict) -> list[Detection]:
    w, h = parsed["width"], parsed["height"]
    return [
        Detection(name, NormalizedBox((x0 - 1) / w, (y0 - 1) / h, x1 / w, y1 / h), 1.0)
        for name, x0, y0, x1, y1 in parsed["objects"]
    ]


# -------------------------------------------------------------------------- COCO


def _mask_bbox(mask: np.ndarray) -> list[float]:
    ys, xs = np.nonzero(mask)
    if not len(xs):
        return [0.0, 0.0, 0.0, 0.0]
    x0, y0 = int(xs.min()), int(ys.min())
    return [float(x0), float(y0), float(xs.max() + 1 - x0), float(ys.max() + 1 - y0)]


def emit_coco(annotations: Sequence[AnnotationSet], class_names: Sequence[str]) -> str:
    """One COCO document for the whole dataset; image/annotation ids dense from 1."""
    cat_id = {name: i + 1 for i, name in enumerate(class_names)}
    images, anns = [], []
    for img_id, ann in enumerate(annotations, 1):
        images.append(
            {"id": img_id, "file_name": ann.file_name, "width": ann.width, "height": ann.height}
        )
        W, H = ann.width, ann.height
        for det in ann.detections:
            if det.class_name not in cat_id:
                raise UnknownClass(det.class_name)
            b = det.box
            bbox = [round(b.x1 * W, 3), round(b.y1 * H, 3), round(b.width * W, 3), round(b.height * H, 3)]
            anns.append(
                {
                    "id": len(anns) + 1,
                    "image_id": img_id,
                    "category_id": cat_id[det.class_name],
                    "bbox": bbox,
                    "area": round(bbox[2] * bbox[3], 3),
                    "iscrowd": 0,
                    "score": round(float(det.confidence), 6),
                }
            )
        if ann.masks is not None:
            for m in ann.masks.masks:
                if m.class_name not in cat_id:
                    raise UnknownClass(m.class_name)
                anns.append(
                    {
                        "id": len(anns) + 1,
                        "image_id": img_id,
                        "category_id": cat_id[m.class_name],
                        "bbox": _mask_bbox(m.mask),
                        "area": m.area,
                        "iscrowd": 0,
                        "score": round(float(m.confidence), 6),
                        "instance_id": m.instance_id,
                        "segmentation": rle_encode_compressed(m.mask),
                    }
                )
    doc = {
        "images": images,
        "annotations": anns,
        "categories": [{"id": cat_id[n], "name": n, "supercategory": "object"} for n in class_names],
    }
    return json.dumps(doc, indent=1) + "\n"


def parse_coco(text: str) -> dict:
    doc = json.loads(text)
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise ValueError(f"COCO document lacks a '{key}' array")
    return doc


def coco_to_annotations(doc: dict) -> tuple[list[AnnotationSet], list[str]]:
    cats = sorted(doc["categories"], key=lambda c: c["id"])
    names = {c["id"]: c["name"] for c in cats}
    sets: dict[int, AnnotationSet] = {}
    for img in doc["images"]:
        stem = img["file_name"].rsplit(".", 1)[0]
        sets[img["id"]] = AnnotationSet(
            image_id=stem, width=img["width"], height=img["height"], file_name=img["file_name"]
        )
    for a in doc["annotations"]:
        ann = sets[a["image_id"]]
        name = names[a["category_id"]]
        score = float(a.get("score", 1.0))
        if "segmentation" in a and isinstance(a["segmentation"], dict):
            mask = rle_decode(a["segmentation"])
            if ann.masks is None:
                ann.masks = SegmentationResult()
            ann.masks.masks.append(InstanceMask(name, int(a.get("instance_id", a["id"])), mask, score))
        else:
            x, y, w, h = a["bbox"]
            W, H = ann.width, ann.height
            box = NormalizedBox(x / W, y / H, min(1.0, (x + w) / W), min(1.0, (y + h) / H))
            ann.detections.append(Detection(name, box, score))
    return list(sets.values()), [c["name"] for c in cats]


# ------------------------------------------------------------------- mask images


def voc_palette(n: int = 256) -> list[int]:
    """The Pascal VOC colour map (bit-interleaved class index)."""
    pal = []
    for i in range(n):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal.extend((r, g, b))
    return pal


def _png_bytes(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def encode_png(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim == 3 and pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    return _png_bytes(Image.fromarray(pixels))


def decode_png(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as img:
        img.load()
        if img.mode == "P":
            return np.array(img)
        return np.array(img.convert("L" if img.mode in ("L", "1", "I", "I;16") else "RGB"))


def emit_semantic_png(index_map: np.ndarray, palette: Sequence[int] | None = None) -> bytes:
    index_map = np.asarray(index_map)
    if index_map.size and (index_map.max() > 255 or index_map.min() < 0):
        raise TooManyClasses(f"class index {int(index_map.max())} does not fit an 8-bit palette")
    img = Image.fromarray(index_map.astype(np.uint8), mode="P")
    img.putpalette(list(palette) if palette is not None else voc_palette())
    return _png_bytes(img)


def decode_semantic_png(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as img:
        if img.mode != "P":
            raise ValueError(f"semantic mask must be a paletted PNG, got mode {img.mode}")
        return np.array(img)


def emit_instance_pngs(image_id: str, masks: Iterable[InstanceMask]) -> dict[str, bytes]:
    return {
        f"{image_id}_{m.instance_id}.png": _png_bytes(
            Image.fromarray(np.where(m.mask, 255, 0).astype(np.uint8), mode="L")
        )
        for m in masks
    }


def decode_instance_png(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as img:
        return np.array(img.convert("L")) > 0


def panoptic_ids(panoptic: np.ndarray) -> np.ndarray:
    return panoptic[..., 0].astype(np.int64) * PANOPTIC_DIVISOR + panoptic[..., 1].astype(np.int64)


def emit_panoptic_png(panoptic: np.ndarray) -> bytes:
    ids = panoptic_ids(np.asarray(panoptic))
    if ids.size and ids.max() >= 1 << 24:
        raise TooManyClasses("panoptic id exceeds 24 bits")
    rgb = np.stack([ids & 0xFF, (ids >> 8) & 0xFF, (ids >> 16) & 0xFF], axis=-1).astype(np.uint8)
    return _png_bytes(Image.fromarray(rgb, mode="RGB"))


def decode_panoptic_png(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as img:
        rgb = np.array(img.convert("RGB")).astype(np.int64)
    ids = rgb[..., 0] + 256 * rgb[..., 1] + 65536 * rgb[..., 2]
    return np.stack([ids // PANOPTIC_DIVISOR, ids % PANOPTIC_DIVISOR], axis=-1)
