"""Synthetic corpora with ground-truth sidecars for offline runs, tests and demos.

Every generated image carries a JSON sidecar in the shape the mock backends
replay: an analysis document, grounding detections and instance masks. The
per-image scenario cycles deterministically through cases that exercise
each pipeline branch: clean accepts, risk and alignment rejects, boxes at
exactly the confidence gate, low scores that need a box re-query, duplicate
boxes and images with nothing detectable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .formats import encode_png, rle_encode_compressed
from .geometry import NormalizedBox

PALETTE = [
    (220, 40, 40),
    (40, 170, 60),
    (50, 80, 220),
    (230, 190, 30),
    (170, 60, 200),
    (30, 190, 200),
    (240, 120, 20),
    (120, 120, 120),
    (250, 100, 170),
    (100, 60, 20),
]

SCENARIOS = ("clean", "gate", "requery", "clean", "risky", "duplicate", "clean", "offtopic", "empty", "clean", "pair")


@dataclass(frozen=True)
class SynthObject:
    class_name: str
    box: NormalizedBox
    ellipse: bool
    confidence: float
    box_prompt_confidence: float | None = None


def _object_mask(obj: SynthObject, w: int, h: int) -> np.ndarray:
    x0, y0, x1, y1 = obj.box.pixel_rect(w, h)
    mask = np.zeros((h, w), dtype=bool)
    if not obj.ellipse:
        mask[y0:y1, x0:x1] = True
        return mask
    yy, xx = np.mgrid[0:h, 0:w]
    cx, cy = (x0 + x1 - 1) / 2, (y0 + y1 - 1) / 2
    rx, ry = max((x1 - x0) / 2, 0.5), max((y1 - y0) / 2, 0.5)
    mask[((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0] = True
    return mask


def render(objects: Sequence[SynthObject], classes: Sequence[str], size: tuple[int, int], rng: np.random.Generator) -> tuple[np.ndarray, list[np.ndarray]]:
    w, h = size
    gx = np.linspace(0, 1, w)[None, :]
    gy = np.linspace(0, 1, h)[:, None]
    base = rng.uniform(60, 160, size=3)
    tilt = rng.uniform(-40, 40, size=3)
    img = base[None, None, :] + tilt[None, None, :] * (gx + gy)[..., None] / 2
    img = img + rng.normal(0, 6, size=(h, w, 3))
    masks = []
    for obj in objects:
        m = _object_mask(obj, w, h)
        colour = np.array(PALETTE[classes.index(obj.class_name) % len(PALETTE)], dtype=np.float64)
        img[m] = colour + rng.normal(0, 4, size=(int(m.sum()), 3))
        masks.append(m)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8), masks


def _random_box(rng: np.random.Generator, lo: float = 0.25, hi: float = 0.45) -> NormalizedBox:
    bw, bh = rng.uniform(lo, hi), rng.uniform(lo, hi)
    x, y = rng.uniform(0.05, 0.95 - bw), rng.uniform(0.05, 0.95 - bh)
    return NormalizedBox(round(x, 4), round(y, 4), round(x + bw, 4), round(y + bh, 4))


def analysis_doc(
    image_id: str,
    category: str,
    size: tuple[int, int],
    regions: Sequence[NormalizedBox],
    similarity: float = 0.93,
    risk: float = 0.07,
    color_fidelity: str = "high",
    occlusion_level: float = 0.0,
) -> dict:
    return {
        "image_id": image_id,
        "target_category": category,
        "instance_count": len(regions),
        "fine_grained_attributes": {
            "object_regions": {f"object_{i}": [round(v, 4) for v in b.as_list()] for i, b in enumerate(regions, 1)}
        },
        "background_composition": {"scene_type": "synthetic gradient"},
        "viewpoint_conditions": {"camera_angle": "frontal", "light_direction_vector": [-0.6, -0.4]},
        "image_quality": {
            "resolution": f"{size[0]}x{size[1]}",
            "sharpness_score": 0.94,
            "color_fidelity": color_fidelity,
            "detail_completeness": 98.7,
            "style_consistency": "synthetic",
            "jpeg_artifacts": False,
        },
        "semantic_alignment": {
            "class_prototype": category,
            "similarity_score": similarity,
            "match_features": ["colour", "shape"],
        },
        "quality_risks": {
            "occlusion_detected": occlusion_level > 0,
            "occlusion_level": occlusion_level,
            "blur_score": 0.06,
            "exposure_abnormality": False,
            "viewpoint_deviation_score": 0.08,
            "noise_level": "low",
            "warnings": [],
            "total_risk_score": risk,
        },
        "decision": {"qualified": risk <= 0.5, "confidence": 0.982, "reason": "synthetic ground truth"},
    }


def scenario_objects(scenario: str, cls: str, other: str, rng: np.random.Generator) -> list[SynthObject]:
    box = _random_box(rng)
    ellipse = bool(rng.integers(0, 2))
    main = SynthObject(cls, box, ellipse, 0.9)
    if scenario == "gate":
        return [SynthObject(cls, box, ellipse, 0.5)]
    if scenario == "requery":
        return [SynthObject(cls, box, ellipse, 0.4, 0.75)]
    if scenario == "duplicate":
        # second, slightly larger box around the same object: IoU above 0.9
        dup = NormalizedBox(box.x1, box.y1, min(1.0, box.x2 + 0.01), box.y2)
        return [main, SynthObject(cls, dup, ellipse, 0.7)]
    if scenario == "empty":
        return [SynthObject(cls, box, ellipse, 0.2)]
    if scenario == "pair":
        second = _random_box(rng, 0.15, 0.2)
        for _ in range(20):
            if second.x2 <= box.x1 or second.x1 >= box.x2 or second.y2 <= box.y1 or second.y1 >= box.y2:
                break
            second = _random_box(rng, 0.15, 0.2)
        else:
            return [main]
        return [main, SynthObject(other, second, not ellipse, 0.8)]
    return [main]


def make_corpus(
    root: str | Path,
    classes: Sequence[str],
    per_class: int,
    size: tuple[int, int] = (48, 40),
    seed: int = 0,
    corrupt: Sequence[int] = (),
    sources: Sequence[str] = ("web_a", "web_b", "web_c"),
    class_keyed: bool = True,
    scenarios: Sequence[str] = SCENARIOS,
) -> Path:
    """Write ``len(classes) * per_class`` images plus sidecars and a ``manifest.tsv``.

    Images are interleaved by class (index i belongs to ``classes[i % K]``).
    Indices listed in ``corrupt`` become undecodable ``.jpg`` files.
    Returns the manifest path.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    n = len(classes) * per_class
    for i in range(n):
        cls = classes[i % len(classes)]
        other = classes[(i + 1) % len(classes)]
        image_id = f"img{i:04d}"
        source = sources[i % len(sources)]
        hint = cls if class_keyed else ""
        if i in set(corrupt):
            path = root / f"{image_id}.jpg"
            path.write_bytes(b"\xff\xd8\xff\xe0 truncated jpeg " + bytes([i % 256]) * 16)
            lines.append(f"{image_id}\t{path.name}\t{source}\t{hint}")
            continue
        rng = np.random.default_rng([seed, i])
        scenario = scenarios[i % len(scenarios)]
        objects = scenario_objects(scenario, cls, other, rng)
        pixels, masks = render(objects, classes, size, rng)
        category, similarity, risk = cls, 0.93, 0.07
        if scenario == "risky":
            risk = 0.8
        elif scenario == "offtopic":
            category, similarity = "unrelated", 0.12
        occlusion = round(float(rng.choice([0.0, 0.0, 0.2, 0.45, 0.7])), 2)
        fidelity = "medium" if i % 5 == 2 else "high"
        regions = [o.box for o in objects if o.class_name == cls][:1]
        doc = {
            "analysis": analysis_doc(image_id, category, size, regions, similarity, risk, fidelity, occlusion),
            "detections": [],
            "masks": [],
        }
        for inst, (obj, m) in enumerate(zip(objects, masks), 1):
            det = {"class": obj.class_name, "box": [round(v, 4) for v in obj.box.as_list()], "confidence": obj.confidence}
            if obj.box_prompt_confidence is not None:
                det["box_prompt_confidence"] = obj.box_prompt_confidence
            doc["detections"].append(det)
            if scenario != "duplicate" or inst == 1:
                doc["masks"].append(
                    {"class": obj.class_name, "instance_id": inst, "confidence": obj.confidence, "rle": rle_encode_compressed(m)}
                )
        (root / f"{image_id}.png").write_bytes(encode_png(pixels))
        (root / f"{image_id}.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        lines.append(f"{image_id}\t{image_id}.png\t{source}\t{hint}")
    manifest = root / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def make_class_dir_dataset(root: str | Path, classes: Sequence[str], per_class: int, size: tuple[int, int] = (32, 32), seed: int = 0) -> Path:
    """A minimal existing classification dataset: ``root/<class>/<n>.png``."""
    root = Path(root)
    for k, cls in enumerate(classes):
        d = root / cls
        d.mkdir(parents=True, exist_ok=True)
        for j in range(per_class):
            rng = np.random.default_rng([seed, k, j])
            obj = SynthObject(cls, _random_box(rng, 0.4, 0.6), bool(j % 2), 1.0)
            pixels, _ = render([obj], classes, size, rng)
            (d / f"{cls}_{j:04d}.png").write_bytes(encode_png(pixels))
    return root


FOX_ANALYSIS = {
    "image_id": "wild_fox_03821.jpg",
    "target_category": "Fox",
    "fine_grained_attributes": {
        "pose": "crouching,head turned to left",
        "pose_bounding_box": [0.22, 0.35, 0.75, 0.65],
        "fur_detail": "visible winter coat pattern",
        "fur_region": [0.25, 0.4, 0.7, 0.6],
        "facial_features": {
            "snout_shape": "sharp and narrow",
            "eye_color": "dark amber",
            "ear_shape": "pointed with black tips",
            "facial_region": [0.6, 0.38, 0.72, 0.48],
        },
        "tail_detail": {"appearance": "fluffy,white-tipped", "tail_region": [0.3, 0.55, 0.6, 0.72]},
    },
    "background_composition": {
        "scene_type": "forest floor and leaf litter",
        "background_distribution": {"vegetation_area": [0.05, 0.6, 0.3, 0.95], "ground_area": [0.0, 0.75, 1.0, 1.0]},
    },
    "viewpoint_conditions": {
        "camera_angle": "frontal left,45",
        "camera_elevation": "eye-level",
        "lighting": "daylight with soft shadowing",
        "light_direction_vector": [-0.6, -0.4],
        "depth": "strong focus on main subject",
    },
    "image_quality": {
        "resolution": "1024x768",
        "sharpness_score": 0.94,
        "color_fidelity": "high",
        "detail_completeness": 98.7,
        "style_consistency": "natural daylight",
        "jpeg_artifacts": False,
    },
    "semantic_alignment": {
        "class_prototype": "Fox",
        "similarity_score": 0.931,
        "match_features": ["fur color and texture", "tail shape and region"],
        "alignment_vector_diff": {"fur_texture": 0.02, "tail_geometry": 0.03, "facial_features": 0.01, "pose_alignment": 0.04},
    },
    "quality_risks": {
        "occlusion_detected": False,
        "blur_score": 0.06,
        "exposure_abnormality": False,
        "viewpoint_deviation_score": 0.08,
        "noise_level": "low",
        "warnings": [],
        "total_risk_score": 0.07,
    },
    "decision": {"qualified": True, "confidence": 0.982, "reason": "All required semantic features and quality criteria met."},
}
"""A worked analysis document for a 1024x768 fox photo (the canonical example)."""
