"""Per-image analysis documents and the accept/reject and tool-planning rules built on them."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import TYPE_CHECKING, Any, Mapping, Sequence

import jsonschema
import numpy as np

from .errors import NotADocument, SchemaViolation
from .geometry import NormalizedBox, bounding_box, box_problem, union_area
from .tools import TOOL_REGISTRY, ToolStep, check_step
from .validation import Violation

if TYPE_CHECKING:
    from .spec_intake import ClassDef, DatasetSpec

SCHEMA_VERSION = "1.0"
CROP_TRIGGER_AREA = 0.4
CROP_PADDING = 0.05


@lru_cache(maxsize=None)
def analysis_schema() -> dict:
    text = resources.files("datasetagent").joinpath("schemas/image_analysis.schema.json").read_text()
    return json.loads(text)


@dataclass
class ImageQuality:
    resolution: tuple[int, int]
    sharpness_score: float
    color_fidelity: str = "high"
    detail_completeness: float | None = None
    style_consistency: str = ""
    jpeg_artifacts: bool = False


@dataclass
class SemanticAlignment:
    class_prototype: str
    similarity_score: float
    match_features: list[str] = field(default_factory=list)
    alignment_vector_diff: dict[str, float] = field(default_factory=dict)


@dataclass
class QualityRisks:
    occlusion_detected: bool
    blur_score: float
    exposure_abnormality: bool
    viewpoint_deviation_score: float
    occlusion_level: float | None = None
    noise_level: str = "low"
    warnings: list[str] = field(default_factory=list)
    total_risk_score: float | None = None


@dataclass
class AnalysisDecision:
    qualified: bool
    confidence: float
    reason: str = ""


@dataclass
class ImageAnalysis:
    image_id: str
    target_category: str
    image_quality: ImageQuality
    semantic_alignment: SemanticAlignment
    quality_risks: QualityRisks
    decision: AnalysisDecision
    instance_count: int = 1
    fine_grained_attributes: dict[str, Any] = field(default_factory=dict)
    background_composition: dict[str, Any] = field(default_factory=dict)
    viewpoint_conditions: dict[str, Any] = field(default_factory=dict)
    extras: dict[str, Any] = field(default_factory=dict)

    def target_regions(self) -> list[NormalizedBox]:
        return [NormalizedBox.from_seq(b) for _, b in _find_boxes(self.fine_grained_attributes)]

    def background_regions(self) -> dict[str, NormalizedBox]:
        dist = self.background_composition.get("background_distribution", {})
        return {k: NormalizedBox.from_seq(v) for k, v in dist.items()}

    @property
    def occlusion_level(self) -> float:
        lv = self.quality_risks.occlusion_level
        if lv is None:
            return 0.0
        return lv

    def to_dict(self) -> dict:
        q = self.image_quality
        quality = {
            "resolution": f"{q.resolution[0]}x{q.resolution[1]}",
            "sharpness_score": q.sharpness_score,
            "color_fidelity": q.color_fidelity,
            "style_consistency": q.style_consistency,
            "jpeg_artifacts": q.jpeg_artifacts,
        }
        if q.detail_completeness is not None:
            quality["detail_completeness"] = q.detail_completeness
        r = self.quality_risks
        risks = {
            "occlusion_detected": r.occlusion_detected,
            "blur_score": r.blur_score,
            "exposure_abnormality": r.exposure_abnormality,
            "viewpoint_deviation_score": r.viewpoint_deviation_score,
            "noise_level": r.noise_level,
            "warnings": list(r.warnings),
        }
        if r.occlusion_level is not None:
            risks["occlusion_level"] = r.occlusion_level
        if r.total_risk_score is not None:
            risks["total_risk_score"] = r.total_risk_score
        s = self.semantic_alignment
        doc = {
            "image_id": self.image_id,
            "target_category": self.target_category,
            "instance_count": self.instance_count,
            "fine_grained_attributes": self.fine_grained_attributes,
            "background_composition": self.background_composition,
            "viewpoint_conditions": self.viewpoint_conditions,
            "image_quality": quality,
            "semantic_alignment": {
                "class_prototype": s.class_prototype,
                "similarity_score": s.similarity_score,
                "match_features": list(s.match_features),
                "alignment_vector_diff": dict(s.alignment_vector_diff),
            },
            "quality_risks": risks,
            "decision": {
                "qualified": self.decision.qualified,
                "confidence": self.decision.confidence,
                "reason": self.decision.reason,
            },
        }
        doc.update(self.extras)
        return doc


_KNOWN_KEYS = {
    "image_id",
    "target_category",
    "instance_count",
    "fine_grained_attributes",
    "background_composition",
    "viewpoint_conditions",
    "image_quality",
    "semantic_alignment",
    "quality_risks",
    "decision",
}


def _find_boxes(node: Any, path: str = "") -> list[tuple[str, list]]:
    """Every list of exactly four numbers nested under ``node``."""
    found = []
    if isinstance(node, Mapping):
        for key, value in node.items():
            found.extend(_find_boxes(value, f"{path}.{key}" if path else str(key)))
    elif (
        isinstance(node, list)
        and len(node) == 4
        and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in node)
    ):
        found.append((path, node))
    return found


def _field_path(error: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in error.absolute_path)
    if error.validator == "required":
        missing = error.message.split("'")[1] if "'" in error.message else ""
        path = f"{path}.{missing}" if path else missing
    return path or "<root>"


def parse_resolution(value) -> tuple[int, int]:
    if isinstance(value, str):
        w, h = value.lower().split("x")
        return int(w), int(h)
    return int(value[0]), int(value[1])


def parse_analysis(raw: Any, image: np.ndarray | None = None) -> ImageAnalysis:
    """Validate a raw analysis document (dict or JSON text) into an ImageAnalysis.

    Raises SchemaViolation naming the first offending field. When ``image`` is
    given, the reported resolution must match its pixel buffer.
    """
    if isinstance(raw, (str, bytes)):
        try:
            raw = json.loads(raw) if raw.strip() else None
        except json.JSONDecodeError as exc:
            raise NotADocument(f"not JSON: {exc}") from exc
    if not isinstance(raw, Mapping) or not raw:
        raise NotADocument("analysis must be a non-empty JSON object")

    validator = jsonschema.Draft202012Validator(analysis_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: (list(e.absolute_path), e.validator))
    if errors:
        err = errors[0]
        raise SchemaViolation(_field_path(err), str(err.validator), err.message)

    for section in ("fine_grained_attributes", "background_composition"):
        for path, box in _find_boxes(raw.get(section, {})):
            problem = box_problem(box)
            if problem:
                raise SchemaViolation(f"{section}.{path}", problem, json.dumps(box))

    q = raw["image_quality"]
    resolution = parse_resolution(q["resolution"])
    if image is not None:
        h, w = image.shape[:2]
        if resolution != (w, h):
            raise SchemaViolation(
                "image_quality.resolution", "mismatch", f"{resolution} vs pixel buffer {(w, h)}"
            )
    r = raw["quality_risks"]
    s = raw["semantic_alignment"]
    d = raw["decision"]
    return ImageAnalysis(
        image_id=raw["image_id"],
        target_category=raw["target_category"],
        instance_count=raw.get("instance_count", 1),
        fine_grained_attributes=dict(raw.get("fine_grained_attributes", {})),
        background_composition=dict(raw.get("background_composition", {})),
        viewpoint_conditions=dict(raw.get("viewpoint_conditions", {})),
        image_quality=ImageQuality(
            resolution=resolution,
            sharpness_score=q["sharpness_score"],
            color_fidelity=q.get("color_fidelity", "high"),
            detail_completeness=q.get("detail_completeness"),
            style_consistency=q.get("style_consistency", ""),
            jpeg_artifacts=q.get("jpeg_artifacts", False),
        ),
        semantic_alignment=SemanticAlignment(
            class_prototype=s["class_prototype"],
            similarity_score=s["similarity_score"],
            match_features=list(s.get("match_features", [])),
            alignment_vector_diff=dict(s.get("alignment_vector_diff", {})),
        ),
        quality_risks=QualityRisks(
            occlusion_detected=r["occlusion_detected"],
            blur_score=r["blur_score"],
            exposure_abnormality=r["exposure_abnormality"],
            viewpoint_deviation_score=r["viewpoint_deviation_score"],
            occlusion_level=r.get("occlusion_level"),
            noise_level=r.get("noise_level", "low"),
            warnings=list(r.get("warnings", [])),
            total_risk_score=r.get("total_risk_score"),
        ),
        decision=AnalysisDecision(d["qualified"], d["confidence"], d.get("reason", "")),
        extras={k: v for k, v in raw.items() if k not in _KNOWN_KEYS},
    )


def serialize(analysis: ImageAnalysis) -> str:
    return json.dumps(analysis.to_dict(), indent=1, sort_keys=True) + "\n"


# ------------------------------------------------------------------ decisions


def match_class(category: str, spec: "DatasetSpec") -> "ClassDef | None":
    key = category.strip().casefold()
    for cls in spec.classes:
        if key == cls.name.casefold() or key in (s.casefold() for s in cls.synonyms):
            return cls
    return None


def score_alignment(analysis: ImageAnalysis, spec: "DatasetSpec") -> float:
    if match_class(analysis.target_category, spec) is None:
        return 0.0
    return float(analysis.semantic_alignment.similarity_score)


def assess_risk(analysis: ImageAnalysis) -> float:
    r = analysis.quality_risks
    if r.total_risk_score is not None:
        return float(r.total_risk_score)
    return float(
        max(
            r.blur_score,
            r.viewpoint_deviation_score,
            analysis.occlusion_level,
            1.0 if r.exposure_abnormality else 0.0,
        )
    )


@dataclass(frozen=True)
class Decision:
    accept: bool
    reason: str
    confidence: float
    alignment: float
    risk: float


def decide(analysis: ImageAnalysis, spec: "DatasetSpec") -> Decision:
    """Accept iff alignment, risk and resolution all clear their gates.

    ``reason`` names the first failing gate, or "ok".
    """
    qc = spec.quality_constraints
    alignment = score_alignment(analysis, spec)
    risk = assess_risk(analysis)
    w, h = analysis.image_quality.resolution
    min_w, min_h = qc.min_resolution
    if alignment < qc.min_alignment_score:
        reason = "alignment"
    elif risk > qc.max_risk_score:
        reason = "risk"
    elif w < min_w or h < min_h:
        reason = "resolution"
    else:
        reason = "ok"
    return Decision(reason == "ok", reason, float(analysis.decision.confidence), alignment, risk)


# -------------------------------------------------------------------- planning


@dataclass
class ToolPlan:
    steps: list[ToolStep] = field(default_factory=list)

    def ops(self) -> list[str]:
        return [s.op for s in self.steps]

    def to_dict(self) -> dict:
        return {"steps": [s.to_dict() for s in self.steps]}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ToolPlan":
        return cls(
            [ToolStep(s["op"], dict(s.get("params", {})), s.get("justification", "")) for s in doc["steps"]]
        )

    def problems(self, target_resolution: tuple[int, int] | None = None):
        out = [v for step in self.steps for v in check_step(step)]
        if target_resolution is not None and not _ends_with_resize(self.steps, target_resolution):
            out.append(Violation("steps", "missing-terminal-resize"))
        return out


def _ends_with_resize(steps: Sequence[ToolStep], size) -> bool:
    if not steps or steps[-1].op != "resize":
        return False
    p = steps[-1].params
    return (int(p.get("width", -1)), int(p.get("height", -1))) == tuple(size)


def plan_tools(
    analysis: ImageAnalysis,
    spec: "DatasetSpec",
    suggested: Mapping | None = None,
    interp: str = "bicubic",
) -> ToolPlan:
    """Deterministic optimisation plan for an accepted image.

    A backend-suggested plan is used instead of the rules when every step is a
    known tool with valid parameters; the terminal resize is enforced either way.
    """
    steps: list[ToolStep] | None = None
    if suggested is not None:
        try:
            candidate = ToolPlan.from_dict(suggested)
        except (KeyError, TypeError):
            candidate = None
        if candidate is not None and not candidate.problems():
            steps = [s for s in candidate.steps if s.op != "resize"]

    if steps is None:
        steps = []
        regions = analysis.target_regions()
        if regions:
            covered = union_area(regions)
            if covered < CROP_TRIGGER_AREA:
                frame = bounding_box(regions).pad(CROP_PADDING)
                if frame.as_list() != [0.0, 0.0, 1.0, 1.0]:
                    steps.append(
                        ToolStep(
                            "crop",
                            {"box": [round(v, 6) for v in frame.as_list()]},
                            f"object regions cover {covered:.1%} of the frame",
                        )
                    )
        if analysis.image_quality.color_fidelity.strip().lower() != "high":
            steps.append(
                ToolStep(
                    "color_normalize",
                    {},
                    f"colour fidelity reported as {analysis.image_quality.color_fidelity!r}",
                )
            )

    if spec.target_resolution is not None:
        w, h = spec.target_resolution
        steps.append(
            ToolStep("resize", {"width": w, "height": h, "interp": interp}, "match target resolution")
        )
    assert all(s.op in TOOL_REGISTRY for s in steps)
    return ToolPlan(steps)
