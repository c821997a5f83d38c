"""Annotation payload types passed between the gateway, the labeler and the emitters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import NormalizedBox


@dataclass(frozen=True)
class Detection:
    class_name: str
    box: NormalizedBox
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class InstanceMask:
    class_name: str
    instance_id: int
    mask: np.ndarray  # bool, (height, width)
    confidence: float = 1.0

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))


@dataclass
class GroundingResult:
    detections: list[Detection] = field(default_factory=list)


@dataclass
class SegmentationResult:
    masks: list[InstanceMask] = field(default_factory=list)

    def __post_init__(self):
        ids = [m.instance_id for m in self.masks]
        if len(ids) != len(set(ids)):
            raise ValueError("instance ids must be unique within a segmentation result")


@dataclass
class AnnotationSet:
    """Labels for one dataset image.

    ``semantic`` is a (H, W) class-index map with 0 for background; ``panoptic``
    is (H, W, 2) holding (class index, instance id) per pixel.
    """

    image_id: str
    width: int
    height: int
    class_label: str | None = None
    detections: list[Detection] = field(default_factory=list)
    masks: SegmentationResult | None = None
    semantic: np.ndarray | None = None
    panoptic: np.ndarray | None = None
    file_name: str | None = None

    def __post_init__(self):
        if self.file_name is None:
            self.file_name = f"{self.image_id}.png"

    def has_payload(self) -> bool:
        return (
            self.class_label is not None
            or bool(self.detections)
            or (self.masks is not None and bool(self.masks.masks))
            or self.semantic is not None
            or self.panoptic is not None
        )
