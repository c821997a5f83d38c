"""Normalized boxes and the small amount of rectangle arithmetic built on them."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class NormalizedBox:
    """Axis-aligned box with corners given as fractions of image width/height."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        problem = box_problem((self.x1, self.y1, self.x2, self.y2))
        if problem:
            raise ValueError(f"invalid box {self.as_list()}: {problem}")

    @classmethod
    def from_seq(cls, seq: Sequence[float]) -> "NormalizedBox":
        if len(seq) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(seq)}")
        return cls(*(float(v) for v in seq))

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def pixel_rect(self, width: int, height: int) -> tuple[int, int, int, int]:
        """Pixel rectangle (x0, y0, x1, y1), exclusive end, round-half-up corners."""
        return (
            round_half_up(self.x1 * width),
            round_half_up(self.y1 * height),
            round_half_up(self.x2 * width),
            round_half_up(self.y2 * height),
        )

    def pad(self, amount: float) -> "NormalizedBox":
        return NormalizedBox(
            max(0.0, self.x1 - amount),
            max(0.0, self.y1 - amount),
            min(1.0, self.x2 + amount),
            min(1.0, self.y2 + amount),
        )


def box_problem(coords: Sequence[float]) -> str | None:
    """Name the violated rule for a candidate box, or None when it is valid."""
    x1, y1, x2, y2 = coords
    for v in coords:
        if not (0.0 <= v <= 1.0) or math.isnan(v):
            return "range"
    if not x1 < x2:
        return "x-order"
    if not y1 < y2:
        return "y-order"
    return None


def iou(a: NormalizedBox, b: NormalizedBox) -> float:
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def intersect(a: NormalizedBox, b: NormalizedBox) -> NormalizedBox | None:
    x1, y1 = max(a.x1, b.x1), max(a.y1, b.y1)
    x2, y2 = min(a.x2, b.x2), min(a.y2, b.y2)
    if x1 < x2 and y1 < y2:
        return NormalizedBox(x1, y1, x2, y2)
    return None


def bounding_box(boxes: Iterable[NormalizedBox]) -> NormalizedBox | None:
    boxes = list(boxes)
    if not boxes:
        return None
    return NormalizedBox(
        min(b.x1 for b in boxes),
        min(b.y1 for b in boxes),
        max(b.x2 for b in boxes),
        max(b.y2 for b in boxes),
    )


def union_area(boxes: Iterable[NormalizedBox]) -> float:
    """Exact area covered by the union of boxes (coordinate compression)."""
    boxes = list(boxes)
    if not boxes:
        return 0.0
    xs = sorted({b.x1 for b in boxes} | {b.x2 for b in boxes})
    total = 0.0
    for left, right in zip(xs, xs[1:]):
        spans = sorted((b.y1, b.y2) for b in boxes if b.x1 <= left and b.x2 >= right)
        covered = 0.0
        cur_lo = cur_hi = None
        for lo, hi in spans:
            if cur_hi is None or lo > cur_hi:
                if cur_hi is not None:
                    covered += cur_hi - cur_lo
                cur_lo, cur_hi = lo, hi
            else:
                cur_hi = max(cur_hi, hi)
        if cur_hi is not None:
            covered += cur_hi - cur_lo
        total += covered * (right - left)
    return total


def reframe(box: NormalizedBox, frame: NormalizedBox) -> NormalizedBox | None:
    """Express ``box`` in the coordinates of ``frame`` (after cropping to it).

    Parts outside the frame are clipped; returns None if nothing remains.
    """
    clipped = intersect(box, frame)
    if clipped is None:
        return None
    fw, fh = frame.width, frame.height
    coords = [
        (clipped.x1 - frame.x1) / fw,
        (clipped.y1 - frame.y1) / fh,
        (clipped.x2 - frame.x1) / fw,
        (clipped.y2 - frame.y1) / fh,
    ]
    coords = [min(1.0, max(0.0, c)) for c in coords]
    if box_problem(coords):
        return None
    return NormalizedBox(*coords)
