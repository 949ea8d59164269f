"""Pixel-space bounding box arithmetic shared by the environment, datagen, and validators.

Boxes are axis-aligned integer pixel rectangles ``(x1, y1, x2, y2)`` with the
origin at the top-left corner, x growing rightward and y downward. Corners are
inclusive; a box with ``x1 == x2`` and ``y1 == y2`` is a single point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence


class GeometryError(ValueError):
    """Raised when a geometric precondition is violated."""


class Side(Enum):
    """Horizontal half-membership of a box relative to the image midline."""

    LEFT = "left"
    RIGHT = "right"
    STRADDLE = "straddle"


@dataclass(frozen=True)
class BoundingBox:
    """Integer pixel box. Construction does not enforce corner ordering;
    use :func:`clamp` to normalize raw input."""

    x1: int
    y1: int
    x2: int
    y2: int

    @classmethod
    def from_quad(cls, quad: Sequence[int]) -> "BoundingBox":
        if len(quad) != 4:
            raise GeometryError(f"expected 4 coordinates, got {len(quad)}")
        return cls(int(quad[0]), int(quad[1]), int(quad[2]), int(quad[3]))

    def to_list(self) -> list[int]:
        return [self.x1, self.y1, self.x2, self.y2]

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    @property
    def area(self) -> int:
        """Continuous rectangle area, (x2-x1)*(y2-y1). Zero for degenerate boxes."""
        return self.width * self.height

    def is_valid(self) -> bool:
        """True when corners are ordered and non-negative."""
        return 0 <= self.x1 <= self.x2 and 0 <= self.y1 <= self.y2

    def within(self, dims: "ImageDims") -> bool:
        return self.is_valid() and self.x2 <= dims.width and self.y2 <= dims.height


@dataclass(frozen=True)
class ImageDims:
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise GeometryError(f"dims must be positive, got {self.width}x{self.height}")


@dataclass(frozen=True)
class Annotation:
    """A single ground-truth detection: category label plus its box."""

    category: str
    box: BoundingBox


@dataclass
class DetectionRecord:
    """One annotated image: identity, pixel dims, and its detections.

    Boxes are expected to be clamped into ``dims`` at ingestion time; images
    with zero annotations are legal (they seed absence-style questions).
    """

    image_id: str
    image_path: str
    dims: ImageDims
    annotations: list[Annotation] = field(default_factory=list)

    def categories(self) -> list[str]:
        """Distinct categories in first-appearance order."""
        seen: dict[str, None] = {}
        for ann in self.annotations:
            seen.setdefault(ann.category, None)
        return list(seen)

    def boxes_of(self, category: str) -> list[BoundingBox]:
        return [a.box for a in self.annotations if a.category == category]


def center(box: BoundingBox) -> tuple[float, float]:
    """Arithmetic mean of the two corners."""
    return ((box.x1 + box.x2) / 2.0, (box.y1 + box.y2) / 2.0)


def center_point(box: BoundingBox) -> tuple[int, int]:
    """Integer-rounded center (half-up); always contained in a valid box."""
    cx, cy = center(box)
    return (int(cx + 0.5), int(cy + 0.5))


def side_of(box: BoundingBox, dims: ImageDims) -> Side:
    """Which horizontal half holds the box.

    LEFT when strictly left of the midline, RIGHT when strictly right,
    STRADDLE when x1 <= width/2 <= x2.
    """
    if not box.within(dims):
        raise GeometryError(f"box {box.to_list()} outside dims {dims.width}x{dims.height}")
    mid = dims.width / 2.0
    if box.x2 < mid:
        return Side.LEFT
    if box.x1 > mid:
        return Side.RIGHT
    return Side.STRADDLE


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union on continuous rectangle areas.

    Degenerate (zero-area) boxes score 0 against everything except an exact
    equal, which scores 1.
    """
    if a == b:
        return 1.0
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def clamp(box: BoundingBox, dims: ImageDims) -> BoundingBox:
    """Clip coordinates into [0, width] x [0, height] and reorder corners."""
    xs = sorted((min(max(box.x1, 0), dims.width), min(max(box.x2, 0), dims.width)))
    ys = sorted((min(max(box.y1, 0), dims.height), min(max(box.y2, 0), dims.height)))
    return BoundingBox(xs[0], ys[0], xs[1], ys[1])


def contains(box: BoundingBox, point: tuple[float, float]) -> bool:
    """Inclusive membership test: x1 <= px <= x2 and y1 <= py <= y2."""
    px, py = point
    return box.x1 <= px <= box.x2 and box.y1 <= py <= box.y2


def clamp_all(boxes: Iterable[BoundingBox], dims: ImageDims) -> list[BoundingBox]:
    return [clamp(b, dims) for b in boxes]
