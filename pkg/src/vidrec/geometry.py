"""Axis-aligned box algebra: area, IoU, GIoU and greedy NMS.

A missing box is represented by ``None`` throughout the package. ``Box``
instances always have strictly positive area, so ``None`` is the only
encoding of "no box".
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence


class BoxError(ValueError):
    """Invalid box construction or box-operation input."""


class BothAbsent(BoxError):
    """IoU requested for two absent boxes; use ``iou_plus_n`` instead."""


class AbsentInput(BoxError):
    """Operation requires present boxes."""


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 <= self.x2 and self.y1 <= self.y2):
            raise BoxError(f"inverted box {self.as_list()}")
        if self.x1 == self.x2 or self.y1 == self.y2:
            raise BoxError(f"zero-area box {self.as_list()}; use None for absent")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


BBox = Optional[Box]


def make_box(x1: float, y1: float, x2: float, y2: float) -> BBox:
    """Build a box, normalizing zero-area input to ``None``.

    Inverted coordinates are still an error.
    """
    if x1 > x2 or y1 > y2:
        raise BoxError(f"inverted box {[x1, y1, x2, y2]}")
    if x1 == x2 or y1 == y2:
        return None
    return Box(float(x1), float(y1), float(x2), float(y2))


def box_from_list(coords: Optional[Sequence[float]]) -> BBox:
    if coords is None:
        return None
    if len(coords) != 4:
        raise BoxError(f"expected 4 coordinates, got {len(coords)}")
    return make_box(*coords)


def area(box: BBox) -> float:
    return 0.0 if box is None else box.area


def intersection_area(a: BBox, b: BBox) -> float:
    if a is None or b is None:
        return 0.0
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def union_area(a: BBox, b: BBox) -> float:
    return area(a) + area(b) - intersection_area(a, b)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes.

    Raises ``BothAbsent`` when neither box is present, since the ratio is 0/0.
    """
    if a is None and b is None:
        raise BothAbsent("iou of two absent boxes is undefined")
    inter = intersection_area(a, b)
    return inter / (area(a) + area(b) - inter)


def enclosing_box(a: Box, b: Box) -> Box:
    return Box(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2))


def giou(a: BBox, b: BBox) -> float:
    """Generalized IoU, in (-1, 1]."""
    if a is None or b is None:
        raise AbsentInput("giou needs two present boxes")
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    hull = enclosing_box(a, b).area
    return inter / union - (hull - union) / hull


def clip_box(box: BBox, width: float, height: float) -> BBox:
    """Intersect with the image rectangle [0, width] x [0, height]."""
    if box is None:
        return None
    x1, y1 = max(box.x1, 0.0), max(box.y1, 0.0)
    x2, y2 = min(box.x2, float(width)), min(box.y2, float(height))
    if x2 <= x1 or y2 <= y1:
        return None
    return Box(x1, y1, x2, y2)


def bounding_box(points) -> BBox:
    """Axis-aligned hull of an iterable of (u, v) points."""
    pts = list(points)
    if not pts:
        return None
    us = [p[0] for p in pts]
    vs = [p[1] for p in pts]
    return make_box(min(us), min(vs), max(us), max(vs))


def nms(boxes: Sequence[tuple[Box, float]], iou_threshold: float = 0.5) -> list[int]:
    """Greedy non-maximum suppression.

    Returns the indices of surviving boxes in descending-score order; equal
    scores keep input order. A box is suppressed when its IoU with an
    already kept box exceeds ``iou_threshold``.
    """
    for b, _ in boxes:
        if b is None:
            raise AbsentInput("nms input must contain present boxes only")
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i][1], i))
    keep: list[int] = []
    for i in order:
        bi = boxes[i][0]
        if all(iou(bi, boxes[k][0]) <= iou_threshold for k in keep):
            keep.append(i)
    return keep
