"""Axis-aligned box algebra: IoU, per-category NMS, and the relative
box encoding that expresses a target box in the coordinate frame of a
person box.

Boxes are stored as corner pairs (x1, y1, x2, y2) in image pixels;
centers and sizes are always derived, never stored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle with strictly positive width and height."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(
                f"degenerate box: ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    @property
    def w(self) -> float:
        return self.x2 - self.x1

    @property
    def h(self) -> float:
        return self.y2 - self.y1

    @property
    def cx(self) -> float:
        return (self.x1 + self.x2) / 2.0

    @property
    def cy(self) -> float:
        return (self.y1 + self.y2) / 2.0

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class RelOffset:
    """Dimensionless offset of one box relative to a reference box:
    normalized center shift plus log size ratios."""

    tx: float
    ty: float
    tw: float
    th: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.tx, self.ty, self.tw, self.th)


@dataclass(frozen=True)
class Detection:
    """A scored box with its category label."""

    box: Box
    category: str
    score: float


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area; 0 for disjoint boxes."""
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    iw = ix2 - ix1
    ih = iy2 - iy1
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def nms(dets: list[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy score-descending suppression, run independently per category.

    The output is sorted by descending score; ties are broken by input
    index so the result does not depend on input order beyond scores.
    No two survivors of the same category overlap above ``iou_thresh``.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    suppressed = [False] * len(dets)
    keep: list[Detection] = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(dets[i])
        for j in order[pos + 1:]:
            if suppressed[j] or dets[j].category != dets[i].category:
                continue
            if iou(dets[i].box, dets[j].box) > iou_thresh:
                suppressed[j] = True
    return keep


def encode_rel(b_o: Box, b_h: Box) -> RelOffset:
    """Encode ``b_o`` relative to ``b_h``: center shift normalized by the
    reference size, and log width/height ratios (center convention)."""
    return RelOffset(
        tx=(b_o.cx - b_h.cx) / b_h.w,
        ty=(b_o.cy - b_h.cy) / b_h.h,
        tw=math.log(b_o.w / b_h.w),
        th=math.log(b_o.h / b_h.h),
    )


def decode_rel(t, b_h: Box) -> Box:
    """Exact inverse of :func:`encode_rel`. Accepts a RelOffset or any
    4-sequence (tx, ty, tw, th)."""
    if not isinstance(t, RelOffset):
        t = RelOffset(*(float(v) for v in t))
    cx = b_h.cx + t.tx * b_h.w
    cy = b_h.cy + t.ty * b_h.h
    w = b_h.w * math.exp(t.tw)
    h = b_h.h * math.exp(t.th)
    return Box(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


def clip_box(x1: float, y1: float, x2: float, y2: float,
             width: float, height: float,
             min_size: float = 1e-3) -> Box:
    """Clip corners to ``[0, width] x [0, height]``, keeping at least
    ``min_size`` of extent so the result is a valid Box."""
    x1 = min(max(x1, 0.0), width - min_size)
    y1 = min(max(y1, 0.0), height - min_size)
    x2 = min(max(x2, x1 + min_size), width)
    y2 = min(max(y2, y1 + min_size), height)
    return Box(x1, y1, x2, y2)
