"""Shared geometry and numeric primitives.

Boxes, IoU, greedy NMS, affine transforms, box-delta coding and the
elementary losses (with analytic gradients) that the distillation and
training modules build on. Everything here is a pure function over
immutable values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np


class GeometryError(ValueError):
    """Raised when a geometric value violates its construction invariants."""


class DimensionMismatch(ValueError):
    """Raised when two vectors that must share a length do not."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with x1 < x2 and y1 < y2, all coordinates finite."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v):
                raise GeometryError(f"non-finite box coordinate: {self!r}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise GeometryError(
                f"degenerate box: ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def clip(self, canvas_w: float, canvas_h: float) -> Optional["Box"]:
        """Intersect with [0, w] x [0, h]; None when nothing is left."""
        x1 = max(self.x1, 0.0)
        y1 = max(self.y1, 0.0)
        x2 = min(self.x2, float(canvas_w))
        y2 = min(self.y2, float(canvas_h))
        if x1 >= x2 or y1 >= y2:
            return None
        return Box(x1, y1, x2, y2)

    def as_list(self):
        return [self.x1, self.y1, self.x2, self.y2]


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def nms(items: Sequence[Tuple[Box, float]], iou_thresh: float) -> list:
    """Greedy non-maximum suppression.

    Items are visited in descending score order (ties broken by lower
    input index); an item is kept iff its IoU with every already-kept
    item is <= iou_thresh. Returns kept indices in visit order.
    """
    order = sorted(range(len(items)), key=lambda i: (-items[i][1], i))
    kept: list = []
    for i in order:
        box_i = items[i][0]
        if all(iou(box_i, items[j][0]) <= iou_thresh for j in kept):
            kept.append(i)
    return kept


@dataclass(frozen=True)
class AffineTransform:
    """Axis-aligned affine map x' = sx*x + tx, y' = sy*y + ty.

    A horizontal flip is folded into the sign of sx. The determinant
    sx*sy must be nonzero so the transform is invertible.
    """

    sx: float
    sy: float
    tx: float
    ty: float

    def __post_init__(self):
        for v in (self.sx, self.sy, self.tx, self.ty):
            if not math.isfinite(v):
                raise GeometryError("non-finite affine parameter")
        if self.sx * self.sy == 0.0:
            raise GeometryError("affine transform must be invertible")

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(1.0, 1.0, 0.0, 0.0)

    def apply_point(self, x: float, y: float) -> Tuple[float, float]:
        return (self.sx * x + self.tx, self.sy * y + self.ty)

    def apply_box_unclipped(self, b: Box) -> Box:
        xa, ya = self.apply_point(b.x1, b.y1)
        xb, yb = self.apply_point(b.x2, b.y2)
        return Box(min(xa, xb), min(ya, yb), max(xa, xb), max(ya, yb))

    def invert(self) -> "AffineTransform":
        return AffineTransform(
            1.0 / self.sx, 1.0 / self.sy, -self.tx / self.sx, -self.ty / self.sy
        )

    def compose(self, inner: "AffineTransform") -> "AffineTransform":
        """Return self ∘ inner (inner applied first)."""
        return AffineTransform(
            self.sx * inner.sx,
            self.sy * inner.sy,
            self.sx * inner.tx + self.tx,
            self.sy * inner.ty + self.ty,
        )

    def matrix(self):
        """2x3 row-major matrix [[sx, 0, tx], [0, sy, ty]]."""
        return [[self.sx, 0.0, self.tx], [0.0, self.sy, self.ty]]


def apply_affine(
    t: AffineTransform, b: Box, canvas_w: float, canvas_h: float
) -> Optional[Box]:
    """Transform a box and clip it to the canvas; None when fully clipped."""
    return t.apply_box_unclipped(b).clip(canvas_w, canvas_h)


class BoxDeltas(NamedTuple):
    """(tx, ty, tw, th) center-offset / log-size regression targets."""

    tx: float
    ty: float
    tw: float
    th: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)


def encode_deltas(anchor: Box, target: Box) -> BoxDeltas:
    """Encode target relative to anchor: offsets over anchor size, log size ratios."""
    acx, acy = anchor.center
    tcx, tcy = target.center
    return BoxDeltas(
        (tcx - acx) / anchor.width,
        (tcy - acy) / anchor.height,
        math.log(target.width / anchor.width),
        math.log(target.height / anchor.height),
    )


def decode_deltas(anchor: Box, d: BoxDeltas) -> Box:
    acx, acy = anchor.center
    cx = acx + d.tx * anchor.width
    cy = acy + d.ty * anchor.height
    w = anchor.width * math.exp(d.tw)
    h = anchor.height * math.exp(d.th)
    return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def smooth_l1(pred: float, target: float, beta: float = 1.0) -> Tuple[float, float]:
    """Huber-style smooth L1 and its derivative w.r.t. pred.

    0.5*x^2/beta inside |x| < beta, |x| - 0.5*beta outside.
    """
    if beta <= 0.0:
        raise ValueError("beta must be positive")
    x = pred - target
    if abs(x) < beta:
        return 0.5 * x * x / beta, x / beta
    return abs(x) - 0.5 * beta, math.copysign(1.0, x)


def mean_center(logits: np.ndarray) -> np.ndarray:
    """Subtract the entry mean; idempotent and shift-invariant."""
    v = np.asarray(logits, dtype=np.float64)
    if v.size == 0:
        raise DimensionMismatch("cannot mean-center an empty vector")
    return v - v.mean(axis=-1, keepdims=True)


def softmax(logits: np.ndarray) -> np.ndarray:
    v = np.asarray(logits, dtype=np.float64)
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, label: int) -> Tuple[float, np.ndarray]:
    """Softmax cross-entropy against an integer label, with gradient."""
    v = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < v.shape[-1]:
        raise IndexError(f"label {label} out of range for {v.shape[-1]} classes")
    p = softmax(v)
    z = v - v.max()
    loss = float(np.log(np.exp(z).sum()) - z[label])
    grad = p.copy()
    grad[label] -= 1.0
    return loss, grad
