"""Axis-aligned box utilities.

Boxes are ``(x_min, y_min, x_max, y_max)`` in continuous pixel coordinates;
arrays of boxes have shape (N, 4). Area is ``(x_max - x_min) * (y_max - y_min)``.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

# exp() guard for decoded width/height deltas
DELTA_CLAMP = math.log(1000.0 / 16.0)


class Box(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def validate(self) -> "Box":
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"degenerate box {tuple(self)}")
        return self


def as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 4)
    return arr.reshape(-1, 4)


def areas(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise intersection-over-union, shape (len(a), len(b))."""
    a, b = as_boxes(a), as_boxes(b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    ix0 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy0 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix1 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    union = areas(a)[:, None] + areas(b)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def overlap(a, b) -> float:
    """Intersection over union of two boxes; raises on degenerate input."""
    Box(*map(float, a)).validate()
    Box(*map(float, b)).validate()
    return float(iou_matrix([a], [b])[0, 0])


def encode(boxes, gt) -> np.ndarray:
    """Regression deltas (tx, ty, tw, th) taking ``boxes`` onto ``gt``."""
    b, g = as_boxes(boxes), as_boxes(gt)
    bw, bh = b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]
    gw, gh = g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]
    if np.any(bw <= 0) or np.any(bh <= 0) or np.any(gw <= 0) or np.any(gh <= 0):
        raise ValueError("encode: boxes must have positive width and height")
    tx = ((g[:, 0] + 0.5 * gw) - (b[:, 0] + 0.5 * bw)) / bw
    ty = ((g[:, 1] + 0.5 * gh) - (b[:, 1] + 0.5 * bh)) / bh
    return np.stack([tx, ty, np.log(gw / bw), np.log(gh / bh)], axis=1)


def decode(boxes, deltas, clamp: float = DELTA_CLAMP) -> np.ndarray:
    """Inverse of :func:`encode` (exact while |tw|, |th| <= clamp)."""
    b = as_boxes(boxes)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    bw, bh = b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]
    if np.any(bw <= 0) or np.any(bh <= 0):
        raise ValueError("decode: boxes must have positive width and height")
    cx = b[:, 0] + 0.5 * bw + d[:, 0] * bw
    cy = b[:, 1] + 0.5 * bh + d[:, 1] * bh
    w = bw * np.exp(np.minimum(d[:, 2], clamp))
    h = bh * np.exp(np.minimum(d[:, 3], clamp))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip(boxes, width: float, height: float) -> np.ndarray:
    b = as_boxes(boxes).copy()
    b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0, width)
    b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0, height)
    return b


def nms(boxes, scores, iou_thresh: float, max_keep: int | None = None) -> np.ndarray:
    """Greedy non-maximum suppression.

    Visits boxes by descending score (ties keep input order) and drops any box
    whose IoU with an already kept box exceeds ``iou_thresh``. Returns kept
    indices in visiting order, stopping after ``max_keep`` boxes.
    """
    b = as_boxes(boxes)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-s, kind="stable")
    x0, y0, x1, y1 = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    area = areas(b)
    keep = []
    limit = len(order) if max_keep is None else max_keep
    while order.size and len(keep) < limit:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        iw = np.maximum(np.minimum(x1[i], x1[rest]) - np.maximum(x0[i], x0[rest]), 0.0)
        ih = np.maximum(np.minimum(y1[i], y1[rest]) - np.maximum(y0[i], y0[rest]), 0.0)
        inter = iw * ih
        union = area[i] + area[rest] - inter
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        order = rest[iou <= iou_thresh]
    return np.asarray(keep, dtype=np.int64)
