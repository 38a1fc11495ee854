"""Box arithmetic, jaccard overlap, offset coding and greedy NMS.

Boxes are corner-form ``(xmin, ymin, xmax, ymax)`` in pixels. Area is
``(xmax - xmin) * (ymax - ymin)``; there is no +1 pixel convention.
Array-valued functions take ``(N, 4)`` arrays; the :class:`Box` type is the
scalar face of the same arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

VARIANCES = (0.1, 0.1, 0.2, 0.2)

# exp() guard on decoded log-size offsets (a 1000/16 size ratio)
MAX_LOG_SCALE = math.log(1000.0 / 16.0)


@dataclass(frozen=True)
class Box:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax >= self.xmin and self.ymax >= self.ymin):
            raise ValueError(f"invalid box {self.as_tuple()}")

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    def center(self) -> tuple[float, float, float, float]:
        w = self.xmax - self.xmin
        h = self.ymax - self.ymin
        return (self.xmin + w / 2.0, self.ymin + h / 2.0, w, h)

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.xmin, self.ymin, self.xmax, self.ymax)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)


@dataclass(frozen=True)
class BoxDelta:
    dx: float
    dy: float
    dw: float
    dh: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: Box


def as_boxes(boxes) -> np.ndarray:
    """Coerce a Box, a sequence of Boxes or an array-like to an ``(N, 4)`` array."""
    if isinstance(boxes, Box):
        return boxes.as_array()[None, :]
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4)
    boxes = list(boxes)
    if boxes and isinstance(boxes[0], Box):
        return np.array([b.as_tuple() for b in boxes], dtype=np.float64)
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def to_center(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes)
    wh = boxes[..., 2:] - boxes[..., :2]
    return np.concatenate([boxes[..., :2] + wh / 2.0, wh], axis=-1)


def to_corner(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes)
    half = boxes[..., 2:] / 2.0
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes)
    return np.clip(boxes[..., 2] - boxes[..., 0], 0, None) * np.clip(
        boxes[..., 3] - boxes[..., 1], 0, None
    )


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise jaccard overlap between ``(N, 4)`` and ``(M, 4)`` boxes.

    Pairs with zero union get 0.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area(a)[:, None] + area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def iou(a: Box, b: Box) -> float:
    return float(iou_matrix(as_boxes(a), as_boxes(b))[0, 0])


def encode(anchors, targets, variances: Sequence[float] = VARIANCES) -> np.ndarray:
    """Center/log-size offsets of ``targets`` relative to ``anchors``.

    Args:
        anchors: (N, 4) corner-form boxes with positive width and height.
        targets: (N, 4) corner-form boxes with positive width and height.
        variances: scale divisors for (dx, dy, dw, dh).

    Returns:
        (N, 4) offsets ``(dx, dy, dw, dh)``.
    """
    a = to_center(as_boxes(anchors))
    t = to_center(as_boxes(targets))
    if np.any(a[:, 2:] <= 0):
        raise ValueError("encode: anchor with zero width or height")
    if np.any(t[:, 2:] <= 0):
        raise ValueError("encode: target with zero width or height")
    v = np.asarray(variances, dtype=np.float64)
    dxy = (t[:, :2] - a[:, :2]) / (a[:, 2:] * v[:2])
    dwh = np.log(t[:, 2:] / a[:, 2:]) / v[2:]
    return np.concatenate([dxy, dwh], axis=1)


def decode(
    anchors,
    deltas,
    variances: Sequence[float] = VARIANCES,
    clip_to: tuple[float, float] | None = None,
) -> np.ndarray:
    """Inverse of :func:`encode`.

    ``clip_to`` is an image extent ``(W, H)``; when given, the output is
    clamped to ``[0, W] x [0, H]``. Log-size offsets are capped at
    ``MAX_LOG_SCALE`` after variance scaling so exp() cannot overflow.
    """
    a = to_center(as_boxes(anchors))
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if not np.all(np.isfinite(d)):
        raise ValueError("decode: non-finite box delta")
    v = np.asarray(variances, dtype=np.float64)
    cxy = a[:, :2] + d[:, :2] * v[:2] * a[:, 2:]
    wh = a[:, 2:] * np.exp(np.minimum(d[:, 2:] * v[2:], MAX_LOG_SCALE))
    out = to_corner(np.concatenate([cxy, wh], axis=1))
    if clip_to is not None:
        w, h = clip_to
        out[:, 0::2] = np.clip(out[:, 0::2], 0.0, w)
        out[:, 1::2] = np.clip(out[:, 1::2], 0.0, h)
    return out


def encode_box(anchor: Box, target: Box, variances=VARIANCES) -> BoxDelta:
    return BoxDelta(*encode(as_boxes(anchor), as_boxes(target), variances)[0].tolist())


def decode_box(anchor: Box, delta: BoxDelta, variances=VARIANCES, clip_to=None) -> Box:
    return Box(*decode(as_boxes(anchor), delta.as_array(), variances, clip_to)[0].tolist())


def nms_indices(boxes: np.ndarray, scores: np.ndarray, overlap: float, keep: int | None = None) -> np.ndarray:
    """Greedy NMS over one class.

    Candidates are visited by descending score, ties by lower index. A
    candidate survives unless its overlap with an already kept box exceeds
    ``overlap``.

    Returns:
        Indices of survivors in visiting order, at most ``keep`` of them.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    limit = len(scores) if keep is None else keep
    order = np.argsort(-scores, kind="stable")
    areas = area(boxes)
    kept: list[int] = []
    while order.size > 0 and len(kept) < limit:
        i = order[0]
        kept.append(int(i))
        rest = order[1:]
        lt = np.maximum(boxes[i, :2], boxes[rest, :2])
        rb = np.minimum(boxes[i, 2:], boxes[rest, 2:])
        wh = np.clip(rb - lt, 0, None)
        inter = wh[:, 0] * wh[:, 1]
        union = areas[i] + areas[rest] - inter
        ovr = np.zeros_like(inter)
        np.divide(inter, union, out=ovr, where=union > 0)
        order = rest[ovr <= overlap]
    return np.array(kept, dtype=np.int64)


def nms(dets: Iterable[Detection], overlap: float = 0.45, keep: int = 200) -> list[Detection]:
    dets = list(dets)
    if not dets:
        return []
    boxes = np.array([d.box.as_tuple() for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    return [dets[i] for i in nms_indices(boxes, scores, overlap, keep)]
