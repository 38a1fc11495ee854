"""Anchor-to-ground-truth assignment, negative anchor filtering, hard negative mining."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import VARIANCES, as_boxes, encode, iou_matrix

NEGATIVE = 0
POSITIVE = 1
FILTERED = 2


@dataclass(frozen=True)
class GroundTruth:
    boxes: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        boxes = as_boxes(self.boxes).astype(np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(boxes) != len(labels):
            raise ValueError(f"{len(boxes)} boxes but {len(labels)} labels")
        if np.any(labels < 1):
            raise ValueError("ground-truth labels must be >= 1 (0 is background)")
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    def check_classes(self, num_classes: int) -> None:
        if np.any(self.labels >= num_classes):
            raise ValueError(f"label out of range for {num_classes} classes")


@dataclass
class MatchAssignment:
    """Per-anchor status, matched GT index (-1 if none), class label and target offsets."""

    status: np.ndarray
    matched_gt: np.ndarray
    l_star: np.ndarray
    g_star: np.ndarray

    @property
    def positives(self) -> np.ndarray:
        return self.status == POSITIVE

    @property
    def negatives(self) -> np.ndarray:
        return self.status == NEGATIVE

    @property
    def num_positives(self) -> int:
        return int(np.count_nonzero(self.status == POSITIVE))

    def records(self):
        """Line-delimited debug dump: anchor, status, gt, label, target offsets."""
        names = {NEGATIVE: "neg", POSITIVE: "pos", FILTERED: "filtered"}
        for i, (s, m, l, g) in enumerate(zip(self.status, self.matched_gt, self.l_star, self.g_star)):
            yield f"{i}\t{names[int(s)]}\t{m}\t{l}\t" + "\t".join(f"{v:.6f}" for v in g)


@dataclass(frozen=True)
class MiningSelection:
    indices: np.ndarray
    neg_to_pos_ratio: float


def match(
    anchors: np.ndarray,
    gt: GroundTruth,
    pos_threshold: float = 0.5,
    variances=VARIANCES,
) -> MatchAssignment:
    """Two-step matching.

    Step one is a greedy bipartite pass: repeatedly take the largest
    remaining overlap in the GT x anchor matrix (ties go to the lower GT
    index, then the lower anchor index) and bind that pair, so each GT
    claims one anchor and a contested anchor goes to the GT overlapping it
    most. Step two makes every unclaimed anchor whose best overlap exceeds
    ``pos_threshold`` positive for that GT.
    """
    anchors = as_boxes(anchors)
    n = len(anchors)
    if n == 0:
        raise ValueError("match needs at least one anchor")
    status = np.full(n, NEGATIVE, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    l_star = np.zeros(n, dtype=np.int64)
    g_star = np.zeros((n, 4), dtype=np.float64)
    if len(gt) == 0:
        return MatchAssignment(status, matched, l_star, g_star)

    overlaps = iou_matrix(gt.boxes, anchors)  # (G, A)

    work = overlaps.copy()
    for _ in range(min(len(gt), n)):
        g, a = np.unravel_index(int(np.argmax(work)), work.shape)
        matched[a] = g
        work[g, :] = -1.0
        work[:, a] = -1.0

    best_gt = np.argmax(overlaps, axis=0)
    best_iou = overlaps[best_gt, np.arange(n)]
    step2 = (matched < 0) & (best_iou > pos_threshold)
    matched[step2] = best_gt[step2]

    pos = matched >= 0
    status[pos] = POSITIVE
    l_star[pos] = gt.labels[matched[pos]]
    g_star[pos] = encode(anchors[pos], gt.boxes[matched[pos]], variances)
    return MatchAssignment(status, matched, l_star, g_star)


def filter_negatives(arm_neg_confidence: np.ndarray, theta: float = 0.99) -> np.ndarray:
    """Indices of anchors whose ARM background confidence exceeds ``theta``."""
    conf = np.asarray(arm_neg_confidence, dtype=np.float64).reshape(-1)
    return np.flatnonzero(conf > theta)


def apply_filter(assignment: MatchAssignment, filtered: np.ndarray, filter_positives: bool = False) -> MatchAssignment:
    """Mark filtered anchors; they then drop out of ODM loss terms.

    With ``filter_positives=False`` positive anchors keep their status
    regardless of ARM confidence.
    """
    status = assignment.status.copy()
    mask = np.zeros(len(status), dtype=bool)
    mask[np.asarray(filtered, dtype=np.int64)] = True
    if not filter_positives:
        mask &= status != POSITIVE
    status[mask] = FILTERED
    keep = status == POSITIVE
    return MatchAssignment(
        status,
        np.where(keep, assignment.matched_gt, -1),
        np.where(keep, assignment.l_star, 0),
        np.where(keep[:, None], assignment.g_star, 0.0),
    )


def mine_hard_negatives(cls_loss: np.ndarray, assignment: MatchAssignment, ratio: float = 3.0) -> MiningSelection:
    """Pick the highest-loss negatives, at most ``ceil(ratio * max(positives, 1))``.

    Filtered anchors are never candidates. Equal losses resolve to the lower index.
    """
    loss = np.asarray(cls_loss, dtype=np.float64).reshape(-1)
    candidates = np.flatnonzero(assignment.status == NEGATIVE)
    quota = math.ceil(ratio * max(assignment.num_positives, 1))
    quota = min(quota, len(candidates))
    order = np.lexsort((candidates, -loss[candidates]))
    chosen = np.sort(candidates[order[:quota]])
    return MiningSelection(chosen, ratio)
