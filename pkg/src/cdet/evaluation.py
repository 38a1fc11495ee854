"""Average precision (VOC all-points / 11-point, COCO 0.50:0.95) and false-positive taxonomy."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import iou_matrix

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
WEAK_OVERLAP = 0.1
FP_TYPES = ("Loc", "Sim", "Oth", "BG")


@dataclass(frozen=True)
class ScoredBox:
    """A detection of one class: image, score and corner-form box."""

    image_id: int
    score: float
    box: tuple[float, float, float, float]


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    tp: np.ndarray
    num_gt: int


def _sorted(dets: Sequence[ScoredBox]) -> list[int]:
    """Descending score; ties by lower image id, then input order."""
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].image_id, i))


def match_detections(
    dets: Sequence[ScoredBox],
    gts: Mapping[int, np.ndarray],
    iou_threshold: float,
) -> tuple[list[int], np.ndarray]:
    """Greedy matching of score-sorted detections against one class's GT.

    Each detection takes the highest-overlap GT of its image that is still
    unmatched, provided the overlap reaches ``iou_threshold``; anything else
    (including duplicates) is a false positive.

    Returns:
        Visiting order (indices into ``dets``) and a parallel 0/1 TP array.
    """
    order = _sorted(dets)
    taken = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    tp = np.zeros(len(order), dtype=np.int64)
    for rank, i in enumerate(order):
        d = dets[i]
        g = gts.get(d.image_id)
        if g is None or len(g) == 0:
            continue
        ov = iou_matrix(np.array([d.box]), g)[0]
        ov[taken[d.image_id]] = -1.0
        j = int(np.argmax(ov))
        if ov[j] >= iou_threshold:
            taken[d.image_id][j] = True
            tp[rank] = 1
    return order, tp


def pr_curve(dets: Sequence[ScoredBox], gts: Mapping[int, np.ndarray], iou_threshold: float) -> PRCurve:
    num_gt = int(sum(len(v) for v in gts.values()))
    _, tp = match_detections(dets, gts, iou_threshold)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / num_gt if num_gt else np.zeros(len(tp))
    precision = ctp / np.maximum(ctp + cfp, 1)
    return PRCurve(recall.astype(np.float64), precision.astype(np.float64), tp, num_gt)


def ap_from_curve(recall: np.ndarray, precision: np.ndarray, eleven_point: bool = False) -> float:
    """Area under the interpolated precision envelope."""
    if eleven_point:
        ap = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            p = precision[recall >= t]
            ap += (p.max() if p.size else 0.0) / 11.0
        return float(ap)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision(
    dets: Sequence[ScoredBox],
    gts: Mapping[int, np.ndarray],
    iou_threshold: float = 0.5,
    eleven_point: bool = False,
) -> float:
    """AP of one class. No GT gives 0 (the caller decides whether to skip the class)."""
    curve = pr_curve(dets, gts, iou_threshold)
    if curve.num_gt == 0:
        return 0.0
    return ap_from_curve(curve.recall, curve.precision, eleven_point)


def coco_ap(dets: Sequence[ScoredBox], gts: Mapping[int, np.ndarray], eleven_point: bool = False) -> float:
    return float(np.mean([average_precision(dets, gts, t, eleven_point) for t in COCO_THRESHOLDS]))


# ---------------------------------------------------------------- dataset-level


@dataclass
class Dataset:
    """Detections and ground truth grouped by class.

    ``dets[c]`` lists ScoredBox; ``gts[c][image_id]`` is an ``(K, 4)`` array.
    ``gt_all[image_id]`` holds ``(boxes, labels)`` across classes for the
    taxonomy.
    """

    dets: dict[int, list[ScoredBox]] = field(default_factory=lambda: defaultdict(list))
    gts: dict[int, dict[int, np.ndarray]] = field(default_factory=lambda: defaultdict(dict))
    gt_all: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @classmethod
    def build(cls, detections: Iterable[tuple[int, int, float, Sequence[float]]], annotations) -> "Dataset":
        """``detections`` are ``(image_id, class_id, score, box)``; ``annotations``
        are objects with ``image_id``, ``labels`` and ``boxes``."""
        ds = cls()
        for ann in annotations:
            boxes = np.array(ann.boxes, dtype=np.float64).reshape(-1, 4)
            labels = np.array(ann.labels, dtype=np.int64)
            ds.gt_all[ann.image_id] = (boxes, labels)
            for c in np.unique(labels):
                ds.gts[int(c)][ann.image_id] = boxes[labels == c]
        for iid, cid, score, box in detections:
            ds.dets[int(cid)].append(ScoredBox(int(iid), float(score), tuple(float(v) for v in box)))
        return ds

    def classes(self) -> list[int]:
        return sorted(set(self.gts) | set(self.dets))


@dataclass
class EvalReport:
    ap50: dict[int, float]
    coco: dict[int, float]
    curves: dict[int, PRCurve]
    fp_counts: dict[int, dict[str, int]]
    eleven_point: bool = False

    @property
    def map50(self) -> float:
        return float(np.mean(list(self.ap50.values()))) if self.ap50 else 0.0

    @property
    def coco_map(self) -> float:
        return float(np.mean(list(self.coco.values()))) if self.coco else 0.0

    def format(self, class_names: Mapping[int, str] | None = None) -> str:
        names = class_names or {}
        mode = "11-point" if self.eleven_point else "all-points"
        lines = [f"interpolation\t{mode}", "class\tname\tAP@0.5\tAP@[.5:.95]\tLoc\tSim\tOth\tBG"]
        for c in sorted(self.ap50):
            fp = self.fp_counts.get(c, {})
            lines.append(
                f"{c}\t{names.get(c, str(c))}\t{self.ap50[c]:.6f}\t{self.coco[c]:.6f}\t"
                + "\t".join(str(fp.get(t, 0)) for t in FP_TYPES)
            )
        lines.append(f"mAP@0.5\t{self.map50:.6f}")
        lines.append(f"mAP@[.5:.95]\t{self.coco_map:.6f}")
        return "\n".join(lines) + "\n"

    def curve_points(self, c: int) -> str:
        cur = self.curves[c]
        return "".join(f"{r:.6f}\t{p:.6f}\n" for r, p in zip(cur.recall, cur.precision))


def evaluate(
    ds: Dataset,
    similar_groups: Sequence[Sequence[int]] | None = None,
    eleven_point: bool = False,
) -> EvalReport:
    """Per-class AP@0.5, COCO-style AP and FP taxonomy.

    Classes with neither GT nor detections are skipped; classes with
    detections but no GT score 0.
    """
    ap50, coco, curves, fps = {}, {}, {}, {}
    for c in ds.classes():
        dets = ds.dets.get(c, [])
        gts = ds.gts.get(c, {})
        n_gt = sum(len(v) for v in gts.values())
        if n_gt == 0 and not dets:
            continue
        curves[c] = pr_curve(dets, gts, 0.5)
        ap50[c] = average_precision(dets, gts, 0.5, eleven_point)
        coco[c] = coco_ap(dets, gts, eleven_point)
        fps[c] = dict(fp_taxonomy(c, dets, gts, ds.gt_all, similar_groups))
    return EvalReport(ap50, coco, curves, fps, eleven_point)


# ---------------------------------------------------------------- FP taxonomy


def similarity_lookup(groups: Sequence[Sequence[int]] | None) -> dict[int, set[int]]:
    out: dict[int, set[int]] = defaultdict(set)
    for g in groups or ():
        for a in g:
            out[int(a)].update(int(b) for b in g if b != a)
    return out


def classify_false_positive(
    cls: int,
    box: Sequence[float],
    image_boxes: np.ndarray,
    image_labels: np.ndarray,
    similar: set[int],
) -> str:
    """Loc, Sim, Oth or BG for one false positive of class ``cls``.

    Loc: overlaps a same-class GT by at least the weak threshold (0.1);
    this includes duplicates of an already matched object. Sim / Oth:
    overlaps a GT of a similar / dissimilar class by at least 0.1.
    BG: everything else.
    """
    if len(image_boxes) == 0:
        return "BG"
    ov = iou_matrix(np.array([box], dtype=np.float64), image_boxes)[0]
    same = image_labels == cls
    if np.any(same) and ov[same].max() >= WEAK_OVERLAP:
        return "Loc"
    sim = np.array([int(l) in similar for l in image_labels], dtype=bool) & ~same
    if np.any(sim) and ov[sim].max() >= WEAK_OVERLAP:
        return "Sim"
    oth = ~same & ~sim
    if np.any(oth) and ov[oth].max() >= WEAK_OVERLAP:
        return "Oth"
    return "BG"


def fp_taxonomy(
    cls: int,
    dets: Sequence[ScoredBox],
    gts: Mapping[int, np.ndarray],
    gt_all: Mapping[int, tuple[np.ndarray, np.ndarray]],
    similar_groups: Sequence[Sequence[int]] | None = None,
    iou_threshold: float = 0.5,
) -> Counter:
    """Counts of each FP type among the false positives at ``iou_threshold``."""
    lookup = similarity_lookup(similar_groups)
    order, tp = match_detections(dets, gts, iou_threshold)
    counts: Counter = Counter({t: 0 for t in FP_TYPES})
    empty = (np.zeros((0, 4)), np.zeros(0, dtype=np.int64))
    for i, hit in zip(order, tp):
        if hit:
            continue
        boxes, labels = gt_all.get(dets[i].image_id, empty)
        counts[classify_false_positive(cls, dets[i].box, boxes, labels, lookup.get(cls, set()))] += 1
    return counts
