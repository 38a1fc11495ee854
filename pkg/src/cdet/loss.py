"""Joint two-stage detection loss with analytic gradients.

The objective is

    1/N_arm * (sum_i Lb(p_i, [l_i >= 1]) + sum_i [l_i >= 1] Lr(x_i, g_i))
  + 1/N_odm * (sum_i Lm(c_i, l_i)      + sum_i [l_i >= 1] Lr(t_i, g_i))

where classification sums run over positives plus mined negatives and a
stage whose positive count is zero contributes exactly nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import VARIANCES, decode
from .matching import (
    POSITIVE,
    GroundTruth,
    MatchAssignment,
    apply_filter,
    filter_negatives,
    match,
    mine_hard_negatives,
)


@dataclass(frozen=True)
class LossConfig:
    theta: float = 0.99
    pos_threshold: float = 0.5
    neg_ratio: float = 3.0
    cascade: bool = True
    filtering: bool = True
    filter_positives: bool = False
    variances: tuple[float, float, float, float] = VARIANCES


@dataclass
class LossBreakdown:
    arm_cls: float = 0.0
    arm_reg: float = 0.0
    odm_cls: float = 0.0
    odm_reg: float = 0.0
    n_arm: int = 0
    n_odm: int = 0

    @property
    def total(self) -> float:
        return self.arm_cls + self.arm_reg + self.odm_cls + self.odm_reg

    def as_record(self) -> dict:
        return {
            "arm_cls": self.arm_cls,
            "arm_reg": self.arm_reg,
            "odm_cls": self.odm_cls,
            "odm_reg": self.odm_reg,
            "n_arm": self.n_arm,
            "n_odm": self.n_odm,
            "total": self.total,
        }


@dataclass
class ImagePlan:
    """Frozen targets for one image: what the loss sums over."""

    arm: MatchAssignment | None
    arm_mined: np.ndarray
    odm: MatchAssignment
    odm_mined: np.ndarray
    refined: np.ndarray
    filtered: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


# ---------------------------------------------------------------- primitives


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    lsm = log_softmax(logits)
    rows = np.arange(len(labels))
    loss = -lsm[rows, labels]
    grad = np.exp(lsm)
    grad[rows, labels] -= 1.0
    return loss, grad


def smooth_l1(diff: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise 0.5 x^2 for |x| < 1, else |x| - 0.5; returns (value, d/dx)."""
    d = np.asarray(diff, dtype=np.float64)
    a = np.abs(d)
    small = a < 1.0
    value = np.where(small, 0.5 * d * d, a - 0.5)
    grad = np.where(small, d, np.sign(d))
    return value, grad


def smooth_l1_loss(pred, target) -> float:
    return float(smooth_l1(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))[0].sum())


def binary_cls_loss(logits: np.ndarray, objectness: np.ndarray, normalizer: float) -> float:
    """Two-class cross-entropy summed over rows and divided by ``normalizer``."""
    if normalizer <= 0:
        return 0.0
    loss, _ = cross_entropy(logits, np.asarray(objectness, dtype=np.int64))
    return float(loss.sum() / normalizer)


def multi_cls_loss(logits: np.ndarray, labels: np.ndarray, normalizer: float) -> float:
    if normalizer <= 0:
        return 0.0
    loss, _ = cross_entropy(logits, labels)
    return float(loss.sum() / normalizer)


# ---------------------------------------------------------------- planning


def plan_targets(
    arm: np.ndarray | None,
    odm: np.ndarray,
    anchors: np.ndarray,
    gts: list[GroundTruth],
    cfg: LossConfig,
) -> list[ImagePlan]:
    """Match, refine, filter and mine for every image of the batch.

    ``arm`` is ``(N, A, 6)`` or None when the refinement stage is absent;
    ``odm`` is ``(N, A, c + 4)``. Refined anchors come from the current ARM
    offsets and are treated as constants downstream.
    """
    plans = []
    for i, gt in enumerate(gts):
        if arm is not None:
            a_logits = arm[i, :, :2].astype(np.float64)
            arm_assign = match(anchors, gt, cfg.pos_threshold, cfg.variances)
            bg_loss = -log_softmax(a_logits)[:, 0]
            arm_mined = mine_hard_negatives(bg_loss, arm_assign, cfg.neg_ratio).indices
            if cfg.cascade:
                refined = decode(anchors, arm[i, :, 2:6].astype(np.float64), cfg.variances)
            else:
                refined = np.asarray(anchors, dtype=np.float64)
            if cfg.filtering:
                e = np.exp(a_logits - a_logits.max(axis=1, keepdims=True))
                neg_conf = e[:, 0] / e.sum(axis=1)
                filtered = filter_negatives(neg_conf, cfg.theta)
            else:
                filtered = np.zeros(0, dtype=np.int64)
        else:
            arm_assign, arm_mined = None, np.zeros(0, dtype=np.int64)
            refined = np.asarray(anchors, dtype=np.float64)
            filtered = np.zeros(0, dtype=np.int64)
        if cfg.cascade and arm is not None:
            odm_assign = match(refined, gt, cfg.pos_threshold, cfg.variances)
        else:
            odm_assign = arm_assign if arm_assign is not None else match(refined, gt, cfg.pos_threshold, cfg.variances)
        odm_assign = apply_filter(odm_assign, filtered, cfg.filter_positives)
        bg_loss = -log_softmax(odm[i, :, :-4].astype(np.float64))[:, 0]
        odm_mined = mine_hard_negatives(bg_loss, odm_assign, cfg.neg_ratio).indices
        plans.append(ImagePlan(arm_assign, arm_mined, odm_assign, odm_mined, refined, filtered))
    return plans


# ---------------------------------------------------------------- total loss


def total_loss(
    arm: np.ndarray | None, odm: np.ndarray, plans: list[ImagePlan]
) -> tuple[LossBreakdown, np.ndarray | None, np.ndarray]:
    """Loss value and gradients w.r.t. ``arm`` and ``odm`` under frozen ``plans``."""
    out = LossBreakdown()
    g_arm = None if arm is None else np.zeros(arm.shape, dtype=np.float64)
    g_odm = np.zeros(odm.shape, dtype=np.float64)
    if arm is not None:
        out.n_arm = sum(p.arm.num_positives for p in plans)
    out.n_odm = sum(p.odm.num_positives for p in plans)

    if arm is not None and out.n_arm > 0:
        norm = float(out.n_arm)
        for i, p in enumerate(plans):
            pos = np.flatnonzero(p.arm.status == POSITIVE)
            rows = np.union1d(pos, p.arm_mined)
            labels = (p.arm.status[rows] == POSITIVE).astype(np.int64)
            loss, grad = cross_entropy(arm[i, rows, :2], labels)
            out.arm_cls += float(loss.sum()) / norm
            g_arm[i, rows, :2] = grad / norm
            if len(pos):
                val, grad = smooth_l1(arm[i, pos, 2:6].astype(np.float64) - p.arm.g_star[pos])
                out.arm_reg += float(val.sum()) / norm
                g_arm[i, pos, 2:6] = grad / norm

    if out.n_odm > 0:
        norm = float(out.n_odm)
        for i, p in enumerate(plans):
            pos = np.flatnonzero(p.odm.status == POSITIVE)
            rows = np.union1d(pos, p.odm_mined)
            loss, grad = cross_entropy(odm[i, rows, :-4], p.odm.l_star[rows])
            out.odm_cls += float(loss.sum()) / norm
            g_odm[i, rows, :-4] = grad / norm
            if len(pos):
                val, grad = smooth_l1(odm[i, pos, -4:].astype(np.float64) - p.odm.g_star[pos])
                out.odm_reg += float(val.sum()) / norm
                g_odm[i, pos, -4:] = grad / norm
    return out, g_arm, g_odm


def compute(
    arm: np.ndarray | None,
    odm: np.ndarray,
    anchors: np.ndarray,
    gts: list[GroundTruth],
    cfg: LossConfig,
) -> tuple[LossBreakdown, np.ndarray | None, np.ndarray, list[ImagePlan]]:
    plans = plan_targets(arm, odm, anchors, gts, cfg)
    out, g_arm, g_odm = total_loss(arm, odm, plans)
    return out, g_arm, g_odm, plans

