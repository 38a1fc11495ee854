"""Training loop and the filtered two-step inference cascade."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import loss as L
from . import microdiff as md
from .anchors import generate
from .data import Annotation, augment, normalize
from .errors import ConfigError, NumericAbort
from .geometry import VARIANCES, Box, Detection, decode, nms_indices
from .network import NetworkConfig, RefineNet

log = logging.getLogger(__name__)

TOP_K_CANDIDATES = 400
NMS_OVERLAP = 0.45
KEEP_TOP_K = 200


@dataclass(frozen=True)
class TrainConfig:
    lr_schedule: tuple[tuple[int, float], ...] = ((0, 1e-3),)
    warmup_steps: int = 0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 4
    max_steps: int = 1000
    seed: int = 0
    theta: float = 0.99
    filter_positives: bool = False
    cascade_enabled: bool = True
    tcb_enabled: bool = True
    filtering_enabled: bool = True
    augment: bool = True
    neg_ratio: float = 3.0
    pos_threshold: float = 0.5
    init_scheme: str = "xavier"
    head_init_std: float | None = None

    def __post_init__(self):
        sched = tuple((int(s), float(lr)) for s, lr in self.lr_schedule)
        object.__setattr__(self, "lr_schedule", sched)
        if not sched or sched[0][0] != 0:
            raise ConfigError("lr_schedule must start at step 0")
        if any(b[0] <= a[0] for a, b in zip(sched, sched[1:])):
            raise ConfigError("lr_schedule steps must ascend")
        if any(lr <= 0 for _, lr in sched):
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ConfigError("batch_size must be >= 1 and max_steps >= 0")
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError("theta must lie in [0, 1]")

    def lr_at(self, step: int) -> float:
        lr = self.lr_schedule[0][1]
        for s, v in self.lr_schedule:
            if step >= s:
                lr = v
        if self.warmup_steps and step < self.warmup_steps:
            lr *= (step + 1) / self.warmup_steps
        return lr

    @property
    def effective_theta(self) -> float:
        return self.theta if self.filtering_enabled else 1.0

    def loss_config(self) -> L.LossConfig:
        return L.LossConfig(
            theta=self.effective_theta,
            pos_threshold=self.pos_threshold,
            neg_ratio=self.neg_ratio,
            cascade=self.cascade_enabled,
            filtering=self.filtering_enabled,
            filter_positives=self.filter_positives,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_schedule"] = [list(x) for x in self.lr_schedule]
        return d


def network_config_for(base: NetworkConfig, train: TrainConfig) -> NetworkConfig:
    """Apply the ablation switches to the graph structure.

    With TCBs cut and neither the cascade nor filtering in use, the
    refinement heads have no consumer and the detector degenerates to a
    one-stage multi-class head on backbone features.
    """
    arm = train.cascade_enabled or train.filtering_enabled or train.tcb_enabled
    return replace(base, tcb_enabled=train.tcb_enabled, arm_enabled=arm)


@dataclass
class InferStats:
    kept_anchors: int = 0
    after_filter: int = 0
    after_topk: int = 0
    after_nms: int = 0
    final: int = 0


class Detector:
    """A network together with its anchors and inference settings."""

    def __init__(self, net_cfg: NetworkConfig, train_cfg: TrainConfig | None = None, dtype=np.float32):
        self.train_cfg = train_cfg or TrainConfig()
        self.net_cfg = network_config_for(net_cfg, self.train_cfg)
        self.net = RefineNet(self.net_cfg, dtype)
        self.anchors = generate(self.net_cfg.anchor_spec()).boxes

    def initialize(self) -> None:
        cfg = self.train_cfg
        self.net.initialize(cfg.seed, cfg.init_scheme, cfg.head_init_std)

    @property
    def store(self) -> md.ParameterStore:
        return self.net.store

    def config_echo(self) -> dict:
        return {"network": self.net_cfg.to_dict(), "train": self.train_cfg.to_dict()}

    def save(self, path) -> None:
        md.save_checkpoint(path, self.store, self.config_echo())

    @classmethod
    def load(cls, path, expect: NetworkConfig | None = None) -> "Detector":
        config, values = md.load_checkpoint(path)
        try:
            net_cfg = NetworkConfig.from_dict(config["network"])
            train_cfg = TrainConfig(**{k: v for k, v in config["train"].items()})
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"checkpoint {path} carries no usable config echo") from exc
        if expect is not None and network_config_for(expect, train_cfg) != net_cfg:
            raise ConfigError(f"checkpoint {path} topology does not match the requested network config")
        det = cls(net_cfg, train_cfg)
        try:
            det.store.load_values(values)
        except ValueError as exc:
            raise ConfigError(f"checkpoint {path} does not fit its own config: {exc}") from exc
        return det

    # inference ----------------------------------------------------------

    def forward(self, images_u8: np.ndarray):
        return self.net.forward(normalize(images_u8))

    def infer(self, images_u8: np.ndarray, theta: float | None = None, with_stats: bool = False):
        """Detections for ``(N, H, W)`` uint8 images."""
        out = self.forward(images_u8)
        arm = None if out.arm is None else out.arm.value
        theta = self.train_cfg.effective_theta if theta is None else theta
        results, stats = [], []
        for i in range(len(images_u8)):
            dets, st = decode_detections(
                None if arm is None else arm[i],
                out.odm.value[i],
                self.anchors,
                self.net_cfg.image_size,
                theta=theta,
                cascade=self.train_cfg.cascade_enabled,
            )
            results.append(dets)
            stats.append(st)
        return (results, stats) if with_stats else results


def decode_detections(
    arm: np.ndarray | None,
    odm: np.ndarray,
    anchors: np.ndarray,
    image_size: tuple[int, int],
    theta: float = 0.99,
    cascade: bool = True,
    top_k: int = TOP_K_CANDIDATES,
    nms_overlap: float = NMS_OVERLAP,
    keep_top_k: int = KEEP_TOP_K,
    variances=VARIANCES,
) -> tuple[list[Detection], InferStats]:
    """One image: filter, refine, decode, top-k, per-class NMS, keep-top-k.

    ``arm`` is ``(A, 6)`` or None; ``odm`` is ``(A, c + 4)``.
    """
    st = InferStats()
    a = np.arange(len(anchors))
    if arm is not None:
        logits = arm[:, :2].astype(np.float64)
        neg_conf = md.softmax_array(logits)[:, 0]
        a = np.flatnonzero(~(neg_conf > theta))
        ref = anchors[a]
        if cascade:
            ref = decode(ref, arm[a, 2:6].astype(np.float64), variances)
    else:
        ref = anchors
    st.kept_anchors = len(a)
    scores = md.softmax_array(odm[a, :-4].astype(np.float64))[:, 1:]
    boxes = decode(ref, odm[a, -4:].astype(np.float64), variances, clip_to=image_size)
    ncls = scores.shape[1]
    st.after_filter = scores.size

    flat = scores.ravel()
    order = np.argsort(-flat, kind="stable")[:top_k]
    st.after_topk = len(order)
    cand_cls = order % ncls

    kept = []
    for k in range(ncls):
        sel = order[cand_cls == k]
        if len(sel) == 0:
            continue
        idx = nms_indices(boxes[sel // ncls], flat[sel], nms_overlap)
        kept.extend(sel[idx].tolist())
    st.after_nms = len(kept)
    kept = np.array(kept, dtype=np.int64)
    kept = kept[np.lexsort((kept, -flat[kept]))][:keep_top_k] if len(kept) else kept
    st.final = len(kept)
    dets = [
        Detection(int(j % ncls) + 1, float(flat[j]), Box(*boxes[j // ncls].tolist()))
        for j in kept
    ]
    return dets, st


# ---------------------------------------------------------------- training


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: L.LossBreakdown

    def to_json(self) -> str:
        rec = {"step": self.step, "lr": self.lr}
        rec.update(self.loss.as_record())
        return json.dumps(rec, sort_keys=True)


def train_step(
    det: Detector,
    images_u8: np.ndarray,
    anns: Sequence[Annotation],
    lr: float,
) -> L.LossBreakdown:
    cfg = det.train_cfg
    # overflow is detected below and reported as NumericAbort
    with np.errstate(over="ignore", invalid="ignore"):
        out = det.forward(images_u8)
    gts = [a.ground_truth() for a in anns]
    arm = None if out.arm is None else out.arm.value
    if not np.all(np.isfinite(out.odm.value)) or (arm is not None and not np.all(np.isfinite(arm))):
        raise NumericAbort("non-finite network output")
    try:
        breakdown, g_arm, g_odm, _ = L.compute(arm, out.odm.value, det.anchors, gts, cfg.loss_config())
    except ValueError as exc:
        raise NumericAbort(f"target construction failed: {exc}") from exc
    if not np.isfinite(breakdown.total):
        raise NumericAbort(f"non-finite loss {breakdown.as_record()}")
    tensors, grads = [out.odm], [g_odm]
    if out.arm is not None:
        tensors.append(out.arm)
        grads.append(g_arm)
    md.backward(tensors, grads)
    md.sgd_step(det.store, lr, cfg.momentum, cfg.weight_decay)
    return breakdown


def train(
    det: Detector,
    images_u8: np.ndarray,
    anns: Sequence[Annotation],
    on_step: Callable[[StepRecord], None] | None = None,
    initialize: bool = True,
) -> list[StepRecord]:
    """Run ``det.train_cfg.max_steps`` SGD steps over the given images.

    Batches are drawn epoch-wise from a seeded permutation; augmentation
    seeds derive from the same generator, so runs are reproducible.
    """
    cfg = det.train_cfg
    if initialize:
        det.initialize()
    rng = np.random.default_rng(cfg.seed + 1)
    n = len(anns)
    if n == 0 and cfg.max_steps > 0:
        raise ConfigError("no training images")
    perm = rng.permutation(n) if n else np.zeros(0, dtype=np.int64)
    cursor = 0
    records = []
    for step in range(cfg.max_steps):
        idx = []
        for _ in range(cfg.batch_size):
            if cursor >= n:
                perm, cursor = rng.permutation(n), 0
            idx.append(int(perm[cursor]))
            cursor += 1
        aug_seeds = rng.integers(0, 2**31, size=len(idx))
        batch_imgs, batch_anns = [], []
        for j, s in zip(idx, aug_seeds):
            img, ann = images_u8[j], anns[j]
            if cfg.augment:
                img, ann = augment(img, ann, int(s))
            batch_imgs.append(img)
            batch_anns.append(ann)
        lr = cfg.lr_at(step)
        try:
            breakdown = train_step(det, np.stack(batch_imgs), batch_anns, lr)
        except NumericAbort as exc:
            dump = [a.to_json() for a in batch_anns]
            raise NumericAbort(f"step {step}: {exc}; batch images {idx}; annotations {dump}") from exc
        rec = StepRecord(step, lr, breakdown)
        records.append(rec)
        if on_step is not None:
            on_step(rec)
    return records


def detect_all(det: Detector, images_u8: np.ndarray, image_ids: Iterable[int], batch: int = 16):
    """Yield ``(image_id, Detection)`` for every image, in input order."""
    ids = list(image_ids)
    for start in range(0, len(ids), batch):
        res = det.infer(images_u8[start : start + batch])
        for iid, dets in zip(ids[start : start + batch], res):
            for d in dets:
                yield iid, d


def format_detection(image_id: int, d: Detection) -> str:
    b = d.box
    return f"{image_id}\t{d.class_id}\t{d.score:.6f}\t{b.xmin:.4f}\t{b.ymin:.4f}\t{b.xmax:.4f}\t{b.ymax:.4f}"


def parse_detection(line: str) -> tuple[int, Detection]:
    parts = line.split("\t")
    if len(parts) != 7:
        raise ValueError(f"expected 7 fields, got {len(parts)}")
    iid, cls = int(parts[0]), int(parts[1])
    score = float(parts[2])
    return iid, Detection(cls, score, Box(*(float(v) for v in parts[3:])))


@dataclass
class Variant:
    name: str
    filtering: bool
    cascade: bool
    tcb: bool


ABLATION_VARIANTS = (
    Variant("full", True, True, True),
    Variant("no_filtering", False, True, True),
    Variant("no_cascade", False, False, True),
    Variant("no_tcb", False, False, False),
)


def variant_config(base: TrainConfig, v: Variant, seed: int) -> TrainConfig:
    return replace(base, filtering_enabled=v.filtering, cascade_enabled=v.cascade, tcb_enabled=v.tcb, seed=seed)



def evaluate_detector(det: Detector, images_u8: np.ndarray, anns: Sequence[Annotation], similar_groups=None):
    """Run inference over ``images_u8`` and score it against ``anns``."""
    from .evaluation import Dataset, evaluate

    dets = [
        (iid, d.class_id, d.score, d.box.as_tuple())
        for iid, d in detect_all(det, images_u8, [a.image_id for a in anns])
    ]
    return evaluate(Dataset.build(dets, anns), similar_groups)


# ---------------------------------------------------------------- ablation


@dataclass
class AblationResult:
    variant: str
    seed: int
    map50: float
    coco_map: float
    final_loss: float


def run_ablation(
    net_cfg: NetworkConfig,
    base: TrainConfig,
    train_data: tuple[np.ndarray, Sequence[Annotation]],
    test_data: tuple[np.ndarray, Sequence[Annotation]],
    seeds: Sequence[int],
    variants: Sequence[Variant] = ABLATION_VARIANTS,
    on_result: Callable[[AblationResult], None] | None = None,
    similar_groups=None,
) -> list[AblationResult]:
    """Train and score every variant under every seed with one shared budget."""
    results = []
    for v in variants:
        for seed in seeds:
            det = Detector(net_cfg, variant_config(base, v, seed))
            recs = train(det, *train_data)
            tail = [r.loss.total for r in recs[-100:]]
            rep = evaluate_detector(det, *test_data, similar_groups=similar_groups)
            res = AblationResult(v.name, seed, rep.map50, rep.coco_map, float(np.mean(tail)) if tail else float("nan"))
            log.info("ablation %s seed %d: mAP@0.5 %.4f", v.name, seed, rep.map50)
            results.append(res)
            if on_result is not None:
                on_result(res)
    return results


def ablation_medians(results: Sequence[AblationResult]) -> dict[str, float]:
    names = list(dict.fromkeys(r.variant for r in results))
    return {n: float(np.median([r.map50 for r in results if r.variant == n])) for n in names}


def format_ablation(results: Sequence[AblationResult]) -> str:
    seeds = sorted({r.seed for r in results})
    lines = ["variant\t" + "\t".join(f"seed{s}" for s in seeds) + "\tmedian_mAP@0.5"]
    med = ablation_medians(results)
    for name, m in med.items():
        by_seed = {r.seed: r.map50 for r in results if r.variant == name}
        cells = "\t".join(f"{100 * by_seed[s]:.2f}" if s in by_seed else "-" for s in seeds)
        lines.append(f"{name}\t{cells}\t{100 * m:.2f}")
    return "\n".join(lines) + "\n"
