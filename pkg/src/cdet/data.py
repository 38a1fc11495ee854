"""Synthetic shapes dataset, plain-text image/annotation I/O and flip/crop augmentation.

On-disk layout of a generated dataset::

    <root>/dataset.json        generation parameters
    <root>/annotations.jsonl   one JSON object per image
    <root>/images/<id>.pgm     plain (P2) graymap, maxval 255

Annotation line: ``{"image_id": 3, "width": 128, "height": 128,
"objects": [{"class_id": 1, "box": [x1, y1, x2, y2], "difficult": false}]}``.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataIOError
from .geometry import iou_matrix
from .matching import GroundTruth

SHAPES = ("rectangle", "ellipse", "triangle", "diamond", "cross")


@dataclass
class Annotation:
    image_id: int
    width: int
    height: int
    labels: list[int] = field(default_factory=list)
    boxes: list[tuple[float, float, float, float]] = field(default_factory=list)
    difficult: list[bool] = field(default_factory=list)

    def __post_init__(self):
        self.boxes = [tuple(float(v) for v in b) for b in self.boxes]
        self.labels = [int(v) for v in self.labels]
        if not self.difficult:
            self.difficult = [False] * len(self.labels)
        if not (len(self.boxes) == len(self.labels) == len(self.difficult)):
            raise ValueError("annotation boxes, labels and flags must have equal lengths")

    def ground_truth(self) -> GroundTruth:
        return GroundTruth(np.array(self.boxes, dtype=np.float64).reshape(-1, 4), np.array(self.labels, dtype=np.int64))

    def to_json(self) -> str:
        objs = [
            {"class_id": l, "box": [round(v, 4) for v in b], "difficult": d}
            for l, b, d in zip(self.labels, self.boxes, self.difficult)
        ]
        rec = {"image_id": self.image_id, "width": self.width, "height": self.height, "objects": objs}
        return json.dumps(rec, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Annotation":
        rec = json.loads(text)
        objs = rec["objects"]
        return cls(
            int(rec["image_id"]),
            int(rec["width"]),
            int(rec["height"]),
            [o["class_id"] for o in objs],
            [tuple(o["box"]) for o in objs],
            [bool(o.get("difficult", False)) for o in objs],
        )


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 0
    image_count: int = 100
    image_size: tuple[int, int] = (128, 128)
    classes: tuple[str, ...] = ("rectangle", "ellipse", "triangle")
    objects_per_image: tuple[int, int] = (1, 3)
    scale_range: tuple[float, float] = (0.15, 0.6)
    aspect_range: tuple[float, float] = (0.33, 3.0)
    overlap_cap: float = 0.3
    noise_level: float = 0.08

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "objects_per_image", tuple(int(v) for v in self.objects_per_image))
        object.__setattr__(self, "scale_range", tuple(float(v) for v in self.scale_range))
        object.__setattr__(self, "aspect_range", tuple(float(v) for v in self.aspect_range))
        lo, hi = self.scale_range
        if not (0 < lo <= hi < 1):
            raise ConfigError(f"scale_range must lie within (0, 1), got {self.scale_range}")
        if not (0 <= self.overlap_cap < 1):
            raise ConfigError(f"overlap_cap must lie in [0, 1), got {self.overlap_cap}")
        unknown = [c for c in self.classes if c not in SHAPES]
        if unknown or not self.classes:
            raise ConfigError(f"unknown shape classes {unknown}; choose from {SHAPES}")
        if self.objects_per_image[0] < 0 or self.objects_per_image[1] < self.objects_per_image[0]:
            raise ConfigError("objects_per_image must be an ascending nonnegative pair")
        if self.aspect_range[0] <= 0 or self.aspect_range[1] < self.aspect_range[0]:
            raise ConfigError("aspect_range must be an ascending positive pair")

    @property
    def num_classes(self) -> int:
        """Class count including background."""
        return len(self.classes) + 1

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# ---------------------------------------------------------------- rendering


def shape_mask(kind: str, cx: float, cy: float, w: float, h: float, width: int, height: int) -> np.ndarray:
    """Boolean mask of pixels whose centers fall inside the shape."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    dx = (xs - cx) / (w / 2.0)
    dy = (ys - cy) / (h / 2.0)
    if kind == "rectangle":
        return (np.abs(dx) <= 1) & (np.abs(dy) <= 1)
    if kind == "ellipse":
        return dx * dx + dy * dy <= 1
    if kind == "triangle":
        t = (dy + 1) / 2.0  # 0 at the apex row, 1 at the base
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t)
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= 1
    if kind == "cross":
        box = (np.abs(dx) <= 1) & (np.abs(dy) <= 1)
        return box & ((np.abs(dx) <= 0.33) | (np.abs(dy) <= 0.33))
    raise ValueError(f"unknown shape {kind!r}")


def tight_box(mask: np.ndarray) -> tuple[float, float, float, float] | None:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def render_scene(spec: SyntheticSpec, rng: np.random.Generator, image_id: int = 0) -> tuple[np.ndarray, Annotation]:
    """One grayscale image (uint8, H x W) and its annotation."""
    width, height = spec.image_size
    base = rng.uniform(70, 185)
    img = np.full((height, width), base, dtype=np.float64)
    img += rng.normal(0.0, spec.noise_level * 255.0, size=img.shape)
    count = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
    labels: list[int] = []
    boxes: list[tuple[float, float, float, float]] = []
    side = min(width, height)
    lo_a, hi_a = np.log(spec.aspect_range[0]), np.log(spec.aspect_range[1])
    for _ in range(count):
        for _attempt in range(50):
            cls = int(rng.integers(len(spec.classes)))
            size = rng.uniform(*spec.scale_range) * side
            aspect = float(np.exp(rng.uniform(lo_a, hi_a)))
            w = min(size * np.sqrt(aspect), width - 2.0)
            h = min(size / np.sqrt(aspect), height - 2.0)
            cx = rng.uniform(w / 2.0, width - w / 2.0)
            cy = rng.uniform(h / 2.0, height - h / 2.0)
            mask = shape_mask(spec.classes[cls], cx, cy, w, h, width, height)
            box = tight_box(mask)
            if box is None or box[2] - box[0] < 2 or box[3] - box[1] < 2:
                continue
            if boxes and iou_matrix(np.array([box]), np.array(boxes)).max() > spec.overlap_cap:
                continue
            sign = 1.0 if base < 128 else -1.0
            level = base + sign * rng.uniform(55, 105)
            img[mask] = level + rng.normal(0.0, spec.noise_level * 128.0, size=int(mask.sum()))
            labels.append(cls + 1)
            boxes.append(box)
            break
    out = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return out, Annotation(image_id, width, height, labels, boxes)


def image_seeds(seed: int, count: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(count)


def generate_scenes(spec: SyntheticSpec, threads: int = 1) -> list[tuple[np.ndarray, Annotation]]:
    seeds = image_seeds(spec.seed, spec.image_count)

    def one(i: int):
        return render_scene(spec, np.random.default_rng(seeds[i]), i)

    if threads <= 1:
        return [one(i) for i in range(spec.image_count)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(spec.image_count)))


def generate_dataset(spec: SyntheticSpec, root, threads: int = 1) -> list[Annotation]:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    scenes = generate_scenes(spec, threads)
    for img, ann in scenes:
        write_pgm(root / "images" / f"{ann.image_id:06d}.pgm", img)
    anns = [ann for _, ann in scenes]
    save_annotations(root / "annotations.jsonl", anns)
    with open(root / "dataset.json", "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return anns


# ---------------------------------------------------------------- file I/O


def write_pgm(path, img: np.ndarray) -> None:
    """Plain graymap (P2), maxval 255, 16 values per line."""
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    flat = img.ravel()
    lines = [f"P2\n{w} {h}\n255"]
    for i in range(0, len(flat), 16):
        lines.append(" ".join(map(str, flat[i : i + 16].tolist())))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_pnm(path) -> np.ndarray:
    """Read a plain P2 graymap or P3 pixmap; pixmaps are averaged to gray."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise DataIOError(f"cannot read image {path}: {exc}") from exc
    tokens = []
    for line in text.splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    if not tokens or tokens[0] not in ("P2", "P3"):
        raise DataIOError(f"{path}: not a plain PGM/PPM file")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        chans = 3 if tokens[0] == "P3" else 1
        vals = np.array(tokens[4 : 4 + w * h * chans], dtype=np.float64)
    except (IndexError, ValueError) as exc:
        raise DataIOError(f"{path}: malformed header or pixel data") from exc
    if vals.size != w * h * chans:
        raise DataIOError(f"{path}: expected {w * h * chans} values, found {vals.size}")
    img = vals.reshape(h, w, chans).mean(axis=2) * (255.0 / maxval)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def save_annotations(path, anns: list[Annotation]) -> None:
    with open(path, "w") as fh:
        for a in anns:
            fh.write(a.to_json() + "\n")


def load_annotations(path) -> list[Annotation]:
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataIOError(f"cannot read annotations {path}: {exc}") from exc
    out = []
    for no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            out.append(Annotation.from_json(line))
        except (ValueError, KeyError, TypeError) as exc:
            raise DataIOError(f"{path}:{no}: malformed annotation line ({exc})") from exc
    return out


def load_dataset(root) -> tuple[np.ndarray, list[Annotation]]:
    """All images of a generated dataset as ``(N, H, W)`` uint8 plus annotations."""
    root = Path(root)
    anns = load_annotations(root / "annotations.jsonl")
    imgs = [read_pnm(root / "images" / f"{a.image_id:06d}.pgm") for a in anns]
    if not imgs:
        return np.zeros((0, 0, 0), dtype=np.uint8), anns
    return np.stack(imgs), anns


def normalize(images: np.ndarray) -> np.ndarray:
    """uint8 ``(N, H, W)`` to network input ``(N, 1, H, W)``."""
    x = (np.asarray(images, dtype=np.float32) - 127.5) / 64.0
    return x[:, None, :, :]


# ---------------------------------------------------------------- augmentation


def hflip(img: np.ndarray, ann: Annotation) -> tuple[np.ndarray, Annotation]:
    w = ann.width
    boxes = [(w - x2, y1, w - x1, y2) for x1, y1, x2, y2 in ann.boxes]
    return img[:, ::-1].copy(), Annotation(ann.image_id, ann.width, ann.height, list(ann.labels), boxes, list(ann.difficult))


def crop(img: np.ndarray, ann: Annotation, window: tuple[int, int, int, int]) -> tuple[np.ndarray, Annotation] | None:
    """Crop to ``window`` (x0, y0, x1, y1), resize back by nearest neighbour.

    Boxes whose centers leave the window are dropped, the rest clipped.
    Returns None when no box with positive area survives.
    """
    x0, y0, x1, y1 = window
    h, w = img.shape
    cw, ch = x1 - x0, y1 - y0
    sx, sy = w / cw, h / ch
    labels, boxes, flags = [], [], []
    for lab, (bx1, by1, bx2, by2), d in zip(ann.labels, ann.boxes, ann.difficult):
        cx, cy = (bx1 + bx2) / 2.0, (by1 + by2) / 2.0
        if not (x0 <= cx < x1 and y0 <= cy < y1):
            continue
        nb = (
            (max(bx1, x0) - x0) * sx,
            (max(by1, y0) - y0) * sy,
            (min(bx2, x1) - x0) * sx,
            (min(by2, y1) - y0) * sy,
        )
        if nb[2] - nb[0] < 1.0 or nb[3] - nb[1] < 1.0:
            continue
        labels.append(lab)
        boxes.append(nb)
        flags.append(d)
    if not labels:
        return None
    rows = y0 + (np.arange(h) * ch) // h
    cols = x0 + (np.arange(w) * cw) // w
    return img[np.ix_(rows, cols)], Annotation(ann.image_id, w, h, labels, boxes, flags)


def augment(img: np.ndarray, ann: Annotation, seed, min_scale: float = 0.6, tries: int = 50):
    """Random horizontal flip, then a random crop that keeps at least one box.

    Images without boxes are only flipped.
    """
    rng = np.random.default_rng(seed)
    if rng.random() < 0.5:
        img, ann = hflip(img, ann)
    if not ann.labels or rng.random() < 0.5:
        return img, ann
    h, w = img.shape
    for _ in range(tries):
        s = rng.uniform(min_scale, 1.0)
        cw, ch = max(1, int(round(s * w))), max(1, int(round(s * h)))
        x0 = int(rng.integers(0, w - cw + 1))
        y0 = int(rng.integers(0, h - ch + 1))
        out = crop(img, ann, (x0, y0, x0 + cw, y0 + ch))
        if out is not None:
            return out
    return img, ann


def dataset_fingerprint(root) -> str:
    """Hex digest of every file under ``root`` (sorted), for determinism checks."""
    digest = hashlib.sha256()
    for dirpath, _, files in sorted(os.walk(root)):
        for name in sorted(files):
            p = Path(dirpath) / name
            digest.update(str(p.relative_to(root)).encode())
            digest.update(p.read_bytes())
    return digest.hexdigest()
