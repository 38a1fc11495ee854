"""Regularly tiled multi-level anchor grid."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class AnchorSpec:
    image_size: tuple[int, int] = (320, 320)
    strides: tuple[int, ...] = (8, 16, 32, 64)
    scale_multiplier: int = 4
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "aspect_ratios", tuple(float(r) for r in self.aspect_ratios))
        w, h = self.image_size
        for s in self.strides:
            if s <= 0 or w % s or h % s:
                raise ConfigError(f"image size {w}x{h} is not divisible by stride {s}")
        if not self.aspect_ratios or any(r <= 0 for r in self.aspect_ratios):
            raise ConfigError(f"aspect ratios must be positive, got {self.aspect_ratios}")
        if self.scale_multiplier <= 0:
            raise ConfigError("scale_multiplier must be positive")

    def level_shapes(self) -> list[tuple[int, int]]:
        """(rows, cols) of the feature map at each level."""
        w, h = self.image_size
        return [(h // s, w // s) for s in self.strides]

    def count(self) -> int:
        return sum(r * c for r, c in self.level_shapes()) * len(self.aspect_ratios)


@dataclass(frozen=True)
class AnchorGrid:
    """Anchors in tiling order: level, then row, column, ratio.

    ``provenance`` rows are ``(level, cell_row, cell_col, ratio_index)``.
    """

    spec: AnchorSpec
    boxes: np.ndarray
    provenance: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.boxes)

    def level_slices(self) -> list[slice]:
        n = len(self.spec.aspect_ratios)
        out, start = [], 0
        for r, c in self.spec.level_shapes():
            out.append(slice(start, start + r * c * n))
            start += r * c * n
        return out


def generate(spec: AnchorSpec) -> AnchorGrid:
    boxes, prov = [], []
    ratios = np.asarray(spec.aspect_ratios, dtype=np.float64)
    sqrt_r = np.sqrt(ratios)
    for level, (stride, (rows, cols)) in enumerate(zip(spec.strides, spec.level_shapes())):
        scale = float(spec.scale_multiplier * stride)
        rr, cc, kk = np.meshgrid(np.arange(rows), np.arange(cols), np.arange(len(ratios)), indexing="ij")
        rr, cc, kk = rr.ravel(), cc.ravel(), kk.ravel()
        cx = (cc + 0.5) * stride
        cy = (rr + 0.5) * stride
        w = scale * sqrt_r[kk]
        h = scale / sqrt_r[kk]
        boxes.append(np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1))
        prov.append(np.stack([np.full_like(rr, level), rr, cc, kk], axis=1))
    boxes = np.concatenate(boxes).astype(np.float64)
    prov = np.concatenate(prov).astype(np.int64)
    boxes.setflags(write=False)
    prov.setflags(write=False)
    return AnchorGrid(spec, boxes, prov)


def format_records(grid: AnchorGrid):
    """Yield one tab-separated record per anchor for the ``anchors`` command."""
    ratios = grid.spec.aspect_ratios
    for (lvl, row, col, k), box in zip(grid.provenance, grid.boxes):
        coords = "\t".join(f"{v:.4f}" for v in box)
        yield f"{lvl}\t{row}\t{col}\t{ratios[k]:g}\t{coords}"


def area_check(grid: AnchorGrid) -> float:
    """Largest deviation of anchor area from its level's scale squared."""
    scales = np.array([grid.spec.scale_multiplier * s for s in grid.spec.strides], dtype=np.float64)
    w = grid.boxes[:, 2] - grid.boxes[:, 0]
    h = grid.boxes[:, 3] - grid.boxes[:, 1]
    return float(np.max(np.abs(w * h - scales[grid.provenance[:, 0]] ** 2)))


def density(spec: AnchorSpec) -> list[float]:
    """Anchors per square pixel at each level."""
    w, h = spec.image_size
    n = len(spec.aspect_ratios)
    return [r * c * n / float(w * h) for r, c in spec.level_shapes()]

