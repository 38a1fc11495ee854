"""Toy backbone, anchor refinement heads, transfer connection blocks and detection heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import microdiff as md
from .anchors import AnchorSpec
from .errors import ConfigError


@dataclass(frozen=True)
class NetworkConfig:
    image_size: tuple[int, int] = (128, 128)
    strides: tuple[int, ...] = (8, 16, 32, 64)
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    scale_multiplier: int = 4
    num_classes: int = 4
    in_channels: int = 1
    stem_channels: tuple[int, ...] = (8, 16)
    level_channels: tuple[int, ...] = (32, 32, 32, 32)
    tcb_channels: int = 64
    l2norm_inits: tuple[float, ...] = (10.0, 8.0)
    tcb_enabled: bool = True
    arm_enabled: bool = True

    def __post_init__(self):
        for name in ("image_size", "strides", "stem_channels", "level_channels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        for name in ("aspect_ratios", "l2norm_inits"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.num_classes < 2:
            raise ConfigError("num_classes counts background and must be >= 2")
        if not self.aspect_ratios:
            raise ConfigError("need at least one aspect ratio")
        s = self.strides
        if not s or any(b != 2 * a for a, b in zip(s, s[1:])):
            raise ConfigError(f"strides must ascend by factors of two, got {s}")
        depth = math.log2(s[0])
        if depth != int(depth) or int(depth) < 1:
            raise ConfigError(f"first stride must be a power of two >= 2, got {s[0]}")
        if len(self.stem_channels) != int(depth) - 1:
            raise ConfigError(f"stride {s[0]} needs {int(depth) - 1} stem stages, got {len(self.stem_channels)}")
        if len(self.level_channels) != len(s):
            raise ConfigError("level_channels needs one entry per stride")
        self.anchor_spec()  # divisibility check

    @property
    def anchors_per_cell(self) -> int:
        return len(self.aspect_ratios)

    def anchor_spec(self) -> AnchorSpec:
        return AnchorSpec(self.image_size, self.strides, self.scale_multiplier, self.aspect_ratios)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown network keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Outputs:
    """Per-anchor predictions. ``arm`` is ``(N, A, 6)`` = 2 logits + 4 offsets,
    ``odm`` is ``(N, A, c + 4)``; ``features``/``transferred`` are per level."""

    arm: Optional[md.Tensor]
    odm: md.Tensor
    features: list[md.Tensor] = field(default_factory=list)
    transferred: list[md.Tensor] = field(default_factory=list)

    def tensors(self) -> list[md.Tensor]:
        return [t for t in (self.arm, self.odm) if t is not None]


class RefineNet:
    """Parameters plus the forward graph of the two-stage detector."""

    def __init__(self, config: NetworkConfig, dtype=np.float32):
        self.config = config
        self.store = md.ParameterStore(dtype)
        self._build()

    # parameters ---------------------------------------------------------

    def _conv(self, name: str, cin: int, cout: int) -> None:
        self.store.add(f"{name}.weight", (cout, cin, 3, 3), "weight")
        self.store.add(f"{name}.bias", (cout,), "bias")

    def _build(self) -> None:
        cfg = self.config
        n, c = cfg.anchors_per_cell, cfg.num_classes
        cin = cfg.in_channels
        for i, ch in enumerate(cfg.stem_channels):
            self._conv(f"stem{i}", cin, ch)
            cin = ch
        for lvl, ch in enumerate(cfg.level_channels):
            self._conv(f"level{lvl}.down", cin, ch)
            self._conv(f"level{lvl}.conv", ch, ch)
            cin = ch
            if lvl < len(cfg.l2norm_inits):
                self.store.add(f"level{lvl}.l2norm", (ch,), "scale", cfg.l2norm_inits[lvl])
        t = cfg.tcb_channels
        for lvl, ch in enumerate(cfg.level_channels):
            if cfg.arm_enabled:
                self._conv(f"arm{lvl}", ch, n * 6)
            if cfg.tcb_enabled:
                self._conv(f"tcb{lvl}.lateral0", ch, t)
                self._conv(f"tcb{lvl}.lateral1", t, t)
                if lvl < len(cfg.strides) - 1:
                    self.store.add(f"tcb{lvl}.deconv", (t, t, 2, 2), "weight")
                self._conv(f"tcb{lvl}.fuse", t, t)
                self._conv(f"odm{lvl}", t, n * (c + 4))
            else:
                self._conv(f"odm{lvl}", ch, n * (c + 4))

    def initialize(self, seed: int = 0, scheme: str = "xavier", head_std: float | None = None) -> None:
        inits = {f"level{i}.l2norm": v for i, v in enumerate(self.config.l2norm_inits)}
        md.init(self.store, scheme, seed, inits, head_prefixes=("arm", "odm"), head_std=head_std)

    def num_anchors(self) -> int:
        return self.config.anchor_spec().count()

    # forward ------------------------------------------------------------

    def _apply(self, name: str, x: md.Tensor, stride: int = 1) -> md.Tensor:
        return md.conv3x3(x, self.store[f"{name}.weight"], self.store[f"{name}.bias"], stride)

    def backbone_forward(self, image: md.Tensor) -> list[md.Tensor]:
        cfg = self.config
        _, _, h, w = image.shape
        if (w, h) != tuple(cfg.image_size):
            raise ConfigError(f"image is {w}x{h}, network expects {cfg.image_size[0]}x{cfg.image_size[1]}")
        if h % cfg.strides[-1] or w % cfg.strides[-1]:
            raise ConfigError(f"image size {w}x{h} not divisible by stride {cfg.strides[-1]}")
        x = image
        for i in range(len(cfg.stem_channels)):
            x = md.relu(self._apply(f"stem{i}", x, stride=2))
        feats = []
        for lvl in range(len(cfg.level_channels)):
            x = md.relu(self._apply(f"level{lvl}.down", x, stride=2))
            x = md.relu(self._apply(f"level{lvl}.conv", x))
            if lvl < len(cfg.l2norm_inits):
                feats.append(md.l2norm_scale(x, self.store[f"level{lvl}.l2norm"]))
            else:
                feats.append(x)
        return feats

    def arm_forward(self, feats: list[md.Tensor]) -> md.Tensor:
        heads = [self._apply(f"arm{lvl}", f) for lvl, f in enumerate(feats)]
        return md.to_anchor_layout(heads, 6)

    def tcb_forward(self, feats: list[md.Tensor]) -> list[md.Tensor]:
        """Deepest level first: lateral conv-relu-conv, plus the upsampled deeper
        output, then relu-conv-relu."""
        out: list[Optional[md.Tensor]] = [None] * len(feats)
        deeper = None
        for lvl in reversed(range(len(feats))):
            lat = self._apply(f"tcb{lvl}.lateral1", md.relu(self._apply(f"tcb{lvl}.lateral0", feats[lvl])))
            if deeper is not None:
                lat = md.eltwise_sum(lat, md.deconv2x(deeper, self.store[f"tcb{lvl}.deconv"]))
            y = md.relu(self._apply(f"tcb{lvl}.fuse", md.relu(lat)))
            if y.shape[2:] != feats[lvl].shape[2:]:
                raise AssertionError(f"TCB level {lvl} output {y.shape[2:]} != feature {feats[lvl].shape[2:]}")
            out[lvl] = y
            deeper = y
        return out  # type: ignore[return-value]

    def odm_forward(self, transferred: list[md.Tensor]) -> md.Tensor:
        heads = [self._apply(f"odm{lvl}", f) for lvl, f in enumerate(transferred)]
        return md.to_anchor_layout(heads, self.config.num_classes + 4)

    def forward(self, images: np.ndarray, input_grad: bool = False) -> Outputs:
        """Run the graph on ``(N, C, H, W)`` images (already normalized)."""
        x = md.Tensor(np.asarray(images, dtype=self.store.dtype), requires_grad=input_grad, name="image")
        feats = self.backbone_forward(x)
        arm = self.arm_forward(feats) if self.config.arm_enabled else None
        transferred = self.tcb_forward(feats) if self.config.tcb_enabled else feats
        odm = self.odm_forward(transferred)
        return Outputs(arm, odm, feats, transferred)

    def graph_ops(self, outputs: Outputs) -> list[str]:
        return md.graph_ops(outputs.tensors())
