"""A small tape-based reverse-mode differentiation layer over numpy.

Only what the detector graph needs: 3x3 convolution (stride 1 or 2, pad 1),
2x transposed convolution, relu, elementwise sum, softmax, sigmoid, L2
normalization with learned per-channel scale, and a head-to-anchor reshape.
Tensors are ``(N, C, H, W)`` unless noted.
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataIOError

EPS_NORM = 1e-10


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "name", "needs_grad")

    def __init__(
        self,
        value: np.ndarray,
        parents: Sequence["Tensor"] = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
        op: str = "leaf",
        name: str | None = None,
        requires_grad: bool = False,
    ):
        self.value = value
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.name = name
        self.needs_grad = requires_grad or any(p.needs_grad for p in self.parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value) if self.needs_grad else None

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, name={self.name})"


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.needs_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.value.dtype, copy=True).reshape(t.value.shape)
    else:
        t.grad += g.reshape(t.value.shape)


def _topological(outputs: Iterable[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    for root in outputs:
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(outputs: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
    """Seed ``outputs`` with ``grads`` and propagate to every leaf that needs a gradient.

    Leaf gradients accumulate; intermediate gradients are released afterwards.
    """
    order = _topological(outputs)
    for out, g in zip(outputs, grads):
        _accumulate(out, g)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
            node.grad = None


def graph_ops(outputs: Iterable[Tensor]) -> list[str]:
    """Op names of every node reachable from ``outputs``."""
    return [n.op for n in _topological(outputs)]


# ---------------------------------------------------------------- operations


def conv3x3(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1) -> Tensor:
    """Cross-correlation with a 3x3 kernel, zero padding 1.

    ``w`` is ``(O, C, 3, 3)``; output spatial size is ``ceil(in / stride)``.
    """
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    n, c, h, wd = x.shape
    o = w.shape[0]
    if w.shape != (o, c, 3, 3):
        raise ValueError(f"conv3x3: weights {w.shape} do not fit input channels {c}")
    if b is not None and b.shape != (o,):
        raise ValueError(f"conv3x3: bias {b.shape} does not fit {o} outputs")
    xp = np.pad(x.value, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * 9)
    wm = w.value.reshape(o, c * 9)
    out = cols @ wm.T
    if b is not None:
        out += b.value
    value = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward_fn(g: np.ndarray) -> None:
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if w.needs_grad:
            _accumulate(w, gm.T @ cols)
        if b is not None and b.needs_grad:
            _accumulate(b, gm.sum(axis=0))
        if x.needs_grad:
            dcols = np.ascontiguousarray((gm @ wm).reshape(n, ho, wo, c, 3, 3).transpose(4, 5, 0, 3, 1, 2))
            dxp = np.zeros_like(xp)
            for kh in range(3):
                for kw in range(3):
                    dxp[:, :, kh : kh + stride * ho : stride, kw : kw + stride * wo : stride] += dcols[kh, kw]
            _accumulate(x, dxp[:, :, 1:-1, 1:-1])

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(value, parents, backward_fn, op="conv3x3")


def deconv2x(x: Tensor, w: Tensor) -> Tensor:
    """Transposed convolution, 2x2 kernel, stride 2, no bias; doubles H and W.

    ``w`` is ``(C_in, C_out, 2, 2)``.
    """
    n, c, h, wd = x.shape
    if w.shape[0] != c or w.shape[2:] != (2, 2):
        raise ValueError(f"deconv2x: weights {w.shape} do not fit input channels {c}")
    o = w.shape[1]
    xm = x.value.transpose(0, 2, 3, 1).reshape(-1, c)
    wm = w.value.reshape(c, o * 4)
    y = (xm @ wm).reshape(n, h, wd, o, 2, 2)
    value = y.transpose(0, 3, 1, 4, 2, 5).reshape(n, o, 2 * h, 2 * wd)

    def backward_fn(g: np.ndarray) -> None:
        gm = g.reshape(n, o, h, 2, wd, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, o * 4)
        if w.needs_grad:
            _accumulate(w, xm.T @ gm)
        if x.needs_grad:
            _accumulate(x, (gm @ wm.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2))

    return Tensor(value, (x, w), backward_fn, op="deconv2x")


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    value = x.value * mask

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(x, g * mask)

    return Tensor(value, (x,), backward_fn, op="relu")


def eltwise_sum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"eltwise_sum: shapes {a.shape} and {b.shape} differ")

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, g)

    return Tensor(a.value + b.value, (a, b), backward_fn, op="eltwise_sum")


def softmax_array(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = softmax_array(x.value, axis)

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return Tensor(y, (x,), backward_fn, op="softmax")


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(x, g * y * (1.0 - y))

    return Tensor(y, (x,), backward_fn, op="sigmoid")


def l2norm_scale(x: Tensor, scale: Tensor) -> Tensor:
    """Normalize each location's channel vector to unit L2 norm, then scale per channel."""
    c = x.shape[1]
    if scale.shape != (c,):
        raise ValueError(f"l2norm_scale: scale {scale.shape} does not fit {c} channels")
    r = np.sqrt((x.value * x.value).sum(axis=1, keepdims=True) + EPS_NORM)
    u = x.value / r
    s = scale.value.reshape(1, c, 1, 1)

    def backward_fn(g: np.ndarray) -> None:
        if scale.needs_grad:
            _accumulate(scale, (g * u).sum(axis=(0, 2, 3)))
        if x.needs_grad:
            gs = g * s
            _accumulate(x, (gs - u * (gs * u).sum(axis=1, keepdims=True)) / r)

    return Tensor(u * s, (x, scale), backward_fn, op="l2norm_scale")


def to_anchor_layout(heads: Sequence[Tensor], per_anchor: int) -> Tensor:
    """Concatenate ``(N, n*k, H, W)`` head maps into ``(N, A, k)``.

    Anchor order is level, row, column, then the n anchors of a cell.
    """
    n = heads[0].shape[0]
    parts, sizes = [], []
    for t in heads:
        _, ch, h, w = t.shape
        if ch % per_anchor:
            raise ValueError(f"head with {ch} channels is not a multiple of {per_anchor}")
        parts.append(t.value.transpose(0, 2, 3, 1).reshape(n, -1, per_anchor))
        sizes.append((ch, h, w))
    value = np.concatenate(parts, axis=1)

    def backward_fn(g: np.ndarray) -> None:
        start = 0
        for t, (ch, h, w) in zip(heads, sizes):
            count = h * w * ch // per_anchor
            piece = g[:, start : start + count, :].reshape(n, h, w, ch).transpose(0, 3, 1, 2)
            _accumulate(t, piece)
            start += count

    return Tensor(value, tuple(heads), backward_fn, op="to_anchor_layout")


# ---------------------------------------------------------------- parameters


class ParameterStore:
    """Ordered named parameters with per-parameter momentum buffers."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.kinds: dict[str, str] = {}
        self.momentum: dict[str, np.ndarray] = {}

    def add(self, name: str, shape: tuple[int, ...], kind: str, fill: float = 0.0) -> Tensor:
        """Register a parameter. ``kind`` is one of weight, bias, scale."""
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.full(shape, fill, dtype=self.dtype), name=name, requires_grad=True)
        self.params[name] = t
        self.kinds[name] = kind
        self.momentum[name] = np.zeros(shape, dtype=self.dtype)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.value.size for t in self.params.values())

    def values(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(values)
        if missing:
            raise ValueError(f"parameter sets differ: {sorted(missing)}")
        for k, t in self.params.items():
            v = np.asarray(values[k])
            if v.shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {t.shape}")
            t.value = v.astype(self.dtype)


def fans(shape: tuple[int, ...], transposed: bool = False) -> tuple[int, int]:
    field = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    a, b = shape[0], shape[1]
    if transposed:
        return a * field, b * field
    return b * field, a * field


def init(
    store: ParameterStore,
    scheme: str = "xavier",
    seed: int = 0,
    scale_inits: dict[str, float] | None = None,
    head_prefixes: tuple[str, ...] = (),
    head_std: float | None = None,
) -> None:
    """Seeded initialization.

    Weights: ``xavier`` draws U(-a, a) with a = sqrt(6 / (fan_in + fan_out));
    ``he`` draws N(0, 2 / fan_in), which keeps activation scale through
    ReLU stacks; ``gaussian`` draws N(0, 0.01). When ``head_std`` is set,
    weights whose names start with one of ``head_prefixes`` draw
    N(0, head_std^2) instead. Biases are zero; scale parameters take their
    value from ``scale_inits`` (default 1.0).
    """
    rng = np.random.default_rng(seed)
    scale_inits = scale_inits or {}
    for name, t in store:
        kind = store.kinds[name]
        if kind == "bias":
            t.value = np.zeros(t.shape, dtype=store.dtype)
        elif kind == "scale":
            t.value = np.full(t.shape, scale_inits.get(name, 1.0), dtype=store.dtype)
        elif head_std is not None and name.startswith(head_prefixes):
            t.value = rng.normal(0.0, head_std, size=t.shape).astype(store.dtype)
        elif scheme == "xavier":
            fan_in, fan_out = fans(t.shape, transposed=name.endswith(".deconv"))
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            t.value = rng.uniform(-bound, bound, size=t.shape).astype(store.dtype)
        elif scheme == "he":
            # a stride-2 2x2 deconvolution feeds each output from one tap per input channel
            fan_in = t.shape[0] if name.endswith(".deconv") else fans(t.shape)[0]
            t.value = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=t.shape).astype(store.dtype)
        elif scheme == "gaussian":
            t.value = rng.normal(0.0, 0.01, size=t.shape).astype(store.dtype)
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        store.momentum[name] = np.zeros(t.shape, dtype=store.dtype)


def sgd_step(store: ParameterStore, lr: float, momentum: float = 0.9, weight_decay: float = 0.0005) -> None:
    """v <- momentum*v + grad + weight_decay*param; param <- param - lr*v; grads cleared."""
    for name, t in store:
        g = t.grad if t.grad is not None else 0.0
        v = store.momentum[name]
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * t.value
        t.value = (t.value - lr * v).astype(store.dtype, copy=False)
        t.grad = None


# ---------------------------------------------------------------- checkpoints

MAGIC = b"CDET"
FORMAT_VERSION = 1


def save_checkpoint(path, store: ParameterStore, config: dict | None = None) -> None:
    """Write ``store`` in the CDET binary layout.

    Layout (little-endian): magic, u32 version, u32 config length + UTF-8
    JSON config echo, u32 entry count; per entry u32 name length + UTF-8
    name, u32 rank, rank x u32 dims, float32 data.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    blob = json.dumps(config or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(store)))
    for name, t in store:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.value.ndim))
        buf.write(struct.pack(f"<{t.value.ndim}I", *t.value.shape))
        buf.write(np.ascontiguousarray(t.value, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    """Read a checkpoint; returns ``(config, name -> float32 array)``."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
    view = memoryview(data)
    pos = 0

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise DataIOError(f"truncated checkpoint {path}")
        out = struct.unpack_from(fmt, view, pos)
        pos += size
        return out

    if bytes(view[:4]) != MAGIC:
        raise DataIOError(f"{path} is not a CDET checkpoint")
    pos = 4
    (version,) = take("<I")
    if version != FORMAT_VERSION:
        raise DataIOError(f"unsupported checkpoint version {version}")
    (clen,) = take("<I")
    config = json.loads(bytes(view[pos : pos + clen]).decode("utf-8"))
    pos += clen
    (count,) = take("<I")
    entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (nlen,) = take("<I")
        name = bytes(view[pos : pos + nlen]).decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        if pos + 4 * size > len(view):
            raise DataIOError(f"truncated checkpoint {path}")
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * size
        entries[name] = arr
    return config, entries
