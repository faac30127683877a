"""Two fixed tiny 3D conv nets with hand-written backward passes, losses and SGD.

``seg-v1``: conv3 (2->8) - ReLU - conv3 (8->8) - ReLU - conv1 (8->1) - sigmoid.
``map-v1``: conv3 (1->8) - ReLU - conv1 (8->1), linear output.

Network inputs are channel-first arrays ``(c, nx, ny, nz)``. Internally
activations are channel-last so each convolution is a single im2col matmul.
All arithmetic runs in float64; parameters keep their own storage dtype
(float32 by default so checkpoints round-trip bit-exactly).
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# (name, in_channels, out_channels, kernel, activation after)
ARCHITECTURES: Dict[str, List[Tuple[str, int, int, int, str]]] = {
    "seg-v1": [
        ("conv1", 2, 8, 3, "relu"),
        ("conv2", 8, 8, 3, "relu"),
        ("conv3", 8, 1, 1, "sigmoid"),
    ],
    "map-v1": [
        ("conv1", 1, 8, 3, "relu"),
        ("conv2", 8, 1, 1, "linear"),
    ],
}

DICE_EPS = 1e-5
_P_MIN = 1e-12
CE_CLAMP = 1e-7


class ShapeError(ValueError):
    pass


@dataclass
class ModelParams:
    """Ordered named tensors of one of the fixed architectures."""

    entries: "OrderedDict[str, np.ndarray]"
    arch_id: str

    def __post_init__(self):
        self.entries = OrderedDict((k, np.asarray(v)) for k, v in self.entries.items())

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def items(self):
        return self.entries.items()

    def names(self) -> List[str]:
        return list(self.entries)

    def shapes(self) -> List[Tuple[int, ...]]:
        return [v.shape for v in self.entries.values()]

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.entries.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(OrderedDict((k, v.copy()) for k, v in self.items()), self.arch_id)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(OrderedDict((k, v.astype(dtype)) for k, v in self.items()), self.arch_id)

    def zeros_like(self) -> "ModelParams":
        return ModelParams(OrderedDict((k, np.zeros_like(v)) for k, v in self.items()), self.arch_id)

    def check_compatible(self, other: "ModelParams") -> None:
        if self.names() != other.names() or self.shapes() != other.shapes():
            raise ShapeError(
                f"parameter sets differ: {list(zip(self.names(), self.shapes()))} vs "
                f"{list(zip(other.names(), other.shapes()))}"
            )

    def equals(self, other: "ModelParams") -> bool:
        return (
            self.arch_id == other.arch_id
            and self.names() == other.names()
            and all(np.array_equal(a, other[k]) for k, a in self.items())
        )


def expected_shapes(arch_id: str) -> "OrderedDict[str, Tuple[int, ...]]":
    if arch_id not in ARCHITECTURES:
        raise ShapeError(f"unknown architecture {arch_id!r}")
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    for name, cin, cout, k, _ in ARCHITECTURES[arch_id]:
        shapes[f"{name}.weight"] = (cout, cin, k, k, k)
        shapes[f"{name}.bias"] = (cout,)
    return shapes


def _check_arch(params: ModelParams) -> None:
    shapes = expected_shapes(params.arch_id)
    got = OrderedDict((k, v.shape) for k, v in params.items())
    if got != shapes:
        raise ShapeError(f"params do not match {params.arch_id}: {dict(got)}")


def init_params(arch_id: str, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    entries = OrderedDict()
    for name, shape in expected_shapes(arch_id).items():
        if name.endswith(".weight"):
            cout, cin, k = shape[0], shape[1], shape[2]
            bound = np.sqrt(6.0 / (cin * k**3 + cout * k**3))
            entries[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            entries[name] = np.zeros(shape, dtype=dtype)
    return ModelParams(entries, arch_id)


def zero_params(arch_id: str, dtype=np.float32) -> ModelParams:
    return ModelParams(
        OrderedDict((k, np.zeros(s, dtype=dtype)) for k, s in expected_shapes(arch_id).items()),
        arch_id,
    )


# ----------------------------------------------------------------------------
# forward / backward


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(X, Y, Z, C) -> (X*Y*Z, C*k^3) with zero 'same' padding."""
    if k == 1:
        return x.reshape(-1, x.shape[-1])
    p = k // 2
    xp = np.pad(x, ((p, p), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k, k), axis=(0, 1, 2))  # (X, Y, Z, C, k, k, k)
    return win.reshape(x.shape[0] * x.shape[1] * x.shape[2], -1)


def _col2im(dcols: np.ndarray, spatial: Tuple[int, int, int], cin: int, k: int) -> np.ndarray:
    X, Y, Z = spatial
    if k == 1:
        return dcols.reshape(X, Y, Z, cin)
    p = k // 2
    d = dcols.reshape(X, Y, Z, cin, k, k, k)
    dxp = np.zeros((X + 2 * p, Y + 2 * p, Z + 2 * p, cin))
    for i in range(k):
        for j in range(k):
            for l in range(k):
                dxp[i : i + X, j : j + Y, l : l + Z] += d[..., i, j, l]
    return dxp[p : p + X, p : p + Y, p : p + Z]


@dataclass
class ForwardRecord:
    """Cached activations of one forward pass, consumed by :func:`backward`."""

    arch_id: str
    spatial: Tuple[int, int, int]
    cols: List[np.ndarray] = field(default_factory=list)
    pre: List[np.ndarray] = field(default_factory=list)
    output: Optional[np.ndarray] = None


def _forward(params: ModelParams, x: np.ndarray, record: bool):
    _check_arch(params)
    layers = ARCHITECTURES[params.arch_id]
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[0] != layers[0][1]:
        raise ShapeError(
            f"{params.arch_id} expects input (channels={layers[0][1]}, nx, ny, nz), got {x.shape}"
        )
    spatial = tuple(int(s) for s in x.shape[1:])
    rec = ForwardRecord(params.arch_id, spatial) if record else None  # type: ignore[arg-type]
    h = np.moveaxis(x, 0, -1)
    for name, cin, cout, k, act in layers:
        W = params[f"{name}.weight"].astype(np.float64).reshape(cout, -1)
        b = params[f"{name}.bias"].astype(np.float64)
        cols = _im2col(h, k)
        z = cols @ W.T + b
        if rec is not None:
            rec.cols.append(cols)
            rec.pre.append(z)
        if act == "relu":
            z = np.maximum(z, 0.0)
        elif act == "sigmoid":
            # clip keeps probabilities strictly inside (0, 1) under saturation
            z = np.clip(0.5 * (1.0 + np.tanh(0.5 * z)), _P_MIN, 1.0 - _P_MIN)
        h = z.reshape(*spatial, cout)
    out = h[..., 0]
    if rec is not None:
        rec.output = out
    return out, rec


def network_forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Single-sample forward; returns an ``(nx, ny, nz)`` float64 array."""
    return _forward(params, x, record=False)[0]


def network_forward_recorded(params: ModelParams, x: np.ndarray) -> Tuple[np.ndarray, ForwardRecord]:
    out, rec = _forward(params, x, record=True)
    return out, rec  # type: ignore[return-value]


def seg_forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Foreground probability map of a two-channel input. Also accepts a batch ``(b, 2, ...)``."""
    if params.arch_id != "seg-v1":
        raise ShapeError(f"seg_forward needs seg-v1 params, got {params.arch_id}")
    x = np.asarray(x)
    if x.ndim == 5:
        return np.stack([network_forward(params, xi) for xi in x])
    return network_forward(params, x)


def map_forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    if params.arch_id != "map-v1":
        raise ShapeError(f"map_forward needs map-v1 params, got {params.arch_id}")
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    return network_forward(params, x)


def backward(params: ModelParams, record: Optional[ForwardRecord], grad_output: np.ndarray) -> ModelParams:
    """Gradients of a scalar loss w.r.t. every parameter, given dLoss/dOutput.

    ``grad_output`` has the output's spatial shape. Returned tensors are float64
    with the same names and shapes as ``params``.
    """
    if record is None or record.output is None:
        raise RuntimeError("backward called without a recorded forward pass")
    if record.arch_id != params.arch_id:
        raise ShapeError("forward record belongs to a different architecture")
    layers = ARCHITECTURES[params.arch_id]
    g = np.asarray(grad_output, dtype=np.float64)
    if g.shape != record.spatial:
        raise ShapeError(f"grad_output shape {g.shape} != output shape {record.spatial}")
    grads: Dict[str, np.ndarray] = {}
    dh = g.reshape(-1, 1)
    for idx in range(len(layers) - 1, -1, -1):
        name, cin, cout, k, act = layers[idx]
        z = record.pre[idx]
        if act == "relu":
            dz = dh * (z > 0)
        elif act == "sigmoid":
            s = record.output.reshape(-1, 1)
            dz = dh * s * (1.0 - s)
        else:
            dz = dh
        cols = record.cols[idx]
        grads[f"{name}.weight"] = (dz.T @ cols).reshape(cout, cin, k, k, k)
        grads[f"{name}.bias"] = dz.sum(axis=0)
        if idx > 0:
            W = params[f"{name}.weight"].astype(np.float64).reshape(cout, -1)
            dcols = dz @ W
            dh = _col2im(dcols, record.spatial, cin, k).reshape(-1, cin)
    ordered = OrderedDict((n, grads[n]) for n in params.names())
    return ModelParams(ordered, params.arch_id)


def add_grads(a: Optional[ModelParams], b: ModelParams) -> ModelParams:
    if a is None:
        return b
    a.check_compatible(b)
    return ModelParams(OrderedDict((k, a[k] + b[k]) for k in a), a.arch_id)


def scale_grads(g: ModelParams, factor: float) -> ModelParams:
    return ModelParams(OrderedDict((k, v * factor) for k, v in g.items()), g.arch_id)


def sgd_step(params: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
    """Plain SGD: ``p - lr * g`` in float64, stored back in each tensor's dtype."""
    params.check_compatible(grads)
    out = OrderedDict()
    for k, p in params.items():
        out[k] = (p.astype(np.float64) - lr * np.asarray(grads[k], dtype=np.float64)).astype(p.dtype)
    return ModelParams(out, params.arch_id)


def clip_grad_norm(grads: ModelParams, max_norm: float) -> Tuple[ModelParams, float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns (grads, norm before)."""
    norm = float(np.sqrt(sum(float(np.sum(np.square(v, dtype=np.float64))) for v in grads.entries.values())))
    if max_norm <= 0 or norm <= max_norm:
        return grads, norm
    return scale_grads(grads, max_norm / norm), norm


class MomentumSGD:
    """SGD with (optionally Nesterov) momentum. Velocity buffers are float64."""

    def __init__(self, momentum: float = 0.0, nesterov: bool = True):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.momentum = float(momentum)
        self.nesterov = bool(nesterov)
        self.velocity: Optional[Dict[str, np.ndarray]] = None

    def step(self, params: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
        if self.momentum == 0.0:
            return sgd_step(params, grads, lr)
        params.check_compatible(grads)
        if self.velocity is None:
            self.velocity = {k: np.zeros(v.shape) for k, v in params.items()}
        out = OrderedDict()
        for k, p in params.items():
            g = np.asarray(grads[k], dtype=np.float64)
            v = self.momentum * self.velocity[k] + g
            self.velocity[k] = v
            d = g + self.momentum * v if self.nesterov else v
            out[k] = (p.astype(np.float64) - lr * d).astype(p.dtype)
        return ModelParams(out, params.arch_id)


def poly_lr(lr0: float, epoch: int, epochs: int, exponent: float = 0.9) -> float:
    if epochs <= 0:
        return lr0
    return lr0 * (1.0 - min(epoch, epochs) / epochs) ** exponent


# ----------------------------------------------------------------------------
# losses


@dataclass
class LossValue:
    """A scalar loss with its named components and the weights that combine them."""

    total: float
    components: Dict[str, float]
    weights: Dict[str, float]

    @classmethod
    def combine(cls, components: Dict[str, float], weights: Dict[str, float]) -> "LossValue":
        total = float(sum(weights[k] * components[k] for k in components))
        return cls(total, dict(components), dict(weights))


def _pair(pred, target) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"geometry mismatch: {p.shape} vs {t.shape}")
    return p, t


def dice_loss(pred, target) -> LossValue:
    p, t = _pair(pred, target)
    d = 1.0 - (2.0 * np.sum(p * t) + DICE_EPS) / (p.sum() + t.sum() + DICE_EPS)
    return LossValue(float(d), {"dice": float(d)}, {"dice": 1.0})


def dice_loss_grad(pred, target) -> np.ndarray:
    p, t = _pair(pred, target)
    inter = np.sum(p * t)
    denom = p.sum() + t.sum() + DICE_EPS
    return -(2.0 * t * denom - (2.0 * inter + DICE_EPS)) / denom**2


def ce_loss(pred, target) -> LossValue:
    p, t = _pair(pred, target)
    pc = np.clip(p, CE_CLAMP, 1.0 - CE_CLAMP)
    ce = -np.mean(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))
    return LossValue(float(ce), {"ce": float(ce)}, {"ce": 1.0})


def ce_loss_grad(pred, target) -> np.ndarray:
    p, t = _pair(pred, target)
    inside = (p > CE_CLAMP) & (p < 1.0 - CE_CLAMP)
    pc = np.clip(p, CE_CLAMP, 1.0 - CE_CLAMP)
    return -(t / pc - (1.0 - t) / (1.0 - pc)) / p.size * inside


def mse_consistency(student_pred, teacher_pred) -> LossValue:
    s, t = _pair(student_pred, teacher_pred)
    m = float(np.mean((s - t) ** 2))
    return LossValue(m, {"mse": m}, {"mse": 1.0})


def mse_consistency_grad(student_pred, teacher_pred) -> np.ndarray:
    s, t = _pair(student_pred, teacher_pred)
    return 2.0 * (s - t) / s.size


# ----------------------------------------------------------------------------
# checkpoints

_MAGIC = b"MCKPT001"


def save_checkpoint(params: ModelParams, path) -> Path:
    """Header (arch id, names, shapes) followed by little-endian float32 tensors in order."""
    path = Path(path)
    header = {
        "arch_id": params.arch_id,
        "entries": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    hb = json.dumps(header).encode("utf-8")
    with path.open("wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        for v in params.entries.values():
            f.write(np.asarray(v, dtype="<f4").tobytes(order="C"))
    return path


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    off = len(_MAGIC)
    (hlen,) = struct.unpack("<I", raw[off : off + 4])
    off += 4
    header = json.loads(raw[off : off + hlen].decode("utf-8"))
    off += hlen
    entries = OrderedDict()
    for e in header["entries"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) if shape else 1
        buf = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
        entries[e["name"]] = buf.reshape(shape).astype(np.float32)
        off += 4 * n
    if off != len(raw):
        raise ValueError(f"{path}: trailing or missing payload bytes")
    params = ModelParams(entries, header["arch_id"])
    _check_arch(params)
    return params
