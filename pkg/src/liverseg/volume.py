"""Volumetric data model, MVOL file I/O, trilinear resampling and z-score normalization.

Arrays are indexed ``[x, y, z]`` so that ``data.shape == dims`` and the spacing
triple lines up with the array axes. On disk the payload is x-fastest, which is
numpy's Fortran order for this indexing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

PathLike = Union[str, Path]
Triple = Tuple[float, float, float]

HEADER_SUFFIX = ".mvol.json"
RAW_SUFFIX = ".raw"
DTYPE_TAG = "f32le"


class VolumeError(ValueError):
    """Raised when a volume, mask or MVOL file violates its contract."""


def _as_spacing(spacing) -> Triple:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise VolumeError(f"spacing must have 3 components, got {len(sp)}")
    if not all(np.isfinite(s) and s > 0 for s in sp):
        raise VolumeError(f"spacing must be strictly positive, got {sp}")
    return sp  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar (or channel-first multi-channel) image with physical voxel spacing.

    Attributes:
        data: float32 array of shape ``(nx, ny, nz)`` or ``(c, nx, ny, nz)``.
        spacing_mm: voxel edge lengths along x, y, z in millimetres.
    """

    data: np.ndarray
    spacing_mm: Triple

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim not in (3, 4):
            raise VolumeError(f"volume data must be 3D or 4D, got shape {arr.shape}")
        if min(arr.shape[-3:]) < 1:
            raise VolumeError(f"all dims must be >= 1, got {arr.shape}")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise VolumeError("volume data contains NaN or infinity")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing_mm", _as_spacing(self.spacing_mm))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape[-3:])  # type: ignore[return-value]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 3 else int(self.data.shape[0])

    def channel(self, c: int) -> "Volume":
        if self.data.ndim == 3:
            if c != 0:
                raise IndexError(c)
            return self
        return Volume(self.data[c], self.spacing_mm)

    def same_geometry(self, other) -> bool:
        return self.dims == other.dims and self.spacing_mm == other.spacing_mm

    def __eq__(self, other) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing_mm == other.spacing_mm
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary mask sharing a volume's geometry. ``data`` is uint8 in {0, 1}."""

    data: np.ndarray
    spacing_mm: Triple

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise VolumeError(f"mask data must be 3D, got shape {arr.shape}")
        if arr.dtype == bool:
            arr = arr.astype(np.uint8)
        elif not np.all((arr == 0) | (arr == 1)):
            raise VolumeError("mask values must be exactly 0 or 1")
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing_mm", _as_spacing(self.spacing_mm))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)  # type: ignore[return-value]

    def same_geometry(self, other) -> bool:
        return self.dims == other.dims and self.spacing_mm == other.spacing_mm

    def count(self) -> int:
        return int(self.data.sum(dtype=np.int64))

    def to_volume(self) -> Volume:
        return Volume(self.data.astype(np.float32), self.spacing_mm)

    @classmethod
    def from_volume(cls, v: Volume) -> "Mask":
        return cls(v.data, v.spacing_mm)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mask):
            return NotImplemented
        return self.spacing_mm == other.spacing_mm and np.array_equal(self.data, other.data)

    __hash__ = None  # type: ignore[assignment]


def _header_path(path: PathLike) -> Path:
    p = Path(path)
    if p.name.endswith(HEADER_SUFFIX):
        return p
    return p.with_name(p.name + HEADER_SUFFIX)


def mvol_stem(path: PathLike) -> str:
    """Return the base name of an MVOL pair, e.g. ``case_000_t1``."""
    name = Path(path).name
    if name.endswith(HEADER_SUFFIX):
        return name[: -len(HEADER_SUFFIX)]
    return name


def write_volume(v: Union[Volume, Mask], path: PathLike) -> Path:
    """Write ``v`` as an MVOL pair and return the header path.

    ``path`` may be given with or without the ``.mvol.json`` suffix; the raw
    payload is written beside it as ``<name>.raw``.
    """
    if isinstance(v, Mask):
        v = v.to_volume()
    if v.channels != 1 or v.data.ndim != 3:
        raise VolumeError("MVOL stores single-channel volumes only")
    if not np.all(np.isfinite(v.data)):
        raise VolumeError("refusing to write non-finite values")
    header = _header_path(path)
    if not header.parent.is_dir():
        raise OSError(f"parent directory does not exist: {header.parent}")
    stem = mvol_stem(header)
    raw_name = stem + RAW_SUFFIX
    payload = np.asarray(v.data, dtype="<f4").ravel(order="F").tobytes()
    (header.parent / raw_name).write_bytes(payload)
    meta = {
        "dims": list(v.dims),
        "spacing_mm": list(v.spacing_mm),
        "dtype": DTYPE_TAG,
        "data_file": raw_name,
    }
    header.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return header


def read_volume(path: PathLike) -> Volume:
    """Read an MVOL pair written by :func:`write_volume`."""
    header = _header_path(path)
    if not header.is_file():
        raise FileNotFoundError(f"no MVOL header at {header}")
    try:
        meta = json.loads(header.read_text(encoding="utf-8"))
        dims = [int(d) for d in meta["dims"]]
        spacing = meta["spacing_mm"]
        dtype = meta["dtype"]
        data_file = meta["data_file"]
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeError(f"malformed MVOL header {header}: {exc}") from exc
    if dtype != DTYPE_TAG:
        raise VolumeError(f"unsupported dtype {dtype!r}, expected {DTYPE_TAG!r}")
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeError(f"invalid dims {dims}")
    spacing = _as_spacing(spacing)
    raw = header.parent / data_file
    if not raw.is_file():
        raise FileNotFoundError(f"missing raw payload {raw}")
    buf = np.frombuffer(raw.read_bytes(), dtype="<f4")
    n = dims[0] * dims[1] * dims[2]
    if buf.size != n:
        raise VolumeError(f"raw holds {buf.size} values but header declares {dims} ({n})")
    data = buf.reshape(dims, order="F").astype(np.float32)
    return Volume(data, spacing)


def read_mask(path: PathLike) -> Mask:
    return Mask.from_volume(read_volume(path))


def _linear_weights(n_out: int, n_in: int, s_out: float, s_in: float):
    # voxel centers: physical position of index i is (i + 0.5) * spacing
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * s_out / s_in - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = pos - i0
    return i0, i1, w


def _interp_axis(a: np.ndarray, axis: int, n_out: int, s_out: float, s_in: float) -> np.ndarray:
    i0, i1, w = _linear_weights(n_out, a.shape[axis], s_out, s_in)
    shape = [1] * a.ndim
    shape[axis] = n_out
    w = w.reshape(shape)
    return np.take(a, i0, axis=axis) * (1.0 - w) + np.take(a, i1, axis=axis) * w


def resample_trilinear(v: Volume, target_spacing_mm) -> Volume:
    """Resample ``v`` onto a grid with ``target_spacing_mm`` voxels.

    Output dims are ``round(dim * s / t)`` (at least 1). Values are trilinear
    interpolations at the output voxel centers with clamp-to-edge boundaries.
    Multi-channel volumes are resampled channel by channel.
    """
    target = _as_spacing(target_spacing_mm)
    if target == v.spacing_mm:
        return v
    out_dims = [max(1, int(round(d * s / t))) for d, s, t in zip(v.dims, v.spacing_mm, target)]
    a = v.data.astype(np.float64)
    offset = a.ndim - 3
    for ax in range(3):
        a = _interp_axis(a, ax + offset, out_dims[ax], target[ax], v.spacing_mm[ax])
    return Volume(a, target)


def resample_mask(m: Mask, target_spacing_mm) -> Mask:
    """Nearest-voxel-center resampling for masks, via trilinear then threshold at 0.5."""
    r = resample_trilinear(m.to_volume(), target_spacing_mm)
    return Mask(r.data >= 0.5, r.spacing_mm)


def zscore_array(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    std = a.std()
    if std < 1e-8:
        return np.zeros_like(a)
    return (a - a.mean()) / std


def zscore_normalize(v: Volume) -> Volume:
    """Shift and scale to zero mean and unit population std (all zeros if std < 1e-8)."""
    return Volume(zscore_array(v.data), v.spacing_mm)
