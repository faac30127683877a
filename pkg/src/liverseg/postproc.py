"""Connected components, morphological trimming, Dice and Hausdorff distance in mm."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volume import Mask, VolumeError

_CROSS = ndimage.generate_binary_structure(3, 1)
_STRUCTURES = {6: _CROSS, 26: ndimage.generate_binary_structure(3, 3)}


@dataclass
class ComponentLabeling:
    labels: np.ndarray  # int32, 0 = background, 1..K by decreasing size
    sizes: Dict[int, int]

    @property
    def n_components(self) -> int:
        return len(self.sizes)


def _fortran_linear_index(shape) -> np.ndarray:
    return np.arange(int(np.prod(shape))).reshape(shape, order="F")


def connected_components(m: Mask, connectivity: int = 6) -> ComponentLabeling:
    """Label components; ids ordered by decreasing size, ties by smallest first voxel.

    First-voxel order uses the x-fastest linear index of the MVOL layout.
    """
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    raw, n = ndimage.label(m.data, structure=_STRUCTURES[connectivity])
    if n == 0:
        return ComponentLabeling(np.zeros(m.dims, dtype=np.int32), {})
    flat = raw.ravel(order="F")
    sizes = np.bincount(flat, minlength=n + 1)[1:]
    # first occurrence of each raw label in x-fastest order
    fg = np.flatnonzero(flat)
    _, first_pos = np.unique(flat[fg], return_index=True)
    first = fg[first_pos]
    order = np.lexsort((first, -sizes))  # primary: size desc, secondary: first index
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, n + 1, dtype=np.int32)
    labels = remap[raw]
    return ComponentLabeling(labels, {i + 1: int(sizes[order[i]]) for i in range(n)})


def binary_closing_padded(a: np.ndarray) -> np.ndarray:
    """Dilate then erode with the 6-connected cross, padding so the result contains ``a``."""
    p = np.pad(a.astype(bool), 1)
    closed = ndimage.binary_erosion(ndimage.binary_dilation(p, _CROSS), _CROSS)
    return closed[1:-1, 1:-1, 1:-1]


def trim_mask(m: Mask, min_fraction: float = 1.0, connectivity: int = 6, close: bool = True) -> Mask:
    """Keep the largest component (plus any at least ``min_fraction`` of its size when
    ``min_fraction < 1``), then smooth with one closing pass."""
    if not 0.0 <= min_fraction <= 1.0:
        raise ValueError("min_fraction must be in [0, 1]")
    cc = connected_components(m, connectivity)
    if cc.n_components == 0:
        return m
    largest = cc.sizes[1]
    keep = [1]
    if min_fraction < 1.0:
        keep += [k for k, s in cc.sizes.items() if k > 1 and s >= min_fraction * largest]
    kept = np.isin(cc.labels, keep)
    if close:
        kept = binary_closing_padded(kept)
    return Mask(kept, m.spacing_mm)


def _check_pair(a: Mask, b: Mask) -> None:
    if not a.same_geometry(b):
        raise VolumeError(f"geometry mismatch: {a.dims}/{a.spacing_mm} vs {b.dims}/{b.spacing_mm}")


def dice_score(a: Mask, b: Mask) -> float:
    """2|A n B| / (|A| + |B|), with two empty masks scoring 1.0."""
    _check_pair(a, b)
    sa, sb = a.count(), b.count()
    if sa + sb == 0:
        return 1.0
    inter = int(np.count_nonzero(a.data & b.data))
    return 2.0 * inter / (sa + sb)


def boundary_voxels(m: Mask) -> np.ndarray:
    """Foreground voxels with a 6-neighbour in the background or outside the volume."""
    fg = m.data.astype(bool)
    interior = ndimage.binary_erosion(fg, _CROSS, border_value=0)
    return fg & ~interior


def boundary_points_mm(m: Mask) -> np.ndarray:
    idx = np.argwhere(boundary_voxels(m))
    return (idx + 0.5) * np.asarray(m.spacing_mm)


class EmptyMaskError(ValueError):
    pass


def hausdorff_mm(a: Mask, b: Mask) -> float:
    """Symmetric (maximum) Hausdorff distance between the boundary point sets, in mm."""
    _check_pair(a, b)
    if a.count() == 0 or b.count() == 0:
        raise EmptyMaskError("Hausdorff distance is undefined for an empty mask")
    pa, pb = boundary_points_mm(a), boundary_points_mm(b)
    d_ab = cKDTree(pb).query(pa)[0].max()
    d_ba = cKDTree(pa).query(pb)[0].max()
    return float(max(d_ab, d_ba))
