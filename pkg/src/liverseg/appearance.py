"""Histogram-matching appearance translation and randomized style augmentation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .volume import Volume, read_volume

N_BINS = 256
DEGENERATE_WIDTH = 1e-6


@dataclass(frozen=True, eq=False)
class IntensityHistogram:
    """256 uniform bins over a volume's [min, max]."""

    bin_edges: np.ndarray
    counts: np.ndarray
    total: int

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.int64)
        if edges.shape != (N_BINS + 1,) or counts.shape != (N_BINS,):
            raise ValueError("histogram needs 257 edges and 256 counts")
        if not np.all(np.diff(edges) > 0):
            raise ValueError("bin edges must be strictly increasing")
        if np.any(counts < 0) or int(counts.sum()) != int(self.total) or self.total <= 0:
            raise ValueError("counts must be non-negative and sum to total")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "total", int(self.total))

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    @property
    def bin_width(self) -> float:
        return float(self.bin_edges[1] - self.bin_edges[0])

    def to_dict(self) -> dict:
        return {
            "bin_edges": self.bin_edges.tolist(),
            "counts": self.counts.tolist(),
            "total": self.total,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IntensityHistogram":
        return cls(np.array(d["bin_edges"]), np.array(d["counts"]), int(d["total"]))


@dataclass
class StyleBank:
    references: List[IntensityHistogram]
    seed: int = 0

    def __len__(self) -> int:
        return len(self.references)


class EmptyStyleBankError(ValueError):
    pass


def _bin_edges(lo: float, hi: float) -> np.ndarray:
    if not hi > lo:
        hi = lo + DEGENERATE_WIDTH
    return np.linspace(lo, hi, N_BINS + 1)


def bin_indices(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    lo, hi = edges[0], edges[-1]
    idx = np.floor((np.asarray(values, dtype=np.float64) - lo) / (hi - lo) * N_BINS)
    return np.clip(idx, 0, N_BINS - 1).astype(np.int64)


def compute_histogram(v: Volume) -> IntensityHistogram:
    """Histogram of ``v`` with a value equal to the max landing in the last bin."""
    a = v.data.astype(np.float64).ravel()
    edges = _bin_edges(float(a.min()), float(a.max()))
    counts = np.bincount(bin_indices(a, edges), minlength=N_BINS)
    return IntensityHistogram(edges, counts, a.size)


def match_values(values: np.ndarray, ref_hist: IntensityHistogram) -> np.ndarray:
    """Map each value to the smallest reference bin-center whose CDF reaches the value's CDF.

    Source CDFs are exact empirical CDFs (fraction of values <= x). The
    comparison ``cdf_ref[k] >= r / n`` is done in integers to avoid ties being
    decided by floating point rounding.
    """
    flat = np.asarray(values, dtype=np.float64).ravel()
    n = flat.size
    uniq, inverse, cnt = np.unique(flat, return_inverse=True, return_counts=True)
    ranks = np.cumsum(cnt)  # number of source values <= each unique value
    ref_cum = np.cumsum(ref_hist.counts)
    # cdf_ref[k] >= ranks / n  <=>  ref_cum[k] * n >= ranks * total
    k = np.searchsorted(ref_cum * n, ranks * ref_hist.total, side="left")
    k = np.minimum(k, N_BINS - 1)
    mapped = ref_hist.centers[k]
    return mapped[inverse].reshape(np.shape(values))


def match_histogram(src: Volume, ref_hist: IntensityHistogram) -> Volume:
    """Classic CDF histogram matching of ``src`` onto ``ref_hist``."""
    return Volume(match_values(src.data, ref_hist), src.spacing_mm)


@dataclass(frozen=True)
class StyleConfig:
    """Knobs of the random style transfer branch."""

    full_match_prob: float = 0.5
    blend_range: Tuple[float, float] = (0.5, 1.0)


def random_style_transfer(
    v: Volume,
    bank: StyleBank,
    rng: np.random.Generator,
    config: StyleConfig = StyleConfig(),
) -> Volume:
    """Match ``v`` to a uniformly drawn reference, either fully or blended with the original.

    With probability ``full_match_prob`` the matched volume is returned as is;
    otherwise ``lam * matched + (1 - lam) * v`` with ``lam`` drawn uniformly
    from ``blend_range``.
    """
    if len(bank) == 0:
        raise EmptyStyleBankError("style bank is empty")
    ref = bank.references[int(rng.integers(len(bank)))]
    full = rng.random() < config.full_match_prob
    lam = float(rng.uniform(*config.blend_range))
    matched = match_values(v.data, ref)
    if full:
        return Volume(matched, v.spacing_mm)
    out = lam * matched + (1.0 - lam) * v.data.astype(np.float64)
    return Volume(out, v.spacing_mm)


@dataclass(frozen=True)
class AugmentConfig:
    style_prob: float = 1.0
    style: StyleConfig = field(default_factory=StyleConfig)
    flip_prob: float = 0.5
    gamma_range: Tuple[float, float] = (0.8, 1.25)

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(style_prob=0.0, flip_prob=0.0, gamma_range=(1.0, 1.0))


def apply_gamma(a: np.ndarray, gamma: float) -> np.ndarray:
    """Gamma correction on the min-max rescaled intensities, range preserved."""
    if gamma == 1.0:
        return a
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi - lo < 1e-12:
        return a
    return lo + (hi - lo) * ((a - lo) / (hi - lo)) ** gamma


def flip_axes(a: np.ndarray, flips: Sequence[bool]) -> np.ndarray:
    """Flip the last three axes of ``a`` where ``flips`` is true (its own inverse)."""
    axes = tuple(a.ndim - 3 + i for i, f in enumerate(flips) if f)
    if not axes:
        return a
    return np.flip(a, axis=axes)


@dataclass(frozen=True, eq=False)
class AugmentedView:
    """A perturbed view together with the geometric transform that produced it."""

    volume: Volume
    flips: Tuple[bool, bool, bool]
    gamma: float
    styled: bool

    def to_common(self, a: np.ndarray) -> np.ndarray:
        """Map an array in this view's frame back to the original frame."""
        return flip_axes(a, self.flips)

    def from_common(self, a: np.ndarray) -> np.ndarray:
        return flip_axes(a, self.flips)


def augment_once(
    v: Volume,
    bank: Optional[StyleBank],
    rng: np.random.Generator,
    config: AugmentConfig = AugmentConfig(),
) -> AugmentedView:
    """Style transfer (if enabled), random axis flips and gamma, in that order."""
    styled = False
    out = v
    if rng.random() < config.style_prob:
        if bank is None or len(bank) == 0:
            raise EmptyStyleBankError("style bank is empty")
        out = random_style_transfer(v, bank, rng, config.style)
        styled = True
    flips = tuple(bool(f) for f in rng.random(3) < config.flip_prob)
    gamma = float(rng.uniform(*config.gamma_range))
    data = apply_gamma(out.data, gamma)
    data = flip_axes(data, flips)
    return AugmentedView(Volume(data, v.spacing_mm), flips, gamma, styled)  # type: ignore[arg-type]


def augment_views(
    v: Volume,
    bank: Optional[StyleBank],
    rng: np.random.Generator,
    config: AugmentConfig = AugmentConfig(),
) -> Tuple[AugmentedView, AugmentedView]:
    """Two independently perturbed views of ``v``."""
    if config.style_prob > 0 and (bank is None or len(bank) == 0):
        raise EmptyStyleBankError("style bank is empty")
    return augment_once(v, bank, rng, config), augment_once(v, bank, rng, config)


BANK_FILE = "histograms.json"


def save_style_bank(bank: StyleBank, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    path = d / BANK_FILE
    payload = {"seed": bank.seed, "references": [h.to_dict() for h in bank.references]}
    path.write_text(json.dumps(payload) + "\n", encoding="utf-8")
    return path


def load_style_bank(directory, seed: int = 0) -> StyleBank:
    """Load a bank from ``histograms.json`` or, failing that, from MVOL volumes in ``directory``."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"style bank directory not found: {d}")
    path = d / BANK_FILE
    if path.is_file():
        payload = json.loads(path.read_text(encoding="utf-8"))
        refs = [IntensityHistogram.from_dict(h) for h in payload["references"]]
        return StyleBank(refs, int(payload.get("seed", seed)))
    headers = sorted(d.glob("*.mvol.json"))
    return StyleBank([compute_histogram(read_volume(h)) for h in headers], seed)
