"""Pseudo-label generation on a new unlabeled pool and fine-tuning on the union."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .appearance import StyleBank
from .backbone import ModelParams
from .data import Case
from .mean_teacher import EpochRecord, TrainConfig, fit, predict_probability
from .volume import Mask, VolumeError, write_volume


@dataclass
class PseudoLabeledCase:
    case_id: str
    mask: Mask
    confidence: float
    source_checkpoint: str = ""
    ged4_path: Optional[str] = None
    mask_path: Optional[str] = None

    def __post_init__(self):
        if not np.isfinite(self.confidence) or not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"{self.case_id}: confidence must be finite and in [0, 1]")


def pseudo_label_from_probability(prob: np.ndarray, threshold: float = 0.5) -> Tuple[np.ndarray, float]:
    """Hard mask ``prob >= threshold`` and the mean probability over its foreground (0 if empty)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    p = np.asarray(prob, dtype=np.float64)
    mask = p >= threshold
    conf = float(p[mask].mean()) if mask.any() else 0.0
    return mask, conf


def generate_pseudo_labels(
    student: ModelParams,
    pool: Sequence[Case],
    threshold: float = 0.5,
    mapper: Optional[ModelParams] = None,
    source_checkpoint: str = "",
) -> List[PseudoLabeledCase]:
    """Label every pool case with the student's own thresholded prediction."""
    out = []
    for c in pool:
        prob = predict_probability(student, c.ged4, mapper)
        mask, conf = pseudo_label_from_probability(prob, threshold)
        out.append(PseudoLabeledCase(c.case_id, Mask(mask, c.ged4.spacing_mm), conf, source_checkpoint))
    return out


def attach_pseudo_labels(
    pool: Sequence[Case], pseudo: Sequence[PseudoLabeledCase], min_confidence: Optional[float] = None
) -> List[Case]:
    """Pool cases carrying their pseudo masks, optionally dropping low-confidence ones."""
    by_id = {p.case_id: p for p in pseudo}
    out = []
    for c in pool:
        p = by_id.get(c.case_id)
        if p is None:
            raise KeyError(f"no pseudo label for case {c.case_id}")
        if min_confidence is not None and p.confidence < min_confidence:
            continue
        if not c.ged4.same_geometry(p.mask):
            raise VolumeError(f"{c.case_id}: pseudo mask geometry differs from volume")
        out.append(Case(c.case_id, c.ged4, c.domain, p.mask, c.t1))
    return out


def save_pseudo_labels(pseudo: Sequence[PseudoLabeledCase], out_dir) -> Path:
    """Write each pseudo mask as MVOL plus ``pseudo_manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for p in pseudo:
        hdr = write_volume(p.mask.to_volume(), out / f"{p.case_id}_pseudo")
        p.mask_path = hdr.name
        rows.append(
            {
                "case_id": p.case_id,
                "ged4": p.ged4_path,
                "mask": hdr.name,
                "confidence": p.confidence,
                "source_checkpoint": p.source_checkpoint,
            }
        )
    path = out / "pseudo_manifest.json"
    path.write_text(json.dumps({"cases": rows}, indent=2) + "\n", encoding="utf-8")
    return path


def finetune(
    student: ModelParams,
    teacher: ModelParams,
    labeled: Sequence[Case],
    pseudo_cases: Sequence[Case],
    unlabeled: Sequence[Case],
    config: TrainConfig,
    mapper: Optional[ModelParams] = None,
    bank: Optional[StyleBank] = None,
    out_dir=None,
) -> Tuple[ModelParams, ModelParams, List[EpochRecord]]:
    """Continue mean-teacher training with the supervised term over labeled plus pseudo-labeled cases.

    The consistency term still draws only from ``unlabeled``. Sampling is
    uniform over the union, so each part is drawn in proportion to its size.
    The poly schedule restarts from ``config.finetune_lr0``.
    """
    union = list(labeled) + list(pseudo_cases)
    if not union:
        raise ValueError("labeled and pseudo-labeled sets are both empty")
    for c in union:
        if c.mask is None:
            raise ValueError(f"case {c.case_id} has no (pseudo) mask")
    ft_config = replace(config, lr0=config.finetune_lr0)
    return fit(student, teacher, union, unlabeled, ft_config, config.finetune_epochs, mapper, bank, out_dir, stream=1)
