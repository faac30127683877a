"""End-to-end phantom experiment: the component ablation, evaluation and CSV outputs."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import binary_dilation

from .appearance import StyleBank, load_style_bank
from .backbone import ModelParams
from .contrast import AlignedPair, enhance_and_stack, train_contrast_mapper
from .cotta import AdaptConfig, AdaptState, run_stream, write_trace
from .data import Case, DatasetManifest, load_cases
from .mean_teacher import TrainConfig, predict_probability, train, write_history
from .phantom import PhantomSpec, generate_phantom_dataset
from .postproc import EmptyMaskError, connected_components, dice_score, hausdorff_mm, trim_mask
from .pseudo import attach_pseudo_labels, finetune, generate_pseudo_labels, save_pseudo_labels
from .volume import Mask

logger = logging.getLogger(__name__)

ARM_LABELS = {
    "A": "supervised",
    "D": "mean-teacher + hist",
    "E": "mean-teacher + hist + pseudo",
    "F": "contrast + mean-teacher + hist + pseudo",
    "G": "F + test-time adaptation",
    "H": "G + trim (speckle injected)",
}


@dataclass
class TrainingSets:
    labeled: List[Case]
    unlabeled: List[Case]
    pseudo_pool: List[Case]
    test: List[Case]
    bank: Optional[StyleBank]


def load_training_sets(manifest: DatasetManifest) -> TrainingSets:
    """Load every split. Only labeled and test cases keep their masks."""
    bank = None
    if manifest.style_bank_dir:
        bank = load_style_bank(manifest.resolve(manifest.style_bank_dir))
    return TrainingSets(
        labeled=load_cases(manifest, "labeled", with_masks=True),
        unlabeled=load_cases(manifest, "unlabeled", with_masks=False, with_t1=True),
        pseudo_pool=load_cases(manifest, "pseudo_pool", with_masks=False),
        test=load_cases(manifest, "test", with_masks=True),
        bank=bank,
    )


def train_from_manifest(manifest: DatasetManifest, config: TrainConfig, mapper=None, out_dir=None):
    """Mean-teacher training on the manifest's labeled and unlabeled splits."""
    sets = load_training_sets(manifest)
    return train(sets.labeled, sets.unlabeled, config, mapper, sets.bank, out_dir)


def mapper_pairs(manifest: DatasetManifest) -> List[AlignedPair]:
    pairs = []
    for c in load_cases(manifest, "labeled", with_masks=False, with_t1=True) + load_cases(
        manifest, "unlabeled", with_masks=False, with_t1=True
    ):
        pairs.append(AlignedPair(c.t1, c.ged4, c.case_id))
    return pairs


# ----------------------------------------------------------------------------
# evaluation


@dataclass
class CaseScore:
    case_id: str
    dice: float
    hd_mm: float


def score_case(case_id: str, pred: Mask, truth: Mask) -> CaseScore:
    try:
        hd = hausdorff_mm(pred, truth)
    except EmptyMaskError:
        hd = math.nan
    return CaseScore(case_id, dice_score(pred, truth), hd)


def mean_scores(scores: Sequence[CaseScore]) -> Tuple[float, float]:
    dice = float(np.mean([s.dice for s in scores]))
    hds = [s.hd_mm for s in scores if not math.isnan(s.hd_mm)]
    return dice, float(np.mean(hds)) if hds else math.nan


def predict_masks(params: ModelParams, cases: Sequence[Case], mapper, threshold=0.5, trim=False) -> List[Mask]:
    out = []
    for c in cases:
        m = Mask(predict_probability(params, c.ged4, mapper) >= threshold, c.ged4.spacing_mm)
        out.append(trim_mask(m) if trim else m)
    return out


def inject_speckle(m: Mask, rng: np.random.Generator, n_blobs: int = 12, min_gap: int = 3) -> Mask:
    """Add small 2x2x1 foreground blobs at least ``min_gap`` voxels away from the mask."""
    data = m.data.astype(bool)
    forbidden = binary_dilation(data, iterations=min_gap) if data.any() else np.zeros_like(data)
    out = data.copy()
    dims = np.array(data.shape)
    placed, tries = 0, 0
    while placed < n_blobs and tries < 50 * n_blobs:
        tries += 1
        c = rng.integers(0, dims - np.array([2, 2, 1]) + 1)
        sl = (slice(c[0], c[0] + 2), slice(c[1], c[1] + 2), slice(c[2], c[2] + 1))
        if forbidden[sl].any():
            continue
        out[sl] = True
        # keep speckles apart so each stays a separate component
        forbidden |= _box_mask(data.shape, sl, 1)
        placed += 1
    return Mask(out, m.spacing_mm)


def _box_mask(shape, sl, grow: int) -> np.ndarray:
    b = np.zeros(shape, dtype=bool)
    b[tuple(slice(max(s.start - grow, 0), s.stop + grow) for s in sl)] = True
    return b


# ----------------------------------------------------------------------------
# ablation


@dataclass
class AblationConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=lambda: AdaptConfig(trim=False))
    speckle_blobs: int = 12


@dataclass
class AblationResult:
    scores: Dict[str, List[CaseScore]]
    trim_rows: List[dict]
    timings: Dict[str, float]
    out_dir: Path

    def mean_dice(self, arm: str) -> float:
        return mean_scores(self.scores[arm])[0]

    def case_dice(self, arm: str) -> List[float]:
        return [s.dice for s in self.scores[arm]]


def _arm_config(base: TrainConfig, **kw) -> TrainConfig:
    return replace(base, **kw)


def _write_scores(scores: Dict[str, List[CaseScore]], out: Path) -> None:
    with (out / "per_case.csv").open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["arm", "case_id", "dice", "hd_mm"])
        for arm, rows in scores.items():
            for s in rows:
                w.writerow([arm, s.case_id, repr(s.dice), repr(s.hd_mm)])
    with (out / "summary.csv").open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["arm", "description", "mean_dice", "mean_hd_mm"])
        for arm, rows in scores.items():
            d, h = mean_scores(rows)
            w.writerow([arm, ARM_LABELS.get(arm, arm), repr(d), repr(h)])


def run_ablation(out_dir, config: Optional[AblationConfig] = None) -> AblationResult:
    """Run arms A, D, E, F, G, H on the phantom benchmark and write CSVs under ``out_dir``.

    A  supervised only (standard augmentation)
    D  mean teacher with histogram matching on both branches
    E  D followed by pseudo-label fine-tuning
    F  E with the contrast mapper's second input channel
    G  F adapted online over the test stream; the frozen reference is F
    H  G's masks with injected speckle, before and after trimming
    """
    cfg = config or AblationConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings: Dict[str, float] = {}
    t0 = time.perf_counter()

    manifest = generate_phantom_dataset(cfg.phantom, out / "data")
    sets = load_training_sets(manifest)
    truth = [c.mask for c in sets.test]
    timings["synth"] = time.perf_counter() - t0

    def evaluate(arm: str, masks: Sequence[Mask]) -> List[CaseScore]:
        s = [score_case(c.case_id, m, t) for c, m, t in zip(sets.test, masks, truth)]
        logger.info("arm %s mean dice %.4f", arm, mean_scores(s)[0])
        return s

    base = cfg.train
    scores: Dict[str, List[CaseScore]] = {}

    # A
    t = time.perf_counter()
    cfg_a = _arm_config(base, use_mean_teacher=False, hist_labeled=False, hist_unlabeled=False, use_contrast=False)
    s_a, _, h_a = train(sets.labeled, sets.unlabeled, cfg_a, None, sets.bank)
    write_history(h_a, out / "history_A.csv")
    scores["A"] = evaluate("A", predict_masks(s_a, sets.test, None))
    timings["A"] = time.perf_counter() - t

    # D
    t = time.perf_counter()
    cfg_d = _arm_config(base, use_contrast=False)
    s_d, t_d, h_d = train(sets.labeled, sets.unlabeled, cfg_d, None, sets.bank)
    write_history(h_d, out / "history_D.csv")
    scores["D"] = evaluate("D", predict_masks(s_d, sets.test, None))
    timings["D"] = time.perf_counter() - t

    # E
    t = time.perf_counter()
    s_e, _, h_e = _pseudo_round(s_d, t_d, sets, cfg_d, None, out / "pseudo_E")
    write_history(h_e, out / "history_E.csv")
    scores["E"] = evaluate("E", predict_masks(s_e, sets.test, None))
    timings["E"] = time.perf_counter() - t

    # F
    t = time.perf_counter()
    mapper_hist: List[float] = []
    mapper = train_contrast_mapper(mapper_pairs(manifest), base, history=mapper_hist)
    with (out / "mapper_history.csv").open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(mapper_hist):
            w.writerow([i, repr(v)])
    cfg_f = _arm_config(base, use_contrast=True)
    s_f0, t_f0, h_f0 = train(sets.labeled, sets.unlabeled, cfg_f, mapper, sets.bank)
    write_history(h_f0, out / "history_F_pretrain.csv")
    s_f, _, h_f = _pseudo_round(s_f0, t_f0, sets, cfg_f, mapper, out / "pseudo_F")
    write_history(h_f, out / "history_F.csv")
    scores["F"] = evaluate("F", predict_masks(s_f, sets.test, mapper))
    timings["F"] = time.perf_counter() - t

    # G
    t = time.perf_counter()
    adapt_cfg = replace(cfg.adapt, trim=False)
    state = AdaptState.from_source(s_f, adapt_cfg)
    stream = [enhance_and_stack(c.ged4, mapper).data for c in sets.test]
    g_masks, _, trace = run_stream(state, stream, sets.test[0].ged4.spacing_mm)
    write_trace(trace, out / "tta_trace.csv")
    scores["G"] = evaluate("G", g_masks)
    timings["G"] = time.perf_counter() - t

    # H
    trim_rows = []
    h_masks = []
    for i, (c, m, gt) in enumerate(zip(sets.test, g_masks, truth)):
        rng = np.random.default_rng([int(base.seed), 0x737063, i])
        noisy = inject_speckle(m, rng, cfg.speckle_blobs)
        trimmed = trim_mask(noisy)
        h_masks.append(trimmed)
        pre, post = score_case(c.case_id, noisy, gt), score_case(c.case_id, trimmed, gt)
        trim_rows.append(
            {
                "case_id": c.case_id,
                "dice_pre": pre.dice,
                "dice_post": post.dice,
                "hd_pre_mm": pre.hd_mm,
                "hd_post_mm": post.hd_mm,
                "components_pre": connected_components(noisy).n_components,
                "components_post": connected_components(trimmed).n_components,
            }
        )
    scores["H"] = evaluate("H", h_masks)
    with (out / "trim.csv").open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        keys = list(trim_rows[0])
        w.writerow(keys)
        for r in trim_rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in keys])

    _write_scores(scores, out)
    timings["total"] = time.perf_counter() - t0
    # timings change run to run, so they go to JSON rather than the compared CSVs
    (out / "timings.json").write_text(json.dumps(timings, indent=2) + "\n", encoding="utf-8")
    return AblationResult(scores, trim_rows, timings, out)


def _pseudo_round(student, teacher, sets: TrainingSets, config: TrainConfig, mapper, out_dir: Path):
    pseudo = generate_pseudo_labels(student, sets.pseudo_pool, config.pseudo_threshold, mapper)
    save_pseudo_labels(pseudo, out_dir)
    pseudo_cases = attach_pseudo_labels(sets.pseudo_pool, pseudo, config.min_confidence)
    return finetune(student, teacher, sets.labeled, pseudo_cases, sets.unlabeled, config, mapper, sets.bank)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="Run the phantom ablation (arms A, D, E, F, G, H).")
    ap.add_argument("out", help="output directory")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = AblationConfig(PhantomSpec(seed=args.seed), TrainConfig(seed=args.seed), AdaptConfig(trim=False, seed=args.seed))
    result = run_ablation(args.out, cfg)
    for arm in result.scores:
        print(f"{arm}  mean dice {result.mean_dice(arm):.4f}  {ARM_LABELS[arm]}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
