"""Semi-supervised mean-teacher training of the seg-v1 network.

Labeled samples contribute Dice + cross-entropy; each unlabeled sample is
expanded into two augmented views, the teacher predicts on one and the
student on the other, and the squared difference in the common frame is the
consistency term weighted by a linear ramp.
"""

from __future__ import annotations

import csv
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .appearance import AugmentConfig, StyleBank, StyleConfig, augment_once, flip_axes
from .backbone import (
    MomentumSGD,
    LossValue,
    ModelParams,
    add_grads,
    backward,
    clip_grad_norm,
    ce_loss,
    ce_loss_grad,
    dice_loss,
    dice_loss_grad,
    init_params,
    mse_consistency,
    mse_consistency_grad,
    network_forward,
    network_forward_recorded,
    poly_lr,
    save_checkpoint,
    sgd_step,
)
from .contrast import enhance_and_stack
from .data import Case
from .volume import Volume

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    alpha_ema: float = 0.99
    lambda_mse_max: float = 1.0
    rampup_epochs: int = 40
    epochs: int = 150
    lr0: float = 0.01
    momentum: float = 0.99
    grad_clip: float = 12.0
    lambda_ssim: float = 0.8
    target_spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 2.5)
    seed: int = 0
    labeled_batch: int = 2
    unlabeled_batch: int = 2
    iters_per_epoch: int = 4
    patch_size: Tuple[int, int, int] = (32, 32, 32)
    # augmentation toggles
    use_mean_teacher: bool = True
    hist_labeled: bool = True
    hist_unlabeled: bool = True
    std_aug: bool = True
    style_full_prob: float = 0.5
    style_blend_range: Tuple[float, float] = (0.5, 1.0)
    flip_prob: float = 0.5
    gamma_range: Tuple[float, float] = (0.8, 1.25)
    # contrast mapper
    use_contrast: bool = True
    mapper_epochs: int = 200
    mapper_momentum: float = 0.97
    mapper_grad_clip: float = 1.0
    # pseudo-label fine-tuning
    finetune_epochs: int = 50
    # fine-tuning restarts the poly schedule from this lower base rate
    finetune_lr0: float = 0.001
    pseudo_threshold: float = 0.5
    min_confidence: Optional[float] = None

    def __post_init__(self):
        self.target_spacing_mm = tuple(float(s) for s in self.target_spacing_mm)  # type: ignore[assignment]
        self.patch_size = tuple(int(s) for s in self.patch_size)  # type: ignore[assignment]
        self.style_blend_range = tuple(float(s) for s in self.style_blend_range)  # type: ignore[assignment]
        self.gamma_range = tuple(float(s) for s in self.gamma_range)  # type: ignore[assignment]
        if not 0.0 <= self.alpha_ema < 1.0:
            raise ValueError(f"alpha_ema must be in [0, 1), got {self.alpha_ema}")
        if self.rampup_epochs < 0 or self.epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("rampup_epochs, epochs and finetune_epochs must be >= 0")
        if self.lr0 <= 0 or self.finetune_lr0 <= 0:
            raise ValueError("lr0 and finetune_lr0 must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    def augment_config(self, with_style: bool) -> AugmentConfig:
        if not self.std_aug:
            flip_prob, gamma_range = 0.0, (1.0, 1.0)
        else:
            flip_prob, gamma_range = self.flip_prob, self.gamma_range
        return AugmentConfig(
            style_prob=1.0 if with_style else 0.0,
            style=StyleConfig(self.style_full_prob, self.style_blend_range),
            flip_prob=flip_prob,
            gamma_range=gamma_range,
        )


def ema_update(teacher: ModelParams, student: ModelParams, alpha: float) -> ModelParams:
    """``teacher <- alpha * teacher + (1 - alpha) * student``, element-wise."""
    teacher.check_compatible(student)
    out = OrderedDict()
    for k, t in teacher.items():
        s = student[k].astype(np.float64)
        out[k] = (alpha * t.astype(np.float64) + (1.0 - alpha) * s).astype(t.dtype)
    return ModelParams(out, teacher.arch_id)


def ramp_lambda(epoch: int, config: TrainConfig) -> float:
    """Linear ramp of the consistency weight from 0 to ``lambda_mse_max``."""
    if config.rampup_epochs == 0:
        return config.lambda_mse_max
    return config.lambda_mse_max * min(max(epoch, 0) / config.rampup_epochs, 1.0)


# ----------------------------------------------------------------------------
# sample preparation


@dataclass
class LabeledSample:
    x: np.ndarray  # (2, px, py, pz)
    y: np.ndarray  # (px, py, pz) float {0, 1}


@dataclass
class UnlabeledSample:
    """Two views of one crop. ``flips_*`` map each view back to the common frame."""

    x_student: np.ndarray
    x_teacher: np.ndarray
    flips_student: Tuple[bool, bool, bool] = (False, False, False)
    flips_teacher: Tuple[bool, bool, bool] = (False, False, False)


def _crop_box(dims, patch, rng: np.random.Generator) -> Tuple[slice, slice, slice]:
    box = []
    for d, p in zip(dims, patch):
        p = min(p, d)
        start = int(rng.integers(0, d - p + 1))
        box.append(slice(start, start + p))
    return tuple(box)  # type: ignore[return-value]


class SampleFactory:
    """Turns cases into augmented, stacked, cropped network samples.

    Stacked inputs of unaugmented volumes are cached since the mapper pass
    dominates the cost of preparing a sample.
    """

    def __init__(self, config: TrainConfig, mapper: Optional[ModelParams], bank: Optional[StyleBank]):
        self.config = config
        self.mapper = mapper
        self.bank = bank if bank is not None and len(bank) > 0 else None
        self._cache: Dict[int, np.ndarray] = {}

    def stacked(self, case: Case) -> np.ndarray:
        key = id(case.ged4)
        if key not in self._cache:
            self._cache[key] = enhance_and_stack(case.ged4, self.mapper).data
        return self._cache[key]

    def _view(self, case: Case, rng: np.random.Generator, with_style: bool):
        cfg = self.config.augment_config(with_style and self.bank is not None)
        if cfg.style_prob == 0 and cfg.flip_prob == 0 and cfg.gamma_range == (1.0, 1.0):
            return self.stacked(case), (False, False, False)
        view = augment_once(case.ged4, self.bank, rng, cfg)
        # stack in the common frame so normalisation does not depend on the flip
        common = view.to_common(view.volume.data)
        x = enhance_and_stack(Volume(common, case.ged4.spacing_mm), self.mapper).data
        return x, view.flips

    def labeled(self, case: Case, rng: np.random.Generator) -> LabeledSample:
        if case.mask is None:
            raise ValueError(f"case {case.case_id} has no label")
        x, flips = self._view(case, rng, self.config.hist_labeled)
        box = _crop_box(case.ged4.dims, self.config.patch_size, rng)
        xc = flip_axes(x[(slice(None),) + box], flips)
        yc = flip_axes(case.mask.data[box].astype(np.float64), flips)
        return LabeledSample(np.ascontiguousarray(xc), np.ascontiguousarray(yc))

    def unlabeled(self, case: Case, rng: np.random.Generator) -> UnlabeledSample:
        xa, fa = self._view(case, rng, self.config.hist_unlabeled)
        xb, fb = self._view(case, rng, self.config.hist_unlabeled)
        box = _crop_box(case.ged4.dims, self.config.patch_size, rng)
        sl = (slice(None),) + box
        return UnlabeledSample(
            np.ascontiguousarray(flip_axes(xa[sl], fa)),
            np.ascontiguousarray(flip_axes(xb[sl], fb)),
            fa,
            fb,
        )


# ----------------------------------------------------------------------------
# optimisation


def train_step(
    student: ModelParams,
    teacher: ModelParams,
    labeled_batch: Sequence[LabeledSample],
    unlabeled_batch: Sequence[UnlabeledSample],
    epoch: int,
    config: TrainConfig,
    lr: Optional[float] = None,
    schedule_epochs: Optional[int] = None,
    optimizer: Optional[MomentumSGD] = None,
) -> Tuple[ModelParams, ModelParams, LossValue]:
    """One SGD step on ``L_sup + lambda(epoch) * L_mse`` followed by the EMA teacher update.

    Without ``optimizer`` the step is plain SGD; pass a persistent
    :class:`MomentumSGD` to carry momentum across steps.
    """
    lam = ramp_lambda(epoch, config) if config.use_mean_teacher else 0.0
    if not labeled_batch and (lam == 0.0 or not unlabeled_batch):
        raise ValueError("nothing to optimise: empty labeled batch and no consistency term")
    if lr is None:
        lr = poly_lr(config.lr0, epoch, schedule_epochs if schedule_epochs is not None else config.epochs)

    grads = None
    dice_sum = ce_sum = 0.0
    nl = len(labeled_batch)
    for s in labeled_batch:
        p, rec = network_forward_recorded(student, s.x)
        dice_sum += dice_loss(p, s.y).total
        ce_sum += ce_loss(p, s.y).total
        g = (dice_loss_grad(p, s.y) + ce_loss_grad(p, s.y)) / nl
        grads = add_grads(grads, backward(student, rec, g))

    mse_sum = 0.0
    nu = len(unlabeled_batch) if config.use_mean_teacher else 0
    for s in unlabeled_batch[:nu]:
        t_pred = flip_axes(network_forward(teacher, s.x_teacher), s.flips_teacher)
        p, rec = network_forward_recorded(student, s.x_student)
        s_pred = flip_axes(p, s.flips_student)
        mse_sum += mse_consistency(s_pred, t_pred).total
        if lam > 0.0:
            g = flip_axes(mse_consistency_grad(s_pred, t_pred), s.flips_student) * (lam / nu)
            grads = add_grads(grads, backward(student, rec, g))

    comps = {
        "dice": dice_sum / nl if nl else 0.0,
        "ce": ce_sum / nl if nl else 0.0,
        "mse": mse_sum / nu if nu else 0.0,
    }
    loss = LossValue.combine(comps, {"dice": 1.0, "ce": 1.0, "mse": lam})
    if grads is not None and config.grad_clip > 0:
        grads, _ = clip_grad_norm(grads, config.grad_clip)
    if grads is None:
        new_student = student
    elif optimizer is not None:
        new_student = optimizer.step(student, grads, lr)
    else:
        new_student = sgd_step(student, grads, lr)
    new_teacher = ema_update(teacher, new_student, config.alpha_ema)
    return new_student, new_teacher, loss


@dataclass
class EpochRecord:
    epoch: int
    dice: float
    ce: float
    mse: float
    lam: float
    lr: float

    @property
    def supervised(self) -> float:
        return self.dice + self.ce


HISTORY_FIELDS = ("epoch", "dice", "ce", "mse", "lambda", "lr")


def write_history(history: Sequence[EpochRecord], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for r in history:
            w.writerow([r.epoch, repr(r.dice), repr(r.ce), repr(r.mse), repr(r.lam), repr(r.lr)])
    return path


def fit(
    student: ModelParams,
    teacher: ModelParams,
    labeled: Sequence[Case],
    unlabeled: Sequence[Case],
    config: TrainConfig,
    epochs: int,
    mapper: Optional[ModelParams] = None,
    bank: Optional[StyleBank] = None,
    out_dir=None,
    stream: int = 0,
    checkpoint_every: int = 0,
) -> Tuple[ModelParams, ModelParams, List[EpochRecord]]:
    """Run ``epochs`` epochs of mean-teacher training from the given parameters.

    Sample draws use one RNG per (seed, stream, epoch, iteration), so a run is
    a pure function of its inputs. ``stream`` separates pre-training from
    fine-tuning draws.
    """
    if not labeled:
        raise ValueError("the labeled set is empty")
    factory = SampleFactory(config, mapper, bank)
    use_unlabeled = config.use_mean_teacher and len(unlabeled) > 0
    optimizer = MomentumSGD(config.momentum)
    history: List[EpochRecord] = []
    out = Path(out_dir) if out_dir is not None else None
    for epoch in range(epochs):
        lr = poly_lr(config.lr0, epoch, epochs)
        lam = ramp_lambda(epoch, config) if config.use_mean_teacher else 0.0
        acc = np.zeros(3)
        for it in range(config.iters_per_epoch):
            rng = np.random.default_rng([int(config.seed), stream, epoch, it])
            lab_idx = rng.integers(len(labeled), size=config.labeled_batch)
            lab = [factory.labeled(labeled[i], rng) for i in lab_idx]
            unl = []
            if use_unlabeled:
                unl_idx = rng.integers(len(unlabeled), size=config.unlabeled_batch)
                unl = [factory.unlabeled(unlabeled[i], rng) for i in unl_idx]
            student, teacher, loss = train_step(student, teacher, lab, unl, epoch, config, lr=lr, optimizer=optimizer)
            acc += [loss.components["dice"], loss.components["ce"], loss.components["mse"]]
        acc /= max(config.iters_per_epoch, 1)
        history.append(EpochRecord(epoch, float(acc[0]), float(acc[1]), float(acc[2]), lam, lr))
        logger.info("epoch %d dice %.4f ce %.4f mse %.5f lambda %.3f lr %.5f", epoch, *acc, lam, lr)
        if out is not None and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(student, out / f"student_e{epoch + 1:03d}.ckpt")
            save_checkpoint(teacher, out / f"teacher_e{epoch + 1:03d}.ckpt")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_history(history, out / "history.csv")
        save_checkpoint(student, out / f"student_e{epochs:03d}.ckpt")
        save_checkpoint(teacher, out / f"teacher_e{epochs:03d}.ckpt")
    return student, teacher, history


def init_student_teacher(config: TrainConfig) -> Tuple[ModelParams, ModelParams]:
    student = init_params("seg-v1", seed=config.seed)
    return student, student.copy()


def train(
    labeled: Sequence[Case],
    unlabeled: Sequence[Case],
    config: TrainConfig,
    mapper: Optional[ModelParams] = None,
    bank: Optional[StyleBank] = None,
    out_dir=None,
) -> Tuple[ModelParams, ModelParams, List[EpochRecord]]:
    """Initialise student and teacher identically and train for ``config.epochs``."""
    if not labeled:
        raise ValueError("the labeled set is empty")
    student, teacher = init_student_teacher(config)
    return fit(student, teacher, labeled, unlabeled, config, config.epochs, mapper, bank, out_dir)


def predict_probability(params: ModelParams, ged4, mapper: Optional[ModelParams]) -> np.ndarray:
    """Full-volume foreground probabilities for a raw GED4 volume."""
    return network_forward(params, enhance_and_stack(ged4, mapper).data)
