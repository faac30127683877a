"""Continual test-time adaptation: EMA teacher, consistency MSE and stochastic restoration."""

from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .appearance import flip_axes
from .backbone import (
    ModelParams,
    backward,
    mse_consistency,
    mse_consistency_grad,
    network_forward,
    network_forward_recorded,
    sgd_step,
)
from .mean_teacher import ema_update
from .postproc import trim_mask
from .volume import Mask

_FLIP_SETS = [(fx, fy, fz) for fx in (False, True) for fy in (False, True) for fz in (False, True)]


@dataclass
class AdaptConfig:
    restore_prob: float = 0.01
    alpha_tta: float = 0.999
    lr_tta: float = 0.001
    seed: int = 0
    # teacher target averaged over this many flipped views (0 = plain teacher output)
    n_augment: int = 0
    threshold: float = 0.5
    trim: bool = True
    min_fraction: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.restore_prob <= 1.0:
            raise ValueError("restore_prob must be in [0, 1]")
        if not 0.0 <= self.alpha_tta < 1.0:
            raise ValueError("alpha_tta must be in [0, 1)")
        if self.lr_tta < 0:
            raise ValueError("lr_tta must be >= 0")
        if not 0 <= self.n_augment <= len(_FLIP_SETS):
            raise ValueError(f"n_augment must be in [0, {len(_FLIP_SETS)}]")


@dataclass
class AdaptState:
    student: ModelParams
    teacher: ModelParams
    source: ModelParams
    config: AdaptConfig = field(default_factory=AdaptConfig)
    step: int = 0
    last_loss: float = 0.0
    last_restored: int = 0

    def __post_init__(self):
        self.student.check_compatible(self.teacher)
        self.student.check_compatible(self.source)

    @classmethod
    def from_source(cls, student: ModelParams, config: Optional[AdaptConfig] = None, teacher: Optional[ModelParams] = None):
        """Start adaptation from a trained model; the teacher defaults to a copy of it."""
        config = config or AdaptConfig()
        t = (teacher if teacher is not None else student).copy()
        return cls(student.copy(), t, student.copy(), config)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng([int(self.config.seed), 0x747461, self.step])


def _teacher_target(teacher: ModelParams, x: np.ndarray, n_augment: int, rng: np.random.Generator) -> np.ndarray:
    base = network_forward(teacher, x)
    if n_augment == 0:
        return base
    picks = rng.choice(len(_FLIP_SETS) - 1, size=n_augment - 1, replace=False) + 1 if n_augment > 1 else []
    acc = base.astype(np.float64)
    for i in picks:
        f = _FLIP_SETS[int(i)]
        acc += flip_axes(network_forward(teacher, flip_axes(x, f)), f)
    return acc / n_augment


def stochastic_restore(state: AdaptState, rng: Optional[np.random.Generator] = None) -> AdaptState:
    """Reset each student scalar to its source value with probability ``restore_prob``."""
    rng = rng if rng is not None else state.rng()
    p = state.config.restore_prob
    out = OrderedDict()
    count = 0
    for k, v in state.student.items():
        if p <= 0.0:
            out[k] = v
            continue
        hit = rng.random(v.shape) < p
        count += int(hit.sum())
        out[k] = np.where(hit, state.source[k], v).astype(v.dtype)
    state.student = ModelParams(out, state.student.arch_id)
    state.last_restored = count
    return state


def adapt_step(state: AdaptState, x: np.ndarray) -> Tuple[AdaptState, np.ndarray]:
    """One online update on a single channel-first input; returns the teacher prediction."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"expected a (channels, x, y, z) input, got shape {x.shape}")
    cfg = state.config
    rng = state.rng()
    target = _teacher_target(state.teacher, x, cfg.n_augment, rng)
    pred, rec = network_forward_recorded(state.student, x)
    state.last_loss = mse_consistency(pred, target).total
    if cfg.lr_tta > 0.0:
        grads = backward(state.student, rec, mse_consistency_grad(pred, target))
        state.student = sgd_step(state.student, grads, cfg.lr_tta)
    state.teacher = ema_update(state.teacher, state.student, cfg.alpha_tta)
    stochastic_restore(state, rng)
    state.step += 1
    return state, np.asarray(target, dtype=np.float32)


@dataclass
class TraceRow:
    step: int
    l_tta: float
    restored_count: int


def run_stream(
    state: AdaptState, stream: Sequence[np.ndarray], spacing_mm
) -> Tuple[List[Mask], List[np.ndarray], List[TraceRow]]:
    """Adapt over the stream in order; masks are thresholded teacher outputs, optionally trimmed."""
    if len(stream) == 0:
        raise ValueError("the test stream is empty")
    cfg = state.config
    masks, probs, trace = [], [], []
    for x in stream:
        state, prob = adapt_step(state, x)
        m = Mask(prob >= cfg.threshold, spacing_mm)
        if cfg.trim:
            m = trim_mask(m, cfg.min_fraction)
        masks.append(m)
        probs.append(prob)
        trace.append(TraceRow(state.step, state.last_loss, state.last_restored))
    return masks, probs, trace


def write_trace(trace: Sequence[TraceRow], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "l_tta", "restored_count"])
        for r in trace:
            w.writerow([r.step, repr(r.l_tta), r.restored_count])
    return path
