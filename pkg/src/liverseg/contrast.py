"""Contrast-aware enhancement: SSIM, the MSE + SSIM mapper loss, mapper training and input stacking."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .backbone import (
    LossValue,
    ModelParams,
    ShapeError,
    MomentumSGD,
    backward,
    clip_grad_norm,
    init_params,
    map_forward,
    network_forward_recorded,
    poly_lr,
)
from .volume import Volume, resample_trilinear, zscore_array

logger = logging.getLogger(__name__)

WINDOW = 7
K1, K2 = 0.01, 0.03
RANGE_FLOOR = 1e-6


@dataclass(frozen=True)
class AlignedPair:
    t1: Volume
    ged4: Volume
    id: str = ""

    def __post_init__(self):
        if not self.t1.same_geometry(self.ged4):
            raise ShapeError(f"pair {self.id!r}: t1 and ged4 geometry differ")


def _box_sum(a: np.ndarray, win: Tuple[int, int, int]) -> np.ndarray:
    """Sum over every fully contained window of shape ``win`` (valid mode)."""
    s = a
    for ax, w in enumerate(win):
        c = np.cumsum(s, axis=ax)
        pad = [(0, 0)] * 3
        pad[ax] = (1, 0)
        c = np.pad(c, pad)
        n = c.shape[ax]
        s = np.take(c, np.arange(w, n), axis=ax) - np.take(c, np.arange(0, n - w), axis=ax)
    return s


def _box_adjoint(g: np.ndarray, win: Tuple[int, int, int]) -> np.ndarray:
    """Transpose of :func:`_box_sum`: spread each window value over its voxels."""
    padded = np.pad(g, [(w - 1, w - 1) for w in win])
    return _box_sum(padded, win)


def _windows(shape) -> Tuple[int, int, int]:
    if min(shape) < WINDOW:
        return tuple(int(s) for s in shape)  # type: ignore[return-value]
    return (WINDOW, WINDOW, WINDOW)


def _dynamic_range(a: np.ndarray, b: np.ndarray) -> float:
    return max(float(max(a.max(), b.max()) - min(a.min(), b.min())), RANGE_FLOOR)


def _ssim_terms(a: np.ndarray, b: np.ndarray):
    win = _windows(a.shape)
    n = float(np.prod(win))
    L = _dynamic_range(a, b)
    c1, c2 = (K1 * L) ** 2, (K2 * L) ** 2
    mu_a = _box_sum(a, win) / n
    mu_b = _box_sum(b, win) / n
    var_a = _box_sum(a * a, win) / n - mu_a**2
    var_b = _box_sum(b * b, win) / n - mu_b**2
    cov = _box_sum(a * b, win) / n - mu_a * mu_b
    A1 = 2 * mu_a * mu_b + c1
    A2 = 2 * cov + c2
    B1 = mu_a**2 + mu_b**2 + c1
    B2 = var_a + var_b + c2
    S = (A1 * A2) / (B1 * B2)
    return dict(win=win, n=n, L=L, mu_a=mu_a, mu_b=mu_b, A1=A1, A2=A2, B1=B1, B2=B2, S=S)


def _ssim_arrays(a, b) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a.data if isinstance(a, Volume) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Volume) else b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise ShapeError(f"ssim3d geometry mismatch: {a.shape} vs {b.shape}")
    return a, b


def ssim3d(a, b) -> float:
    """Mean SSIM over all 7x7x7 uniform windows (one whole-volume window if any dim < 7)."""
    if isinstance(a, Volume) and isinstance(b, Volume) and not a.same_geometry(b):
        raise ShapeError("ssim3d geometry mismatch")
    a, b = _ssim_arrays(a, b)
    return float(_ssim_terms(a, b)["S"].mean())


def ssim3d_grad(a, b) -> np.ndarray:
    """d ssim3d(a, b) / d a, including the dependence of the dynamic range on ``a``."""
    a, b = _ssim_arrays(a, b)
    t = _ssim_terms(a, b)
    S, A1, A2, B1, B2 = t["S"], t["A1"], t["A2"], t["B1"], t["B2"]
    win, n = t["win"], t["n"]
    nw = S.size
    d_mu = S * (2 * t["mu_b"] / A1 - 2 * t["mu_a"] / B1)
    d_var = -S / B2
    d_cov = 2 * S / A2
    grad = (
        _box_adjoint(d_mu, win)
        + 2 * a * _box_adjoint(d_var, win)
        - 2 * _box_adjoint(d_var * t["mu_a"], win)
        + b * _box_adjoint(d_cov, win)
        - _box_adjoint(d_cov * t["mu_b"], win)
    ) / (n * nw)
    L = t["L"]
    if L > RANGE_FLOOR:
        d_c1 = np.sum(S * (1 / A1 - 1 / B1))
        d_c2 = np.sum(S * (1 / A2 - 1 / B2))
        d_L = (d_c1 * 2 * K1**2 * L + d_c2 * 2 * K2**2 * L) / nw
        if a.max() >= b.max():
            grad.flat[int(np.argmax(a))] += d_L
        if a.min() <= b.min():
            grad.flat[int(np.argmin(a))] -= d_L
    return grad


def contrast_loss(pred, target, lambda_ssim: float = 0.8) -> LossValue:
    """``MSE + lambda_ssim * (1 - SSIM)``."""
    p, t = _ssim_arrays(pred, target)
    mse = float(np.mean((p - t) ** 2))
    ssim_term = 1.0 - ssim3d(p, t)
    return LossValue.combine({"mse": mse, "ssim": ssim_term}, {"mse": 1.0, "ssim": lambda_ssim})


def contrast_loss_grad(pred, target, lambda_ssim: float = 0.8) -> np.ndarray:
    p, t = _ssim_arrays(pred, target)
    return 2.0 * (p - t) / p.size - lambda_ssim * ssim3d_grad(p, t)


def train_contrast_mapper(
    pairs: Sequence[AlignedPair],
    config,
    init: Optional[ModelParams] = None,
    history: Optional[List[LossValue]] = None,
) -> ModelParams:
    """Fit the map-v1 network G: t1 -> ged4 with the MSE + SSIM loss.

    One epoch visits every pair once in a seeded shuffled order with one
    momentum SGD step per pair (momentum and clipping taken from ``config``). The epoch loss (mean over pairs, measured before each
    step) is appended to ``history`` when given.
    """
    if not pairs:
        raise ValueError("train_contrast_mapper needs at least one aligned pair")
    spacing = tuple(config.target_spacing_mm)
    prepared = []
    for pr in pairs:
        t1 = resample_trilinear(pr.t1, spacing)
        g4 = resample_trilinear(pr.ged4, spacing)
        prepared.append((t1.data[None].astype(np.float64), g4.data.astype(np.float64)))
    params = init.copy() if init is not None else init_params("map-v1", seed=config.seed)
    epochs = int(config.mapper_epochs)
    rng = np.random.default_rng([int(config.seed), 0x6D6170])
    opt = MomentumSGD(getattr(config, "mapper_momentum", 0.0))
    clip = getattr(config, "mapper_grad_clip", 0.0)
    for epoch in range(epochs):
        lr = poly_lr(config.lr0, epoch, epochs)
        order = rng.permutation(len(prepared))
        losses = []
        for i in order:
            x, target = prepared[i]
            out, rec = network_forward_recorded(params, x)
            losses.append(contrast_loss(out, target, config.lambda_ssim).total)
            g = backward(params, rec, contrast_loss_grad(out, target, config.lambda_ssim))
            if clip > 0:
                g, _ = clip_grad_norm(g, clip)
            params = opt.step(params, g, lr)
        if history is not None:
            history.append(float(np.mean(losses)))
        logger.debug("mapper epoch %d loss %.6f", epoch, float(np.mean(losses)))
    return params


def enhance_and_stack(ged4: Volume, mapper: Optional[ModelParams]) -> Volume:
    """Two-channel input: z-scored GED4 and z-scored mapper(GED4).

    With ``mapper=None`` (contrast module disabled) the second channel repeats
    the first, keeping the segmentation network's two-channel contract.
    """
    if ged4.channels != 1:
        raise ShapeError("enhance_and_stack expects a single-channel volume")
    c0 = zscore_array(ged4.data)
    if mapper is None:
        c1 = c0
    else:
        c1 = zscore_array(map_forward(mapper, ged4.data))
    return Volume(np.stack([c0, c1]), ged4.spacing_mm)
