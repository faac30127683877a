"""Central finite-difference gradient check for the fixed architectures.

A perturbation that moves any ReLU pre-activation across zero makes the
finite difference straddle a kink, where it no longer estimates the
derivative of the active linear piece. Such elements are counted and reported
in ``kink_elements`` instead of being compared.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict

import numpy as np

from .backbone import ARCHITECTURES, ModelParams, backward, network_forward_recorded

# maps network output -> (loss value, dLoss/dOutput)
LossFn = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_tensor: Dict[str, float] = field(default_factory=dict)
    checked_elements: int = 0
    kink_elements: int = 0


def _relu_patterns(params: ModelParams, rec) -> list:
    layers = ARCHITECTURES[params.arch_id]
    return [rec.pre[i] > 0 for i, layer in enumerate(layers) if layer[4] == "relu"]


def check_gradients(params: ModelParams, x: np.ndarray, loss_fn: LossFn, h: float = 1e-3) -> GradCheckResult:
    """Compare analytic and central-difference gradients, tensor by tensor.

    The error of a tensor is ``max|analytic - numeric| / max|analytic|`` over
    its non-kink elements. Parameters are promoted to float64 first.
    """
    p = params.astype(np.float64)
    out, rec = network_forward_recorded(p, x)
    _, g_out = loss_fn(out)
    analytic = backward(p, rec, g_out)
    base = _relu_patterns(p, rec)

    result = GradCheckResult(0.0)
    for name, tensor in p.items():
        diffs = []
        for idx in np.ndindex(tensor.shape):
            old = tensor[idx]
            vals = []
            crossed = False
            for sign in (1.0, -1.0):
                tensor[idx] = old + sign * h
                o, r = network_forward_recorded(p, x)
                vals.append(loss_fn(o)[0])
                pats = _relu_patterns(p, r)
                crossed |= any(not np.array_equal(a, b) for a, b in zip(base, pats))
            tensor[idx] = old
            if crossed:
                result.kink_elements += 1
                continue
            numeric = (vals[0] - vals[1]) / (2.0 * h)
            diffs.append(abs(numeric - analytic[name][idx]))
            result.checked_elements += 1
        scale = float(np.abs(analytic[name]).max())
        err = max(diffs) / scale if diffs and scale > 0 else (max(diffs) if diffs else 0.0)
        result.per_tensor[name] = err
        result.max_rel_error = max(result.max_rel_error, err)
    return result
