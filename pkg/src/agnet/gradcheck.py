"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NumericsError
from .tensor import GradTape, Tensor


def check_gradients(fn: Callable[[], Tensor], params: dict[str, Tensor],
                    epsilon: float = 1e-5) -> float:
    """Compare tape gradients of ``fn()`` against central differences.

    ``fn`` must be a deterministic scalar-valued function of the current
    parameter values. Returns the maximum relative error over all parameter
    elements, with denominator max(|analytic|, |numeric|, 1e-8). Requires
    float64 parameters; a non-finite loss raises with a diagnostic.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise NumericsError(f"check_gradients requires float64 parameters; '{name}' is {p.dtype}")

    with GradTape() as tape:
        loss = fn()
        if loss.size != 1:
            raise NumericsError(f"check_gradients needs a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise NumericsError("loss is non-finite at the evaluation point")
        tape.backward(loss)
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + epsilon
            f_plus = float(fn().data)
            flat[i] = saved - epsilon
            f_minus = float(fn().data)
            flat[i] = saved
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericsError(f"non-finite loss while perturbing '{name}'[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = float(analytic[name].reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
