"""Central finite-difference oracle for gradient verification.

This path is deliberately independent of the autodiff internals: it only ever
calls the loss function and perturbs raw parameter entries. Run it under
float64 (``using_dtype``); central differences are unreliable in float32.
"""

from __future__ import annotations

import numpy as np

from ..errors import NumericError
from .tensor import backward


def finite_difference_check(f, params: dict, eps=1e-4, floor=1e-12):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the parameter dict to a scalar Tensor. Per scalar entry the
    error is |analytic - numeric| / max(floor, |numeric|); the max over all
    entries of all parameters is returned. A ``floor`` near the gradient's
    overall scale turns the comparison absolute where a component happens to
    cross zero, where pure relative error is meaningless.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    loss = f(params)
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is non-finite at the evaluation point")
    backward(loss, params=params.values())
    analytic = {k: p.grad.copy() for k, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(params).data)
            flat[i] = orig - eps
            lo = float(f(params).data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError(f"non-finite loss while perturbing '{name}'[{i}]")
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(analytic[name].reshape(-1)[i] - numeric) / max(floor, abs(numeric))
            worst = max(worst, err)
    return worst
