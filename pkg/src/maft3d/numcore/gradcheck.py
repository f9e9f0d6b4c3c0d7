"""Central-difference verification of taped gradients."""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError, Graph, NumericError, Tensor, no_grad


def gradient_check(f, point, h: float = 1e-5, coords=None) -> float:
    """Max relative error between taped and finite-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor. The comparison runs over all
    coordinates of ``point`` unless ``coords`` (flat indices) narrows it.
    Relative error per coordinate is |a - n| / max(1, |a|, |n|).
    """
    x0 = np.asarray(point, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    with Graph() as graph:
        y = f(xt)
        if not isinstance(y, Tensor) or y.size != 1:
            raise DimensionError("gradient_check: f must return a scalar Tensor")
        graph.backward(y)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
    analytic = analytic.ravel()

    flat = x0.ravel()
    if coords is None:
        coords = range(flat.size)
    worst = 0.0
    with no_grad():
        for i in coords:
            probe = flat.copy()
            probe[i] = flat[i] + h
            fp = f(Tensor(probe.reshape(x0.shape))).item()
            probe[i] = flat[i] - h
            fm = f(Tensor(probe.reshape(x0.shape))).item()
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("gradient_check: non-finite value at probe point")
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > worst:
                worst = err
    return worst
