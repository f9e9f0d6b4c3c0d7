"""Scalar training losses over tensors.

Reductions inside bce/dice use exact (fsum) summation so the reported loss is
bit-identical under any permutation of the point axis, which the matching
pipeline relies on for reproducibility.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import DimensionError, Tensor, custom_op

_CLAMP = 1e-7


def _exact_sum(arr: np.ndarray) -> float:
    return math.fsum(arr.ravel().tolist())


def _check_probs(p: np.ndarray, op: str) -> None:
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise ValueError(f"{op}: probabilities must lie in [0, 1]")


def _check_binary(g: np.ndarray, op: str) -> None:
    if not np.all((g == 0.0) | (g == 1.0)):
        raise ValueError(f"{op}: target mask must be binary")


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean of -log softmax(logits)[target] over rows.

    ``weights`` (per row, default all ones) are normalized by their sum, the
    convention used to down-weight no-object rows.
    """
    targets = np.asarray(targets)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects 2D logits, got {logits.shape}")
    rows, cols = logits.shape
    if targets.shape != (rows,):
        raise DimensionError(
            f"cross_entropy: targets shape {targets.shape} does not match logits rows ({rows},)"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= cols):
        raise ValueError(f"cross_entropy: class targets must lie in [0, {cols})")
    w = np.ones(rows) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (rows,):
        raise DimensionError(f"cross_entropy: weights shape {w.shape} does not match rows ({rows},)")
    denom = float(w.sum())
    if denom <= 0.0:
        raise ValueError("cross_entropy: weights must have positive sum")

    x = logits.data
    m = x.max(axis=1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    picked = log_probs[np.arange(rows), targets]
    value = -float(np.dot(w, picked)) / denom

    def bwd(g):
        coeff = (w / denom)[:, None]
        grad = np.exp(log_probs) * coeff
        grad[np.arange(rows), targets] -= w / denom
        return (grad * float(g),)

    return custom_op(np.float64(value), (logits,), bwd, "cross_entropy")


def binary_cross_entropy(probs: Tensor, targets) -> Tensor:
    """Mean per-element bce between soft probabilities and a binary mask."""
    g = np.asarray(targets, dtype=np.float64)
    if probs.shape != g.shape:
        raise DimensionError(f"bce: shapes {probs.shape} and {g.shape} differ")
    _check_probs(probs.data, "bce")
    _check_binary(g, "bce")
    p = probs.data
    pc = np.clip(p, _CLAMP, 1.0 - _CLAMP)
    terms = -(g * np.log(pc) + (1.0 - g) * np.log1p(-pc))
    size = p.size
    value = _exact_sum(terms) / size
    inside = (p >= _CLAMP) & (p <= 1.0 - _CLAMP)

    def bwd(og):
        grad = (pc - g) / (pc * (1.0 - pc)) * inside / size
        return (grad * float(og),)

    return custom_op(np.float64(value), (probs,), bwd, "bce")


def dice(probs: Tensor, targets, eps: float = 1.0) -> Tensor:
    """Soft overlap loss, one term per mask row, averaged over rows."""
    g = np.asarray(targets, dtype=np.float64)
    if probs.shape != g.shape:
        raise DimensionError(f"dice: shapes {probs.shape} and {g.shape} differ")
    _check_probs(probs.data, "dice")
    _check_binary(g, "dice")
    p2 = np.atleast_2d(probs.data)
    g2 = np.atleast_2d(g)
    rows = p2.shape[0]
    a = np.empty(rows)
    b = np.empty(rows)
    for r in range(rows):
        a[r] = 2.0 * _exact_sum(p2[r] * g2[r]) + eps
        b[r] = _exact_sum(p2[r]) + _exact_sum(g2[r]) + eps
    value = math.fsum((1.0 - a / b).tolist()) / rows

    def bwd(og):
        # d/dp_j of (1 - A/B) = -(2 g_j B - A) / B^2
        grad = -(2.0 * g2 * b[:, None] - a[:, None]) / (b * b)[:, None] / rows
        return (grad.reshape(probs.shape) * float(og),)

    return custom_op(np.float64(value), (probs,), bwd, "dice")


def l1(pred: Tensor, target) -> Tensor:
    """Mean absolute difference of equal-shape tensors."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise DimensionError(f"l1: shapes {pred.shape} and {t.shape} differ")
    diff = pred.data - t
    size = diff.size
    value = _exact_sum(np.abs(diff)) / size

    def bwd(og):
        return (np.sign(diff) / size * float(og),)

    return custom_op(np.float64(value), (pred,), bwd, "l1")


def loss_terms(pred: Tensor, target, kind: str) -> Tensor:
    """Dispatch by loss kind: ce | bce | dice | l1."""
    if kind == "ce":
        return cross_entropy(pred, target)
    if kind == "bce":
        return binary_cross_entropy(pred, target)
    if kind == "dice":
        return dice(pred, target)
    if kind == "l1":
        return l1(pred, target)
    raise ValueError(f"unknown loss kind {kind!r}")
