"""Bipartite matching between queries and ground truth, plus the training loss.

Costs combine classification, mask overlap, and center distance; the solver
returns the minimum-cost injective assignment of ground-truth columns to
query rows, tie-broken to the lexicographically smallest assignment vector.
Losses are deeply supervised: every layer is matched and scored on its own
predictions, unmatched queries are pushed toward the no-object class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import numcore as nc
from .decoder import LayerPrediction
from .scene import GroundTruth, SceneBounds

_COST_CLAMP = 1e-7


@dataclass
class LossWeights:
    cls: float = 0.5
    bce: float = 1.0
    dice: float = 1.0
    center: float = 0.5
    no_object: float = 0.1

    def validate(self) -> None:
        if min(self.cls, self.bce, self.dice, self.center) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 < self.no_object <= 1.0:
            raise ValueError("no_object weight must lie in (0, 1]")


@dataclass
class CostMatrix:
    total: np.ndarray  # (n, n_inst)
    cls: np.ndarray
    dice: np.ndarray
    bce: np.ndarray
    center: np.ndarray


class CapacityError(ValueError):
    """More ground-truth instances than queries."""


def _solve_lap(cost: np.ndarray) -> tuple[float, np.ndarray]:
    rows, cols = linear_sum_assignment(cost)
    assign = np.empty(cost.shape[1], dtype=np.int64)
    assign[cols] = rows
    return float(cost[rows, cols].sum()), assign


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment of each column to a distinct row.

    Returns, per column, the matched row index. Among equal-cost optima the
    lexicographically smallest assignment vector wins, found by fixing
    columns left to right and verifying candidate rows against the optimum.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise nc.DimensionError(f"cost matrix must be 2D, got shape {cost.shape}")
    n, m = cost.shape
    if m == 0:
        return np.empty(0, dtype=np.int64)
    if n < m:
        raise CapacityError(f"{m} columns cannot be injectively assigned to {n} rows")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix entries must be finite")

    best_total, base = _solve_lap(cost)
    tol = 1e-9 * max(1.0, abs(best_total))

    result = np.empty(m, dtype=np.int64)
    avail = np.ones(n, dtype=bool)
    remaining = best_total
    for k in range(m):
        rest = np.arange(k + 1, m)
        rows_avail = np.flatnonzero(avail)
        if rest.size:
            # optimistic completion bound per column ignoring row exclusivity
            col_min = cost[np.ix_(rows_avail, rest)].min(axis=0)
            argmins = rows_avail[cost[np.ix_(rows_avail, rest)].argmin(axis=0)]
            sub2 = np.sort(cost[np.ix_(rows_avail, rest)], axis=0)
            second = sub2[1] if rows_avail.size > 1 else col_min
        chosen = -1
        for r in rows_avail:
            if rest.size:
                bound = cost[r, k] + float(
                    np.where(argmins == r, second, col_min).sum()
                )
            else:
                bound = cost[r, k]
            if bound > remaining + tol:
                continue
            if rest.size:
                sub_rows = rows_avail[rows_avail != r]
                sub_total, _ = _solve_lap(cost[np.ix_(sub_rows, rest)])
                total = cost[r, k] + sub_total
            else:
                total = cost[r, k]
            if total <= remaining + tol:
                chosen = r
                break
        if chosen < 0:  # numerical fallback: keep the base optimum's row
            chosen = base[k] if avail[base[k]] else rows_avail[0]
        result[k] = chosen
        avail[chosen] = False
        remaining -= cost[chosen, k]
    return result


def normalized_centers(centers: np.ndarray, bounds: SceneBounds) -> np.ndarray:
    return (centers - bounds.p_min) / bounds.safe_extent()


def cost_matrix(
    pred: LayerPrediction,
    gt: GroundTruth,
    weights: LossWeights,
    bounds: SceneBounds,
    center_match: bool = True,
) -> CostMatrix:
    """Pairwise matching costs; computed without gradient recording."""
    n = pred.class_logits.shape[0]
    m = gt.n_instances
    if m > n:
        raise CapacityError(f"{m} instances exceed {n} queries")
    if m == 0:
        empty = np.zeros((n, 0))
        return CostMatrix(empty, empty.copy(), empty.copy(), empty.copy(), empty.copy())

    logits = pred.class_logits.data
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    c_cls = -log_probs[:, gt.classes]

    # mask terms in float32: they only rank candidate pairs for the solver
    probs = pred.mask_probs.data.astype(np.float32)
    masks = gt.masks.astype(np.float32)
    pc = np.clip(probs, _COST_CLAMP, 1.0 - _COST_CLAMP)
    log_p = np.log(pc)
    log_1p = np.log1p(-pc)
    big_n = probs.shape[1]
    c_bce = (-(log_p @ masks.T + log_1p @ (1.0 - masks).T) / big_n).astype(np.float64)

    inter = probs @ masks.T
    sum_p = probs.sum(axis=1, keepdims=True)
    sum_g = masks.sum(axis=1, keepdims=True).T
    c_dice = (1.0 - (2.0 * inter + 1.0) / (sum_p + sum_g + 1.0)).astype(np.float64)

    pred_norm = normalized_centers(pred.centers.data, bounds)
    gt_norm = normalized_centers(gt.centers, bounds)
    c_center = np.abs(pred_norm[:, None, :] - gt_norm[None, :, :]).mean(axis=2)

    lam_center = weights.center if center_match else 0.0
    total = (
        weights.cls * c_cls
        + weights.dice * c_dice
        + weights.bce * c_bce
        + lam_center * c_center
    )
    return CostMatrix(total, c_cls, c_dice, c_bce, c_center)


def match_layer(
    pred: LayerPrediction,
    gt: GroundTruth,
    weights: LossWeights,
    bounds: SceneBounds,
    center_match: bool = True,
) -> np.ndarray:
    """Assignment of each ground-truth instance to a query for one layer."""
    with nc.no_grad():
        costs = cost_matrix(pred, gt, weights, bounds, center_match=center_match)
    return hungarian(costs.total)


def layer_loss(
    pred: LayerPrediction,
    gt: GroundTruth,
    assignment: np.ndarray,
    weights: LossWeights,
    bounds: SceneBounds,
    center_loss: bool = True,
) -> dict[str, nc.Tensor]:
    """Per-term losses for one layer given a fixed matching."""
    n, k1 = pred.class_logits.shape
    no_object = k1 - 1
    m = gt.n_instances

    targets = np.full(n, no_object, dtype=np.int64)
    ce_weights = np.full(n, weights.no_object)
    if m:
        targets[assignment] = gt.classes
        ce_weights[assignment] = 1.0
    terms = {"cls": nc.cross_entropy(pred.class_logits, targets, ce_weights)}

    if m:
        # canonical query-index order keeps sums independent of gt ordering
        order = np.argsort(assignment, kind="stable")
        qidx = assignment[order]
        gsel = gt.masks[order].astype(np.float64)
        sel_probs = nc.gather(pred.mask_probs, qidx)
        terms["bce"] = nc.binary_cross_entropy(sel_probs, gsel)
        terms["dice"] = nc.dice(sel_probs, gsel)
        sel_centers = nc.gather(pred.centers, qidx)
        pred_norm = nc.mul(
            nc.sub(sel_centers, nc.Tensor(bounds.p_min)),
            nc.Tensor(1.0 / bounds.safe_extent()),
        )
        gt_norm = normalized_centers(gt.centers[order], bounds)
        terms["center"] = nc.l1(pred_norm, gt_norm) if center_loss else nc.zeros(())
    else:
        terms["bce"] = nc.zeros(())
        terms["dice"] = nc.zeros(())
        terms["center"] = nc.zeros(())
    return terms


def compute_loss(
    preds: list[LayerPrediction],
    gt: GroundTruth,
    weights: LossWeights,
    bounds: SceneBounds,
    center_match: bool = True,
    center_loss: bool = True,
) -> tuple[nc.Tensor, dict[str, float], list[np.ndarray]]:
    """Deep-supervised total loss, per-term breakdown, per-layer assignments."""
    weights.validate()
    lam = {"cls": weights.cls, "bce": weights.bce, "dice": weights.dice, "center": weights.center}
    totals: list[nc.Tensor] = []
    breakdown = {k: 0.0 for k in lam}
    assignments: list[np.ndarray] = []
    for pred in preds:
        assignment = match_layer(pred, gt, weights, bounds, center_match=center_match)
        assignments.append(assignment)
        terms = layer_loss(pred, gt, assignment, weights, bounds, center_loss=center_loss)
        layer_total = nc.zeros(())
        for key, term in terms.items():
            layer_total = nc.add(layer_total, term * lam[key])
            breakdown[key] += term.item() / len(preds)
        totals.append(layer_total)
    total = nc.zeros(())
    for t in totals:
        total = nc.add(total, t)
    total = total * (1.0 / len(preds))
    breakdown["total"] = total.item()
    return total, breakdown, assignments
