"""Evaluation: instance extraction, average precision, recall diagnostics.

All masks are over decoder tokens. AP follows the greedy score-ordered
matching protocol with all-point interpolation, averaged over the classes
present in the ground truth; mAP averages IoU thresholds 0.50:0.05:0.95.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import LayerPrediction
from .scene import GroundTruth

MAP_THRESHOLDS = tuple(np.arange(50, 100, 5) / 100.0)


@dataclass
class InstanceResult:
    mask: np.ndarray  # (N,) bool, nonempty
    class_id: int
    score: float
    center: np.ndarray  # (3,)


@dataclass
class EvalReport:
    map_all: float
    map50: float
    map25: float
    per_class: dict[int, float] = field(default_factory=dict)
    recall_layer1: dict[float, float] = field(default_factory=dict)
    box_map50: float = 0.0
    box_map25: float = 0.0

    def to_text(self) -> str:
        lines = [
            f"mAP: {self.map_all:.4f}",
            f"mAP50: {self.map50:.4f}",
            f"mAP25: {self.map25:.4f}",
            f"box_mAP50: {self.box_map50:.4f}",
            f"box_mAP25: {self.box_map25:.4f}",
        ]
        for thr in sorted(self.recall_layer1):
            lines.append(f"recall_layer1@{thr:g}: {self.recall_layer1[thr]:.4f}")
        for cls in sorted(self.per_class):
            lines.append(f"ap50_class_{cls}: {self.per_class[cls]:.4f}")
        return "\n".join(lines)


def extract_instances(
    final: LayerPrediction, top_k: int = 100, min_tokens: int = 10
) -> list[InstanceResult]:
    """Thresholded masks ranked by class confidence times mask confidence."""
    probs = final.mask_probs.data
    logits = final.class_logits.data
    shifted = logits - logits.max(axis=1, keepdims=True)
    cls_probs = np.exp(shifted)
    cls_probs /= cls_probs.sum(axis=1, keepdims=True)
    real = cls_probs[:, :-1]  # last column is the no-object class

    results: list[InstanceResult] = []
    for q in range(probs.shape[0]):
        fg = probs[q] >= 0.5
        n_fg = int(fg.sum())
        if n_fg == 0 or n_fg < min_tokens:
            continue
        class_id = int(real[q].argmax())
        score = float(real[q, class_id]) * float(probs[q][fg].mean())
        results.append(
            InstanceResult(
                mask=fg.copy(),
                class_id=class_id,
                score=score,
                center=final.centers.data[q].copy(),
            )
        )
    results.sort(key=lambda r: -r.score)  # stable: equal scores keep query order
    return results[:top_k]


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter) / float(union) if union else 0.0


def _ap_from_flags(flags: list[bool], n_gt: int) -> float:
    """Area under the all-point interpolated precision-recall curve."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if not flags:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~np.asarray(flags, dtype=bool))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    p_max = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for i in range(len(flags)):
        if recall[i] > prev_r:
            ap += (recall[i] - prev_r) * p_max[i]
            prev_r = recall[i]
    return float(ap)


def _class_ap(
    preds: list[tuple[float, int, np.ndarray]],
    gt_masks: dict[int, list[np.ndarray]],
    iou_thr: float,
) -> float:
    """Greedy matching in score order within one class across scenes."""
    n_gt = sum(len(v) for v in gt_masks.values())
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][0], i))
    used: dict[int, np.ndarray] = {
        sid: np.zeros(len(masks), dtype=bool) for sid, masks in gt_masks.items()
    }
    flags: list[bool] = []
    for i in order:
        _, sid, mask = preds[i]
        best_iou, best_j = 0.0, -1
        for j, gmask in enumerate(gt_masks.get(sid, [])):
            if used[sid][j]:
                continue
            iou = mask_iou(mask, gmask)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_thr:
            used[sid][best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return _ap_from_flags(flags, n_gt)


def instance_ap(
    results: list[list[InstanceResult]],
    gts: list[GroundTruth],
    iou_thresholds: tuple[float, ...],
) -> dict[float, dict[int, float]]:
    """Per-threshold, per-class AP over a list of scenes.

    Classes absent from the ground truth are excluded entirely.
    """
    if len(results) != len(gts):
        raise ValueError("results and ground truths must pair up per scene")
    classes = sorted({int(c) for gt in gts for c in gt.classes})
    by_class_preds: dict[int, list] = {c: [] for c in classes}
    by_class_gt: dict[int, dict[int, list[np.ndarray]]] = {c: {} for c in classes}
    for sid, (res, gt) in enumerate(zip(results, gts)):
        for c in classes:
            sel = [gt.masks[i] for i in range(gt.n_instances) if gt.classes[i] == c]
            if sel:
                by_class_gt[c][sid] = sel
        for r in res:
            if r.class_id in by_class_preds:
                by_class_preds[r.class_id].append((r.score, sid, r.mask))
    out: dict[float, dict[int, float]] = {}
    for thr in iou_thresholds:
        out[thr] = {
            c: _class_ap(by_class_preds[c], by_class_gt[c], thr) for c in classes
        }
    return out


def summarize_ap(per_thr: dict[float, dict[int, float]]) -> dict[float, float]:
    return {
        thr: float(np.mean(list(classes.values()))) if classes else 0.0
        for thr, classes in per_thr.items()
    }


def initial_recall(layer1: LayerPrediction, gt: GroundTruth, iou_thr: float) -> float:
    """Fraction of instances overlapped by any thresholded first-layer mask."""
    if gt.n_instances == 0:
        raise ValueError("recall diagnostic needs at least one instance")
    masks = (layer1.mask_probs.data >= 0.5).astype(np.float64)
    gmasks = gt.masks.astype(np.float64)
    inter = masks @ gmasks.T  # (queries, instances)
    union = masks.sum(axis=1, keepdims=True) + gmasks.sum(axis=1)[None, :] - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)
    covered = (iou >= iou_thr).any(axis=0)
    return float(covered.sum()) / gt.n_instances


def masks_to_boxes(results: list[InstanceResult], positions: np.ndarray) -> np.ndarray:
    """Axis-aligned box per instance: min/max of its member token positions."""
    boxes = np.empty((len(results), 2, 3))
    for i, r in enumerate(results):
        if not r.mask.any():
            raise ValueError("cannot convert an empty mask to a box")
        pts = positions[r.mask]
        boxes[i, 0] = pts.min(axis=0)
        boxes[i, 1] = pts.max(axis=0)
    return boxes


def box_iou(a: np.ndarray, b: np.ndarray) -> float:
    lo = np.maximum(a[0], b[0])
    hi = np.minimum(a[1], b[1])
    if np.any(hi < lo):
        return 0.0
    inter = float(np.prod(hi - lo))
    vol_a = float(np.prod(a[1] - a[0]))
    vol_b = float(np.prod(b[1] - b[0]))
    union = vol_a + vol_b - inter
    if union <= 0.0:
        # degenerate zero-volume boxes: identical boxes count as full overlap
        return 1.0 if np.array_equal(a, b) else 0.0
    return inter / union


def _box_class_ap(preds, gt_boxes, iou_thr) -> float:
    n_gt = sum(len(v) for v in gt_boxes.values())
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][0], i))
    used = {sid: np.zeros(len(b), dtype=bool) for sid, b in gt_boxes.items()}
    flags = []
    for i in order:
        _, sid, box = preds[i]
        best_iou, best_j = 0.0, -1
        for j, gbox in enumerate(gt_boxes.get(sid, [])):
            if used[sid][j]:
                continue
            iou = box_iou(box, gbox)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_thr:
            used[sid][best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return _ap_from_flags(flags, n_gt)


def box_ap(
    results: list[list[InstanceResult]],
    gts: list[GroundTruth],
    positions: list[np.ndarray],
    iou_thresholds: tuple[float, ...],
) -> dict[float, float]:
    """Box-level mean AP using boxes derived from token masks."""
    classes = sorted({int(c) for gt in gts for c in gt.classes})
    by_class_preds: dict[int, list] = {c: [] for c in classes}
    by_class_gt: dict[int, dict[int, list[np.ndarray]]] = {c: {} for c in classes}
    for sid, (res, gt, pos) in enumerate(zip(results, gts, positions)):
        for i in range(gt.n_instances):
            c = int(gt.classes[i])
            pts = pos[gt.masks[i]]
            gbox = np.stack([pts.min(axis=0), pts.max(axis=0)])
            by_class_gt[c].setdefault(sid, []).append(gbox)
        if res:
            boxes = masks_to_boxes(res, pos)
            for r, box in zip(res, boxes):
                if r.class_id in by_class_preds:
                    by_class_preds[r.class_id].append((r.score, sid, box))
    out = {}
    for thr in iou_thresholds:
        vals = [
            _box_class_ap(by_class_preds[c], by_class_gt[c], thr) for c in classes
        ]
        out[thr] = float(np.mean(vals)) if vals else 0.0
    return out


def matching_trace(
    records: list[tuple[int, list[tuple[int, np.ndarray]]]],
    query_id: int,
    n_queries: int,
) -> list[tuple[int, float, float, float]]:
    """Matched ground-truth centers of one query across logged steps."""
    if not 0 <= query_id < n_queries:
        raise ValueError(f"unknown query id {query_id} (have {n_queries} queries)")
    rows = []
    for step, pairs in records:
        for qid, center in pairs:
            if qid == query_id:
                rows.append((step, float(center[0]), float(center[1]), float(center[2])))
    return rows


def evaluate_scenes(
    results: list[list[InstanceResult]],
    layer1_preds: list[LayerPrediction],
    gts: list[GroundTruth],
    positions: list[np.ndarray],
) -> EvalReport:
    """Aggregate report over scenes: mask AP, box AP, first-layer recall."""
    thresholds = tuple(sorted(set(MAP_THRESHOLDS) | {0.25, 0.5}))
    per_thr = instance_ap(results, gts, thresholds)
    means = summarize_ap(per_thr)
    map_all = float(np.mean([means[t] for t in MAP_THRESHOLDS]))
    recalls = {}
    for thr in (0.25, 0.5):
        vals = [initial_recall(lp, gt, thr) for lp, gt in zip(layer1_preds, gts)]
        recalls[thr] = float(np.mean(vals)) if vals else 0.0
    boxes = box_ap(results, gts, positions, (0.25, 0.5))
    return EvalReport(
        map_all=map_all,
        map50=means[0.5],
        map25=means[0.25],
        per_class=per_thr[0.5],
        recall_layer1=recalls,
        box_map50=boxes[0.5],
        box_map25=boxes[0.25],
    )
