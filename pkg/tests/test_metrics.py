import numpy as np
import pytest

from maft3d import metrics as mx
from maft3d import numcore as nc
from maft3d import scene as sc
from maft3d.decoder import LayerPrediction


def oracle_ap(scored_masks, gt_masks, iou_thr):
    """Explicit PR enumeration: greedy matching walked rank by rank, the
    interpolated precision found by direct search over later ranks."""
    order = sorted(range(len(scored_masks)), key=lambda i: (-scored_masks[i][0], i))
    taken = [False] * len(gt_masks)
    flags = []
    for i in order:
        _, mask = scored_masks[i]
        best, best_j = 0.0, -1
        for j, g in enumerate(gt_masks):
            if taken[j]:
                continue
            iou = mx.mask_iou(mask, g)
            if iou > best:
                best, best_j = iou, j
        if best_j >= 0 and best >= iou_thr:
            taken[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    if not gt_masks:
        raise ValueError("no ground truth")
    if not flags:
        return 0.0
    precisions, recalls = [], []
    tp = fp = 0
    for hit in flags:
        tp, fp = tp + int(hit), fp + int(not hit)
        precisions.append(tp / (tp + fp))
        recalls.append(tp / len(gt_masks))
    ap = 0.0
    prev_r = 0.0
    for i in range(len(flags)):
        if recalls[i] > prev_r:
            p_best = max(precisions[i:])
            ap += (recalls[i] - prev_r) * p_best
            prev_r = recalls[i]
    return ap


def random_case(rng, n_tokens=24, max_gt=5, max_pred=10):
    m = int(rng.integers(1, max_gt + 1))
    gt_masks = []
    for _ in range(m):
        mask = np.zeros(n_tokens, dtype=bool)
        size = int(rng.integers(2, 8))
        start = int(rng.integers(0, n_tokens - size))
        mask[start : start + size] = True
        gt_masks.append(mask)
    n_pred = int(rng.integers(0, max_pred + 1))
    preds = []
    for _ in range(n_pred):
        if rng.uniform() < 0.5 and m > 0:
            base = gt_masks[int(rng.integers(m))].copy()
            flips = rng.integers(0, n_tokens, size=int(rng.integers(0, 5)))
            base[flips] = ~base[flips]
            mask = base
        else:
            mask = rng.uniform(size=n_tokens) < 0.3
        if not mask.any():
            mask[int(rng.integers(n_tokens))] = True
        preds.append((float(rng.uniform()), mask))
    return preds, gt_masks


def test_ap_oracle_agreement_200_cases():
    rng = np.random.default_rng(0)
    for _ in range(200):
        preds, gt_masks = random_case(rng)
        for thr in (0.25, 0.5, 0.75):
            results = [
                [mx.InstanceResult(mask=m, class_id=0, score=s, center=np.zeros(3)) for s, m in preds]
            ]
            gt = sc.GroundTruth(
                masks=np.array(gt_masks),
                classes=np.zeros(len(gt_masks), dtype=np.int64),
                centers=np.zeros((len(gt_masks), 3)),
            )
            got = mx.instance_ap(results, [gt], (thr,))[thr][0]
            want = oracle_ap(preds, gt_masks, thr)
            assert got == want


def test_ap_perfect_predictions():
    rng = np.random.default_rng(1)
    _, gt_masks = random_case(rng)
    preds = [(1.0 - 0.01 * i, m.copy()) for i, m in enumerate(gt_masks)]
    results = [
        [mx.InstanceResult(mask=m, class_id=0, score=s, center=np.zeros(3)) for s, m in preds]
    ]
    gt = sc.GroundTruth(
        masks=np.array(gt_masks),
        classes=np.zeros(len(gt_masks), dtype=np.int64),
        centers=np.zeros((len(gt_masks), 3)),
    )
    for thr in (0.25, 0.5, 0.9):
        assert mx.instance_ap(results, [gt], (thr,))[thr][0] == 1.0


def test_ap_wrong_classes_everywhere():
    mask = np.ones(10, dtype=bool)
    results = [[mx.InstanceResult(mask=mask, class_id=3, score=0.9, center=np.zeros(3))]]
    gt = sc.GroundTruth(
        masks=mask[None], classes=np.array([7]), centers=np.zeros((1, 3))
    )
    out = mx.instance_ap(results, [gt], (0.5,))[0.5]
    assert out == {7: 0.0}


def test_ap_duplicate_counts_as_false_positive():
    mask = np.zeros(12, dtype=bool)
    mask[:6] = True
    dup = mask.copy()
    results = [
        [
            mx.InstanceResult(mask=dup, class_id=0, score=0.9, center=np.zeros(3)),
            mx.InstanceResult(mask=mask.copy(), class_id=0, score=0.6, center=np.zeros(3)),
        ]
    ]
    gt = sc.GroundTruth(masks=mask[None], classes=np.array([0]), centers=np.zeros((1, 3)))
    assert mx.instance_ap(results, [gt], (0.5,))[0.5][0] == 1.0


def test_map_threshold_monotonicity():
    rng = np.random.default_rng(2)
    for _ in range(20):
        preds, gt_masks = random_case(rng)
        results = [
            [mx.InstanceResult(mask=m, class_id=0, score=s, center=np.zeros(3)) for s, m in preds]
        ]
        gt = sc.GroundTruth(
            masks=np.array(gt_masks),
            classes=np.zeros(len(gt_masks), dtype=np.int64),
            centers=np.zeros((len(gt_masks), 3)),
        )
        thresholds = tuple(sorted(set(mx.MAP_THRESHOLDS) | {0.25}))
        per = mx.summarize_ap(mx.instance_ap(results, [gt], thresholds))
        map_all = float(np.mean([per[t] for t in mx.MAP_THRESHOLDS]))
        assert map_all <= per[0.5] + 1e-12
        assert per[0.5] <= per[0.25] + 1e-12


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------


def make_layer_pred(probs, logits, centers=None):
    n = probs.shape[0]
    centers = np.zeros((n, 3)) if centers is None else centers
    return LayerPrediction(
        centers=nc.tensor(centers),
        class_logits=nc.tensor(logits),
        mask_probs=nc.tensor(probs),
    )


def test_extract_empty_when_all_below_threshold():
    pred = make_layer_pred(np.full((4, 30), 0.4), np.zeros((4, 19)))
    assert mx.extract_instances(pred, top_k=10, min_tokens=1) == []


def test_extract_min_tokens_filter():
    probs = np.full((2, 30), 0.1)
    probs[0, :5] = 0.9
    probs[1, :20] = 0.9
    pred = make_layer_pred(probs, np.zeros((2, 19)))
    out = mx.extract_instances(pred, top_k=10, min_tokens=10)
    assert len(out) == 1
    assert out[0].mask.sum() == 20


def test_extract_top_k_and_stable_order():
    probs = np.full((3, 30), 0.1)
    probs[:, :12] = 0.8
    logits = np.zeros((3, 19))
    pred = make_layer_pred(probs, logits)
    out = mx.extract_instances(pred, top_k=1, min_tokens=1)
    assert len(out) == 1
    out_all = mx.extract_instances(pred, top_k=10, min_tokens=1)
    assert [r.score for r in out_all] == sorted((r.score for r in out_all), reverse=True)


def test_extract_identical_queries_keep_query_order():
    probs = np.full((3, 30), 0.1)
    probs[0, :12] = 0.8
    probs[2, :12] = 0.8  # identical to query 0
    probs[1, :12] = 0.7
    logits = np.zeros((3, 19))
    pred = make_layer_pred(probs, logits)
    out = mx.extract_instances(pred, top_k=10, min_tokens=1)
    assert out[0].score == out[1].score  # queries 0 and 2 tie exactly
    np.testing.assert_array_equal(out[0].mask, probs[0] >= 0.5)
    assert out[0].mask.sum() == out[1].mask.sum() == 12
    assert out[2].score < out[0].score


def test_extract_score_composition():
    probs = np.full((1, 20), 0.05)
    probs[0, :10] = 0.8
    logits = np.full((1, 19), 0.0)
    logits[0, 4] = 5.0
    pred = make_layer_pred(probs, logits)
    out = mx.extract_instances(pred, top_k=5, min_tokens=1)
    assert out[0].class_id == 4
    cls_prob = np.exp(5.0) / (np.exp(5.0) + 18)
    assert out[0].score == pytest.approx(cls_prob * 0.8, rel=1e-12)


# ---------------------------------------------------------------------------
# recall
# ---------------------------------------------------------------------------


def test_initial_recall_perfect_and_empty():
    gt_masks = np.zeros((2, 30), dtype=bool)
    gt_masks[0, :10] = True
    gt_masks[1, 15:25] = True
    gt = sc.GroundTruth(masks=gt_masks, classes=np.array([0, 1]), centers=np.zeros((2, 3)))
    probs = np.zeros((4, 30))
    probs[0] = gt_masks[0] * 0.9
    probs[1] = gt_masks[1] * 0.9
    pred = make_layer_pred(probs, np.zeros((4, 19)))
    assert mx.initial_recall(pred, gt, 0.5) == 1.0
    empty = make_layer_pred(np.full((4, 30), 0.1), np.zeros((4, 19)))
    assert mx.initial_recall(empty, gt, 0.25) == 0.0


def test_initial_recall_half_covered():
    gt_masks = np.zeros((2, 30), dtype=bool)
    gt_masks[0, :10] = True
    gt_masks[1, 15:25] = True
    gt = sc.GroundTruth(masks=gt_masks, classes=np.array([0, 1]), centers=np.zeros((2, 3)))
    probs = np.zeros((1, 30))
    probs[0] = gt_masks[0] * 0.9
    pred = make_layer_pred(probs, np.zeros((1, 19)))
    assert mx.initial_recall(pred, gt, 0.25) == 0.5


def test_initial_recall_monotone_in_threshold():
    rng = np.random.default_rng(3)
    gt_masks = rng.uniform(size=(3, 40)) < 0.3
    gt_masks[:, 0] = True
    gt = sc.GroundTruth(masks=gt_masks, classes=np.arange(3), centers=np.zeros((3, 3)))
    probs = rng.uniform(size=(6, 40))
    pred = make_layer_pred(probs, np.zeros((6, 19)))
    values = [mx.initial_recall(pred, gt, t) for t in (0.1, 0.25, 0.5, 0.75)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_initial_recall_requires_instances():
    gt = sc.GroundTruth(
        masks=np.zeros((0, 10), dtype=bool), classes=np.zeros(0, dtype=np.int64), centers=np.zeros((0, 3))
    )
    pred = make_layer_pred(np.full((2, 10), 0.4), np.zeros((2, 19)))
    with pytest.raises(ValueError):
        mx.initial_recall(pred, gt, 0.25)


# ---------------------------------------------------------------------------
# boxes and traces
# ---------------------------------------------------------------------------


def test_masks_to_boxes():
    positions = np.array([[0.0, 0, 0], [1.0, 2.0, 3.0], [5.0, 5.0, 5.0]])
    mask = np.array([True, True, False])
    res = [mx.InstanceResult(mask=mask, class_id=0, score=1.0, center=np.zeros(3))]
    boxes = mx.masks_to_boxes(res, positions)
    np.testing.assert_array_equal(boxes[0, 0], [0, 0, 0])
    np.testing.assert_array_equal(boxes[0, 1], [1, 2, 3])


def test_masks_to_boxes_single_token_degenerate():
    positions = np.array([[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]])
    mask = np.array([True, False])
    res = [mx.InstanceResult(mask=mask, class_id=0, score=1.0, center=np.zeros(3))]
    boxes = mx.masks_to_boxes(res, positions)
    np.testing.assert_array_equal(boxes[0, 0], boxes[0, 1])


def test_boxes_translation_equivariance():
    rng = np.random.default_rng(4)
    positions = rng.uniform(size=(20, 3))
    mask = rng.uniform(size=20) < 0.5
    mask[0] = True
    res = [mx.InstanceResult(mask=mask, class_id=0, score=1.0, center=np.zeros(3))]
    v = np.array([1.0, -2.0, 3.0])
    a = mx.masks_to_boxes(res, positions)
    b = mx.masks_to_boxes(res, positions + v)
    np.testing.assert_allclose(b, a + v, atol=1e-12)


def test_masks_to_boxes_empty_mask_error():
    res = [mx.InstanceResult(mask=np.zeros(5, dtype=bool), class_id=0, score=1.0, center=np.zeros(3))]
    with pytest.raises(ValueError):
        mx.masks_to_boxes(res, np.zeros((5, 3)))


def test_matching_trace_selection_and_errors():
    records = [
        (0, [(3, np.array([1.0, 2.0, 3.0])), (5, np.array([0.0, 0.0, 0.0]))]),
        (1, [(3, np.array([1.1, 2.1, 3.1]))]),
        (2, [(5, np.array([9.0, 9.0, 9.0]))]),
    ]
    rows = mx.matching_trace(records, 3, n_queries=8)
    assert rows == [(0, 1.0, 2.0, 3.0), (1, 1.1, 2.1, 3.1)]
    assert mx.matching_trace(records, 7, n_queries=8) == []
    with pytest.raises(ValueError):
        mx.matching_trace(records, 9, n_queries=8)


def test_evaluate_scenes_report_fields():
    rng = np.random.default_rng(5)
    gt_masks = np.zeros((2, 40), dtype=bool)
    gt_masks[0, :12] = True
    gt_masks[1, 20:34] = True
    gt = sc.GroundTruth(masks=gt_masks, classes=np.array([2, 5]), centers=np.zeros((2, 3)))
    positions = rng.uniform(size=(40, 3))
    probs = np.zeros((4, 40))
    probs[0] = gt_masks[0] * 0.95
    probs[1] = gt_masks[1] * 0.95
    logits = np.full((4, 19), -4.0)
    logits[0, 2] = 6.0
    logits[1, 5] = 6.0
    logits[2:, -1] = 6.0
    pred = make_layer_pred(probs, logits)
    results = [mx.extract_instances(pred, top_k=10, min_tokens=3)]
    report = mx.evaluate_scenes(results, [pred], [gt], [positions])
    assert report.map50 == 1.0 and report.map25 == 1.0
    assert report.map_all <= report.map50 <= report.map25
    assert report.recall_layer1[0.25] == 1.0
    assert report.box_map50 == 1.0
    assert set(report.per_class) == {2, 5}
    text = report.to_text()
    assert "mAP50: 1.0000" in text
