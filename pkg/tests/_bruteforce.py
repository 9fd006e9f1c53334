"""Independent brute-force average-precision oracle.

Deliberately naive: for every prefix of the confidence-ranked detection
list the greedy matching is recomputed from scratch, and the all-point
interpolated AP integral is evaluated with nested loops. Nothing here is
shared with the library implementation; this module exists so the fast
evaluator can be checked against first principles.
"""

from __future__ import annotations


def iou_ref(a, b):
    """IoU of two (cx, cy, w, h) tuples, reimplemented from the definition."""
    ax0, ay0 = a[0] - a[2] / 2, a[1] - a[3] / 2
    ax1, ay1 = a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0 = b[0] - b[2] / 2, b[1] - b[3] / 2
    bx1, by1 = b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union


def _greedy_tp(frame_gt, frame_det_boxes, threshold):
    """Number of true positives for one frame's detection boxes (in rank order)."""
    taken = [False] * len(frame_gt)
    tp = 0
    for box in frame_det_boxes:
        best_j, best_v = -1, 0.0
        for j, g in enumerate(frame_gt):
            if taken[j]:
                continue
            v = iou_ref(box, g)
            if v >= threshold and v > best_v:
                best_j, best_v = j, v
        if best_j >= 0:
            taken[best_j] = True
            tp += 1
    return tp


def brute_force_ap(gt_by_frame, dets_by_frame, threshold):
    """All-point interpolated AP for a single class.

    gt_by_frame: frame_id -> list of (cx, cy, w, h)
    dets_by_frame: frame_id -> list of (confidence, (cx, cy, w, h))
    Returns None when there is no ground truth at all.
    """
    n_gt = sum(len(v) for v in gt_by_frame.values())
    if n_gt == 0:
        return None

    ranked = []
    for frame_id, dets in dets_by_frame.items():
        for order, (conf, box) in enumerate(dets):
            ranked.append((-conf, frame_id, order, conf, box))
    ranked.sort()

    # PR point for every prefix, re-matching each frame from scratch.
    points = []
    for k in range(1, len(ranked) + 1):
        prefix = ranked[:k]
        tp = 0
        for frame_id in set(gt_by_frame) | {r[1] for r in prefix}:
            boxes = [r[4] for r in prefix if r[1] == frame_id]
            tp += _greedy_tp(gt_by_frame.get(frame_id, []), boxes, threshold)
        points.append((tp / n_gt, tp / k))

    # Integrate max precision at recall >= r over the recall increments.
    ap = 0.0
    prev_recall = 0.0
    for i, (recall, _) in enumerate(points):
        if recall <= prev_recall:
            continue
        best_p = max(p for r, p in points[i:])
        ap += (recall - prev_recall) * best_p
        prev_recall = recall
    return ap


def brute_force_map(gt_by_frame_cls, dets_by_frame_cls, threshold):
    """Unweighted mean of brute_force_ap over classes present in the ground truth.

    Inputs are frame_id -> class_id -> boxes (or (conf, box) pairs).
    """
    classes = sorted({c for frame in gt_by_frame_cls.values() for c in frame})
    aps = {}
    for cls in classes:
        gt = {f: frame.get(cls, []) for f, frame in gt_by_frame_cls.items()}
        dets = {f: frame.get(cls, []) for f, frame in dets_by_frame_cls.items()}
        aps[cls] = brute_force_ap(gt, dets, threshold)
    present = [v for v in aps.values() if v is not None]
    return (sum(present) / len(present) if present else None), aps
