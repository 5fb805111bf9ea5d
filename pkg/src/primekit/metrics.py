"""Detection and segmentation metrics: box IoU, mean average precision,
mean pixel IoU, and instance discovery counting."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

__all__ = ["iou", "mean_ap", "mean_iou", "count_discoveries"]

IGNORE_LABEL = 255

Box = tuple[float, float, float, float]


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two (x0, y0, x1, y1) boxes; 0 when disjoint."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def _ap_from_flags(flags: list[bool], n_gt: int) -> float:
    """All-points average precision from ordered true/false-positive flags."""
    if n_gt == 0:
        return 0.0
    tp = fp = 0
    recalls = [0.0]
    precisions = [1.0]
    for is_tp in flags:
        tp += is_tp
        fp += not is_tp
        recalls.append(tp / n_gt)
        precisions.append(tp / (tp + fp))
    # precision envelope, then integrate over recall increments
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    ap = 0.0
    for i in range(1, len(recalls)):
        if recalls[i] != recalls[i - 1]:
            ap += (recalls[i] - recalls[i - 1]) * precisions[i]
    return ap


def mean_ap(preds, gts, iou_thresh: float = 0.5) -> tuple[dict[int, float], float]:
    """Per-class average precision and its mean over classes with ground truth.

    preds: per image, a list of detections (.box/.class_id/.score).
    gts: per image, a list of (box, class_id).
    Detections are matched greedily, best IoU >= iou_thresh first, one
    match per ground-truth box; ordering ties broken deterministically by
    (image index, box coordinates).
    """
    if len(preds) != len(gts):
        raise ValueError(f"preds cover {len(preds)} images but gts cover {len(gts)}")
    classes = sorted(
        {c for img in gts for _, c in img} | {d.class_id for img in preds for d in img}
    )
    ap: dict[int, float] = {}
    evaluated = []
    for cid in classes:
        n_gt = sum(1 for img in gts for _, c in img if c == cid)
        rows = [
            (d.score, i, tuple(d.box))
            for i, img in enumerate(preds)
            for d in img
            if d.class_id == cid
        ]
        rows.sort(key=lambda r: (-r[0], r[1], r[2]))
        matched: dict[int, set[int]] = {i: set() for i in range(len(gts))}
        flags: list[bool] = []
        for _, i, box in rows:
            cands = [
                (j, iou(box, gbox))
                for j, (gbox, c) in enumerate(gts[i])
                if c == cid and j not in matched[i]
            ]
            cands = [(j, v) for j, v in cands if v >= iou_thresh]
            if cands:
                j = max(cands, key=lambda t: t[1])[0]
                matched[i].add(j)
                flags.append(True)
            else:
                flags.append(False)
        value = _ap_from_flags(flags, n_gt)
        ap[cid] = value
        if n_gt > 0:
            evaluated.append(value)
    return ap, (sum(evaluated) / len(evaluated) if evaluated else 0.0)


def mean_iou(pred_maps, gt_maps, n_classes: int) -> tuple[np.ndarray, float]:
    """Pixelwise IoU per class (background included as class 0), accumulated
    over the dataset; gt label 255 is ignored. The mean runs over classes
    appearing in either prediction or ground truth."""
    inter = np.zeros(n_classes + 1)
    union = np.zeros(n_classes + 1)
    for pred, gt in zip(pred_maps, gt_maps, strict=True):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
        valid = gt != IGNORE_LABEL
        p = pred[valid]
        g = gt[valid]
        for c in range(n_classes + 1):
            pc = p == c
            gc = g == c
            inter[c] += np.count_nonzero(pc & gc)
            union[c] += np.count_nonzero(pc | gc)
    per_class = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    present = union > 0
    miou = float(per_class[present].mean()) if present.any() else 0.0
    return per_class, miou


def _gt_instances_boxes(gts):
    for img_idx, img in enumerate(gts):
        for box, cid in img:
            yield img_idx, cid, ("box", box)


def _gt_instances_masks(gt_maps, n_classes):
    four = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    for img_idx, gt in enumerate(gt_maps):
        gt = np.asarray(gt)
        for c in range(1, n_classes + 1):
            labeled, n = ndimage.label(gt == c, structure=four)
            for comp in range(1, n + 1):
                yield img_idx, c, ("mask", labeled == comp)


def _found_box(preds_img, cid, box, thresh) -> bool:
    return any(d.class_id == cid and iou(d.box, box) >= thresh for d in preds_img)


def _found_mask(pred_map, cid, comp, thresh) -> bool:
    four = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    labeled, n = ndimage.label(np.asarray(pred_map) == cid, structure=four)
    for k in range(1, n + 1):
        region = labeled == k
        inter = np.count_nonzero(region & comp)
        if inter == 0:
            continue
        union = np.count_nonzero(region | comp)
        if inter / union >= thresh:
            return True
    return False


def count_discoveries(preds_a, preds_b, gts, iou_thresh: float = 0.5, n_classes: int | None = None):
    """Per ground-truth instance, how many are found by a but not b, and by
    b but not a. Boxes match detections; label maps match 4-connected
    components of each class."""
    segmentation = len(gts) > 0 and isinstance(gts[0], np.ndarray) and gts[0].ndim == 2
    only_a = only_b = 0
    if segmentation:
        if n_classes is None:
            raise ValueError("n_classes is required for segmentation discovery counting")
        instances = _gt_instances_masks(gts, n_classes)
        for img_idx, cid, (_, comp) in instances:
            fa = _found_mask(preds_a[img_idx], cid, comp, iou_thresh)
            fb = _found_mask(preds_b[img_idx], cid, comp, iou_thresh)
            only_a += fa and not fb
            only_b += fb and not fa
    else:
        for img_idx, cid, (_, box) in _gt_instances_boxes(gts):
            fa = _found_box(preds_a[img_idx], cid, box, iou_thresh)
            fb = _found_box(preds_b[img_idx], cid, box, iou_thresh)
            only_a += fa and not fb
            only_b += fb and not fa
    return only_a, only_b
