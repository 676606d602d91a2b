"""Independent reference implementations used as oracles.

Everything here is written from first principles (plain loops, no shared
helpers with the package) so a bug in the library cannot hide in its own
oracle.  Keep these slow and obvious.
"""

from __future__ import annotations

import numpy as np


def ref_iou(a, b) -> float:
    ay0, ax0, ay1, ax1 = a
    by0, bx0, by1, bx1 = b
    iy0, ix0 = max(ay0, by0), max(ax0, bx0)
    iy1, ix1 = min(ay1, by1), min(ax1, bx1)
    if iy1 <= iy0 or ix1 <= ix0:
        return 0.0
    inter = (iy1 - iy0) * (ix1 - ix0)
    union = (ay1 - ay0) * (ax1 - ax0) + (by1 - by0) * (bx1 - bx0) - inter
    return inter / union if union > 0 else 0.0


def brute_force_nms(dets, iou_threshold, max_out):
    """O(n^2) suppression: walk candidates by (score desc, index asc), keep a
    candidate iff no kept same-class box overlaps it above the threshold."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept = []
    for i in order:
        ok = True
        for j in kept:
            if dets[j].class_id == dets[i].class_id and ref_iou(dets[i].box, dets[j].box) > iou_threshold:
                ok = False
                break
        if ok:
            kept.append(i)
            if len(kept) == max_out:
                break
    return [dets[i] for i in kept]


def ref_average_precision(preds, gts, thr):
    """AP for one class at one IoU threshold, from first principles.

    preds: list of (score, image_idx, order_idx, box); gts: per-image list of
    boxes.  Matching scans predictions by descending score (ties by image
    then order index); each prediction takes the unmatched ground-truth box
    with the highest IoU >= thr, lower index winning exact ties.  AP is the
    mean of the interpolated precision at recalls 0.00, 0.01, ..., 1.00.
    """
    ngt = sum(len(g) for g in gts)
    if ngt == 0:
        return None
    taken = [[False] * len(g) for g in gts]
    ordered = sorted(preds, key=lambda p: (-p[0], p[1], p[2]))
    hits = []
    for score, img, _k, box in ordered:
        best_iou = -1.0
        best_j = -1
        for j, gt_box in enumerate(gts[img]):
            if taken[img][j]:
                continue
            v = ref_iou(box, gt_box)
            if v >= thr and v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0:
            taken[img][best_j] = True
            hits.append(1)
        else:
            hits.append(0)
    precisions, recalls = [], []
    tp = fp = 0
    for h in hits:
        tp += h
        fp += 1 - h
        precisions.append(tp / (tp + fp))
        recalls.append(tp / ngt)
    total = 0.0
    for i in range(101):
        r = i / 100.0
        best = 0.0
        for p, rec in zip(precisions, recalls):
            if rec >= r and p > best:
                best = p
        total += best
    return total / 101.0


def ref_map(predictions, ground_truths, class_ids=(1, 2)):
    """mAP at IoU=.50:.05:.95 over crafted per-image detection lists."""
    thresholds = [round(0.5 + 0.05 * i, 2) for i in range(10)]
    class_means = []
    for cid in class_ids:
        gts = [[g.box for g in img if g.class_id == cid] for img in ground_truths]
        if sum(len(g) for g in gts) == 0:
            continue
        preds = []
        for img, dets in enumerate(predictions):
            for k, d in enumerate(dets):
                if d.class_id == cid:
                    preds.append((d.score, img, k, d.box))
        aps = [ref_average_precision(preds, gts, t) for t in thresholds]
        class_means.append(sum(aps) / len(aps))
    if not class_means:
        return 0.0
    return sum(class_means) / len(class_means)


def ref_conv2d(x, w, bias, stride=(1, 1), padding="same", depthwise=False,
               activation="none"):
    """Float64 cross-correlation with explicit loops; NHWC in, NHWC out."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, h, wd, ci = x.shape
    kh, kw = w.shape[:2]
    sh, sw = stride
    if padding == "same":
        oh, ow = -(-h // sh), -(-wd // sw)
        pad_h = max((oh - 1) * sh + kh - h, 0)
        pad_w = max((ow - 1) * sw + kw - wd, 0)
        top, left = pad_h // 2, pad_w // 2
        padded = np.zeros((n, h + pad_h, wd + pad_w, ci))
        padded[:, top:top + h, left:left + wd, :] = x
        x = padded
    else:
        oh, ow = (h - kh) // sh + 1, (wd - kw) // sw + 1
    co = w.shape[2] * w.shape[3] if depthwise else w.shape[3]
    out = np.zeros((n, oh, ow, co))
    for b in range(n):
        for oy in range(oh):
            for ox in range(ow):
                if depthwise:
                    for c in range(w.shape[2]):
                        for m in range(w.shape[3]):
                            acc = 0.0
                            for dy in range(kh):
                                for dx in range(kw):
                                    acc += x[b, oy * sh + dy, ox * sw + dx, c] * w[dy, dx, c, m]
                            out[b, oy, ox, c * w.shape[3] + m] = acc
                else:
                    for oc in range(co):
                        acc = 0.0
                        for dy in range(kh):
                            for dx in range(kw):
                                for c in range(ci):
                                    acc += x[b, oy * sh + dy, ox * sw + dx, c] * w[dy, dx, c, oc]
                        out[b, oy, ox, oc] = acc
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)
    if activation == "relu6":
        out = np.clip(out, 0.0, 6.0)
    elif activation == "relu":
        out = np.maximum(out, 0.0)
    return out
