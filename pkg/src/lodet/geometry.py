"""Convex-polygon IoU, oriented-box NMS and PASCAL-VOC style mAP."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

MERGE_EPS = 1e-12


@dataclass
class DetectionRecord:
    image_id: str
    class_id: int
    score: float
    quad: np.ndarray


@dataclass
class GroundTruth:
    class_id: int
    quad: np.ndarray
    difficult: bool = False


def polygon_area(poly) -> float:
    """Unsigned shoelace area."""
    p = np.asarray(poly, dtype=np.float64)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))


def _signed(p) -> float:
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def merge_duplicates(poly, eps: float = MERGE_EPS) -> np.ndarray:
    """Drop consecutive (cyclically) repeated vertices."""
    p = np.asarray(poly, dtype=np.float64)
    keep = []
    for i in range(len(p)):
        if not keep or np.max(np.abs(p[i] - p[keep[-1]])) > eps:
            keep.append(i)
    if len(keep) > 1 and np.max(np.abs(p[keep[0]] - p[keep[-1]])) <= eps:
        keep.pop()
    return p[keep]


def _clip(subject: list, a, b) -> list:
    """Keep the part of ``subject`` left of the directed line a->b (counter-clockwise convention)."""
    out = []
    n = len(subject)
    if n == 0:
        return out
    ex, ey = b[0] - a[0], b[1] - a[1]

    def side(p):
        return ex * (p[1] - a[1]) - ey * (p[0] - a[0])
    prev = subject[-1]
    sp = side(prev)
    for cur in subject:
        sc = side(cur)
        if sc >= 0:
            if sp < 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            out.append(cur)
        elif sp >= 0:
            t = sp / (sp - sc)
            out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
        prev, sp = cur, sc
    return out


def convex_intersection_area(a, b) -> float:
    """Area of the intersection of two convex polygons (Sutherland-Hodgman)."""
    a, b = merge_duplicates(a), merge_duplicates(b)
    if len(a) < 3 or len(b) < 3:
        return 0.0
    sa, sb = _signed(a), _signed(b)
    if sa == 0 or sb == 0:
        return 0.0
    if sa < 0:
        a = a[::-1]
    if sb < 0:
        b = b[::-1]
    poly = [tuple(p) for p in a]
    m = len(b)
    for i in range(m):
        poly = _clip(poly, b[i], b[(i + 1) % m])
        if not poly:
            return 0.0
    return polygon_area(np.array(poly))


def polygon_iou(a, b) -> float:
    """IoU of two convex quadrilaterals; 0 when the union has zero area."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("polygon_iou: non-finite coordinates")
    # bounding-box rejection before clipping
    if (a[:, 0].max() < b[:, 0].min() or b[:, 0].max() < a[:, 0].min()
            or a[:, 1].max() < b[:, 1].min() or b[:, 1].max() < a[:, 1].min()):
        return 0.0
    inter = convex_intersection_area(a, b)
    union = polygon_area(merge_duplicates(a)) + polygon_area(merge_duplicates(b)) - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


# ----------------------------------------------------------------------- NMS

def obb_nms(dets: list[DetectionRecord], threshold: float = 0.45) -> list[DetectionRecord]:
    """Greedy per-class suppression in (score desc, index asc) order."""
    if not 0 < threshold < 1:
        raise ValueError("NMS threshold must lie in (0, 1)")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: dict[int, list[int]] = defaultdict(list)
    out = []
    for i in order:
        d = dets[i]
        if all(polygon_iou(d.quad, dets[j].quad) <= threshold for j in kept[d.class_id]):
            kept[d.class_id].append(i)
            out.append(d)
    return out


# ----------------------------------------------------------------------- mAP

def average_precision(recall, precision, method: str = "all") -> float:
    """Area under the monotone precision envelope (``all``) or VOC 11-point average."""
    rec = np.asarray(recall, dtype=np.float64)
    prec = np.asarray(precision, dtype=np.float64)
    if method == "11point":
        ap = 0.0
        for t in np.linspace(0, 1, 11):
            p = prec[rec >= t]
            ap += (p.max() if p.size else 0.0) / 11
        return float(ap)
    if method != "all":
        raise ValueError(f"unknown AP method {method!r}")
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


@dataclass
class MapResult:
    ap: dict[int, float]
    mAP: float
    num_gt: dict[int, int]


def evaluate_map(dets: list[DetectionRecord], gts: dict[str, list[GroundTruth]], iou_threshold: float = 0.5,
                 classes=None, method: str = "all", ignore_difficult: bool = True) -> MapResult:
    """Per-class AP and their unweighted mean over classes that have ground truth.

    Detections are visited in descending score order and matched greedily
    to the unmatched ground truth with the highest IoU at or above the
    threshold. With ``ignore_difficult`` a match to a difficult ground truth
    is neither a true nor a false positive, and difficult boxes do not count
    toward recall.
    """
    if classes is None:
        classes = sorted({g.class_id for items in gts.values() for g in items})
    classes = list(classes)
    known = set(classes)
    for d in dets:
        if d.class_id not in known:
            raise ValueError(f"detection has unknown class id {d.class_id}")
    ap, num_gt = {}, {}
    for c in classes:
        cls_gts = {img: [g for g in items if g.class_id == c] for img, items in gts.items()}
        npos = sum(1 for items in cls_gts.values() for g in items if not (ignore_difficult and g.difficult))
        num_gt[c] = npos
        cand = [(i, d) for i, d in enumerate(dets) if d.class_id == c]
        cand.sort(key=lambda t: (-t[1].score, t[0]))
        used = {img: np.zeros(len(items), dtype=bool) for img, items in cls_gts.items()}
        tp, fp = [], []
        for _, d in cand:
            items = cls_gts.get(d.image_id, [])
            best, best_iou = -1, iou_threshold
            if polygon_area(merge_duplicates(d.quad)) > 0:
                for j, g in enumerate(items):
                    if used[d.image_id][j]:
                        continue
                    iou = polygon_iou(d.quad, g.quad)
                    if iou >= best_iou and (best < 0 or iou > best_iou):
                        best, best_iou = j, iou
            if best >= 0:
                used[d.image_id][best] = True
                if ignore_difficult and items[best].difficult:
                    continue
                tp.append(1.0)
                fp.append(0.0)
            else:
                tp.append(0.0)
                fp.append(1.0)
        if npos == 0:
            ap[c] = float("nan")
            continue
        tp_c, fp_c = np.cumsum(tp), np.cumsum(fp)
        rec = tp_c / npos
        prec = tp_c / np.maximum(tp_c + fp_c, np.finfo(np.float64).eps)
        ap[c] = average_precision(rec, prec, method) if len(cand) else 0.0
    scored = [v for v in ap.values() if not np.isnan(v)]
    return MapResult(ap, float(np.mean(scored)) if scored else 0.0, num_gt)
