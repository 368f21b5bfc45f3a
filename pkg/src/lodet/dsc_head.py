"""Oriented-box codec, target assignment and detection losses.

An oriented box is a quadrilateral with one vertex on each edge of its
axis-aligned bounding box (HBB). ``p1`` sits on the top edge and the others
follow clockwise on the right, bottom and left edges (image coordinates,
y pointing down). Each vertex glides along its edge by ``s_i``:

    p1 = (xmin + s1, ymin)    p2 = (xmax, ymin + s2)
    p3 = (xmax - s3, ymax)    p4 = (xmin, ymax - s4)

The code stores ``alpha_i = s_i / (w or h)`` and the diagonal projections
``beta1 = (p3.x - p1.x) / w`` and ``beta2 = (p4.y - p2.y) / h``. Only
``alpha1, alpha2, beta1, beta2`` are predicted; ``alpha3 = 1 - alpha1 - beta1``
and ``alpha4 = 1 - alpha2 - beta2`` follow from the diagonal constraint.

Arrays use these column conventions:

* HBB center form ``(..., 4)``: ``x, y, w, h``; corner form: ``xmin, ymin, xmax, ymax``
* quad ``(..., 4, 2)``: ``p1..p4``
* code ``(..., 6)``: ``alpha1, alpha2, alpha3, alpha4, beta1, beta2``
* per-anchor prediction vector: ``t_x, t_y, t_w, t_h, obj, t_a1, t_a2, t_b1, t_b2, cls...``
  (the four OBB entries are absent in HBB mode)
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .engine import Tensor

log = logging.getLogger(__name__)

APPROX_FLOOR = 0.01
T_WH_LIMIT = 10.0
OBJ = 4
OBB_SLICE = slice(5, 9)
# largest double below 1: the logistic tail rounds to 1.0 beyond x ~ 37
BELOW_ONE = float(np.nextafter(1.0, 0.0))


class MalformedBoxError(ValueError):
    """A ground-truth quadrilateral that cannot be encoded."""


def vector_length(num_classes: int, head_mode: str = "obb") -> int:
    if head_mode not in ("obb", "hbb"):
        raise ValueError(f"unknown head mode {head_mode!r}")
    return 5 + (4 if head_mode == "obb" else 0) + num_classes


# ------------------------------------------------------------------ M-Sigmoid

def m_sigmoid(x, variant: str = "exact"):
    """Mixed sigmoid on numpy input.

    ``exact``: hard-sigmoid ``min(max(0, x+3), 6)/6`` for ``x <= 0`` and the
    logistic function above 0. ``approx``: ``(clamp(sigmoid(x), 0.01, 1) - 0.01) / 0.99``.
    """
    x = np.asarray(x, dtype=np.float64)
    s = E.sigmoid_np(np.atleast_1d(x)).reshape(x.shape)
    if variant == "exact":
        return np.minimum(np.where(x <= 0, np.clip(x + 3.0, 0.0, 6.0) / 6.0, s), BELOW_ONE)
    if variant == "approx":
        return np.minimum((np.clip(s, APPROX_FLOOR, 1.0) - APPROX_FLOOR) / (1.0 - APPROX_FLOOR), BELOW_ONE)
    raise ValueError(f"unknown M-Sigmoid variant {variant!r}")


def m_sigmoid_t(x: Tensor, variant: str = "approx", revive: bool = False) -> Tensor:
    """Differentiable M-Sigmoid on tensors (same values as :func:`m_sigmoid`).

    ``revive`` lets the approx variant pass upward gradient through its
    floor (see :func:`lodet.engine.clamp`); forward values are unchanged.
    """
    if variant == "approx":
        out = (E.clamp(E.sigmoid(x), APPROX_FLOOR, 1.0, revive) - APPROX_FLOOR) / (1.0 - APPROX_FLOOR)
        return E.clamp(out, None, BELOW_ONE)
    if variant == "exact":
        neg = (x.data <= 0).astype(x.dtype)
        hard = E.relu6(x + 3.0) / 6.0
        return E.clamp(hard * neg + E.sigmoid(x) * (1.0 - neg), None, BELOW_ONE)
    raise ValueError(f"unknown M-Sigmoid variant {variant!r}")


# ----------------------------------------------------------------- HBB codec

def xywh_to_xyxy(b):
    b = np.asarray(b, dtype=np.float64)
    x, y, w, h = np.moveaxis(b, -1, 0)
    return np.stack([x - w / 2, y - h / 2, x + w / 2, y + h / 2], axis=-1)


def xyxy_to_xywh(b):
    b = np.asarray(b, dtype=np.float64)
    x0, y0, x1, y1 = np.moveaxis(b, -1, 0)
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def hbb_corners(b):
    """Corners ``v1..v4`` (top-left, clockwise) of center-form boxes, shape (..., 4, 2)."""
    x0, y0, x1, y1 = np.moveaxis(xywh_to_xyxy(b), -1, 0)
    return np.stack([np.stack([x0, y0], -1), np.stack([x1, y0], -1),
                     np.stack([x1, y1], -1), np.stack([x0, y1], -1)], axis=-2)


def _check_anchor(anchor):
    anchor = np.asarray(anchor, dtype=np.float64)
    if np.any(anchor[..., 2:] <= 0):
        raise ValueError("anchor width and height must be positive")
    return anchor


def decode_hbb(t, anchor):
    """``x = x_a + t_x w_a``, ``y = y_a + t_y h_a``, ``w = w_a e^t_w``, ``h = h_a e^t_h``."""
    t = np.asarray(t, dtype=np.float64)
    anchor = _check_anchor(anchor)
    twh = t[..., 2:4]
    if np.any(np.abs(twh) > T_WH_LIMIT):
        warnings.warn(f"t_w/t_h clamped to +-{T_WH_LIMIT:g}", RuntimeWarning, stacklevel=2)
        twh = np.clip(twh, -T_WH_LIMIT, T_WH_LIMIT)
    xy = anchor[..., :2] + t[..., :2] * anchor[..., 2:]
    wh = anchor[..., 2:] * np.exp(twh)
    return np.concatenate([xy, wh], axis=-1)


def encode_hbb(box, anchor):
    box = np.asarray(box, dtype=np.float64)
    anchor = _check_anchor(anchor)
    if np.any(box[..., 2:] <= 0):
        raise ValueError("box width and height must be positive")
    txy = (box[..., :2] - anchor[..., :2]) / anchor[..., 2:]
    twh = np.log(box[..., 2:] / anchor[..., 2:])
    return np.concatenate([txy, twh], axis=-1)


# ----------------------------------------------------------------- OBB codec

def derived_alphas(a1, a2, b1, b2):
    return np.clip(1.0 - a1 - b1, 0.0, 1.0), np.clip(1.0 - a2 - b2, 0.0, 1.0)


def decode_obb(hbb_xyxy, ab):
    """Quadrilateral from corner-form HBBs and ``(alpha1, alpha2, beta1, beta2)``."""
    hbb_xyxy = np.asarray(hbb_xyxy, dtype=np.float64)
    ab = np.asarray(ab, dtype=np.float64)
    x0, y0, x1, y1 = np.moveaxis(hbb_xyxy, -1, 0)
    a1, a2, b1, b2 = np.moveaxis(ab, -1, 0)
    a3, a4 = derived_alphas(a1, a2, b1, b2)
    w, h = x1 - x0, y1 - y0
    p1 = np.stack([x0 + a1 * w, y0 + 0 * w], -1)
    p2 = np.stack([x1 + 0 * h, y0 + a2 * h], -1)
    p3 = np.stack([x1 - a3 * w, y1 + 0 * w], -1)
    p4 = np.stack([x0 + 0 * h, y1 - a4 * h], -1)
    return np.stack([p1, p2, p3, p4], axis=-2)


def signed_area(quad):
    """Shoelace area; positive for clockwise order in y-down image coordinates."""
    q = np.asarray(quad, dtype=np.float64)
    x, y = q[..., 0], q[..., 1]
    return 0.5 * np.sum(x * np.roll(y, -1, axis=-1) - np.roll(x, -1, axis=-1) * y, axis=-1)


def canonical_order(quads):
    """Reorder vertices clockwise starting at the top-most (then left-most) vertex."""
    q = np.asarray(quads, dtype=np.float64)
    if q.shape[-2:] != (4, 2):
        raise ValueError(f"quads must have shape (..., 4, 2), got {q.shape}")
    flat = q.reshape(-1, 4, 2).copy()
    ccw = signed_area(flat) < 0
    flat[ccw] = flat[ccw][:, ::-1]
    x, y = flat[..., 0], flat[..., 1]
    # top-most vertex, ties broken by the smaller x
    cand = np.where(y == y.min(axis=1, keepdims=True), x, np.inf)
    best = np.argmin(cand, axis=1)
    idx = (best[:, None] + np.arange(4)[None]) % 4
    out = np.take_along_axis(flat, idx[..., None], axis=1)
    return out.reshape(q.shape)


def encode_obb(quads, tol: float = 1e-6):
    """Encode quadrilaterals to (corner-form HBB, code) arrays.

    Raises :class:`MalformedBoxError` when a vertex is farther than
    ``tol * max(w, h)`` from its assigned HBB edge or the box has zero area.
    Codes with ``alpha1 + alpha3 > 1`` (or ``alpha2 + alpha4 > 1``) get beta
    clamped to 0; :func:`unrepresentable` flags them.
    """
    q = canonical_order(quads)
    x, y = q[..., 0], q[..., 1]
    x0, x1 = x.min(-1), x.max(-1)
    y0, y1 = y.min(-1), y.max(-1)
    w, h = x1 - x0, y1 - y0
    if np.any(w <= 0) or np.any(h <= 0):
        raise MalformedBoxError("quadrilateral has zero width or height")
    lim = tol * np.maximum(w, h)
    off = np.stack([np.abs(y[..., 0] - y0), np.abs(x[..., 1] - x1),
                    np.abs(y[..., 2] - y1), np.abs(x[..., 3] - x0)], -1)
    if np.any(off > lim[..., None]):
        bad = np.argwhere(off > lim[..., None])[0]
        raise MalformedBoxError(f"vertex p{bad[-1] + 1} of box {tuple(bad[:-1])} is not on its HBB edge")
    a1 = (x[..., 0] - x0) / w
    a2 = (y[..., 1] - y0) / h
    a3 = (x1 - x[..., 2]) / w
    a4 = (y1 - y[..., 3]) / h
    b1 = np.clip(1.0 - a1 - a3, 0.0, 1.0)
    b2 = np.clip(1.0 - a2 - a4, 0.0, 1.0)
    hbb = np.stack([x0, y0, x1, y1], -1)
    return hbb, np.stack([a1, a2, a3, a4, b1, b2], -1)


def unrepresentable(code, tol: float = 1e-9):
    code = np.asarray(code)
    return (code[..., 0] + code[..., 2] > 1 + tol) | (code[..., 1] + code[..., 3] > 1 + tol)


def code_to_ab(code):
    code = np.asarray(code)
    return code[..., [0, 1, 4, 5]]


# ---------------------------------------------------------- target assignment

def shape_iou(wh_a, wh_b):
    """IoU of boxes sharing a center, broadcasting over leading axes."""
    wh_a, wh_b = np.asarray(wh_a, float), np.asarray(wh_b, float)
    inter = np.minimum(wh_a[..., 0], wh_b[..., 0]) * np.minimum(wh_a[..., 1], wh_b[..., 1])
    return inter / (wh_a[..., 0] * wh_a[..., 1] + wh_b[..., 0] * wh_b[..., 1] - inter)


@dataclass
class BranchTargets:
    """Dense training targets for one branch, arrays shaped (N, A, H, W[, k])."""
    stride: int
    obj: np.ndarray
    ignore: np.ndarray
    t: np.ndarray
    code: np.ndarray
    cls: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return self.obj > 0


@dataclass
class Targets:
    branches: list[BranchTargets]
    unrepresentable: int = 0
    collisions: int = 0

    @property
    def num_positive(self) -> int:
        return int(sum(b.positive.sum() for b in self.branches))


def assign_targets(anchors, gts, grids, strides, num_classes: int, ignore_thresh: float = 0.5) -> Targets:
    """Dense targets for a batch.

    ``anchors``: per branch, an (A, 2) array of anchor (w, h) in pixels.
    ``gts``: per image, a list of ``(quad (4, 2), class_id)``.
    ``grids``: per branch ``(H, W)``; ``strides``: per branch pixel stride.

    Each ground truth goes to the anchor with the highest shape IoU over all
    branches, at the cell containing its HBB center. ``t`` holds cell-offset
    targets ``(x/stride - c_x, y/stride - c_y, log(w/w_a), log(h/h_a))``. Other
    anchors whose shape IoU exceeds ``ignore_thresh`` at that cell are excluded
    from the objectness loss.
    """
    anchors = [np.asarray(a, dtype=np.float64).reshape(-1, 2) for a in anchors]
    n = len(gts)
    branches = []
    for a, (gh, gw), s in zip(anchors, grids, strides):
        na = len(a)
        branches.append(BranchTargets(
            stride=s, obj=np.zeros((n, na, gh, gw)), ignore=np.zeros((n, na, gh, gw), dtype=bool),
            t=np.zeros((n, na, gh, gw, 4)), code=np.zeros((n, na, gh, gw, 6)),
            cls=np.zeros((n, na, gh, gw, num_classes))))
    flat = np.concatenate(anchors)
    owner = np.concatenate([np.full(len(a), i) for i, a in enumerate(anchors)])
    local = np.concatenate([np.arange(len(a)) for a in anchors])
    img_h = grids[0][0] * strides[0]
    img_w = grids[0][1] * strides[0]
    out = Targets(branches)
    for img, items in enumerate(gts):
        for quad, cls in items:
            quad = np.asarray(quad, dtype=np.float64)
            if not 0 <= cls < num_classes:
                raise ValueError(f"class id {cls} out of range for {num_classes} classes")
            if quad.min() < -1e-6 or np.any(quad[:, 0] > img_w + 1e-6) or np.any(quad[:, 1] > img_h + 1e-6):
                raise ValueError(f"ground truth outside the {img_w}x{img_h} image")
            hbb, code = encode_obb(quad)
            if unrepresentable(code):
                out.unrepresentable += 1
            cx, cy, w, h = xyxy_to_xywh(hbb)
            ious = shape_iou(flat, np.array([w, h]))
            best = int(np.argmax(ious))
            for k in range(len(flat)):
                bt = branches[owner[k]]
                gy = min(int(cy // bt.stride), bt.obj.shape[2] - 1)
                gx = min(int(cx // bt.stride), bt.obj.shape[3] - 1)
                if k == best:
                    ai = local[k]
                    if bt.obj[img, ai, gy, gx]:
                        out.collisions += 1
                    bt.obj[img, ai, gy, gx] = 1.0
                    bt.ignore[img, ai, gy, gx] = False
                    aw, ah = flat[k]
                    bt.t[img, ai, gy, gx] = (cx / bt.stride - gx, cy / bt.stride - gy,
                                             math.log(w / aw), math.log(h / ah))
                    bt.code[img, ai, gy, gx] = code
                    bt.cls[img, ai, gy, gx] = 0.0
                    bt.cls[img, ai, gy, gx, cls] = 1.0
                elif ious[k] > ignore_thresh and not bt.obj[img, local[k], gy, gx]:
                    bt.ignore[img, local[k], gy, gx] = True
    if out.unrepresentable:
        log.info("%d ground truths exceed the diagonal constraint (beta clamped to 0)", out.unrepresentable)
    return out


# ------------------------------------------------------------------- losses

@dataclass
class LossConfig:
    head_mode: str = "obb"
    activation: str = "approx"
    derived_alpha: bool = True
    revive: bool = False
    weights: dict[str, float] = field(default_factory=lambda: dict(conf=1.0, hbb=1.0, obb=1.0, cls=1.0))


def obb_loss(ab: Tensor, gt_code, derived_alpha: bool = True) -> Tensor:
    """Summed smooth-L1 between activated ``(alpha1, alpha2, beta1, beta2)`` and the code.

    ``ab`` has shape (M, 4) for M positives, ``gt_code`` (M, 6). With
    ``derived_alpha`` the clamped constraint values ``alpha3, alpha4`` enter
    the sum against their ground truths as well.
    """
    gt_code = np.asarray(gt_code, dtype=ab.dtype)
    if ab.ndim != 2 or ab.shape[1] != 4 or gt_code.shape != (ab.shape[0], 6):
        raise ValueError(f"obb_loss: prediction {ab.shape} does not match ground truth {gt_code.shape}")
    total = E.smooth_l1(ab - gt_code[:, [0, 1, 4, 5]]).sum()
    if derived_alpha:
        a3 = E.clamp(1.0 - ab[:, 0] - ab[:, 2], 0.0, 1.0)
        a4 = E.clamp(1.0 - ab[:, 1] - ab[:, 3], 0.0, 1.0)
        total = total + E.smooth_l1(a3 - gt_code[:, 2]).sum() + E.smooth_l1(a4 - gt_code[:, 3]).sum()
    return total


def split_prediction(out: Tensor, num_anchors: int) -> Tensor:
    """(N, A*L, H, W) head output to (N, A, H, W, L)."""
    n, c, h, w = out.shape
    if c % num_anchors:
        raise ValueError(f"head output has {c} channels, not divisible by {num_anchors} anchors")
    return out.reshape(n, num_anchors, c // num_anchors, h, w).transpose(0, 1, 3, 4, 2)


def total_loss(preds, targets: Targets, cfg: LossConfig | None = None):
    """Sum of confidence, HBB, OBB and class losses.

    ``preds`` are per-branch head outputs (N, A*L, H, W). Objectness BCE is
    averaged separately over positives and over non-ignored negatives, then
    the two means are added; the other parts are summed over positives and
    divided by the positive count. Returns ``(total, parts)`` where ``parts``
    maps part names to scalar tensors.
    """
    cfg = cfg or LossConfig()
    npos = max(1, targets.num_positive)
    nneg = max(1, int(sum(((b.obj == 0) & ~b.ignore).sum() for b in targets.branches)))
    parts = {k: Tensor(0.0) for k in ("conf", "hbb", "obb", "cls")}
    obb = cfg.head_mode == "obb"
    for out, bt in zip(preds, targets.branches):
        p = split_prediction(out, bt.obj.shape[1])
        length = p.shape[-1]
        ncls = bt.cls.shape[-1]
        if length != vector_length(ncls, cfg.head_mode):
            raise ValueError(f"prediction length {length} does not match {cfg.head_mode} head with {ncls} classes")
        if p.shape[:4] != bt.obj.shape:
            raise ValueError(f"prediction grid {p.shape[:4]} does not match targets {bt.obj.shape}")
        pos = bt.positive
        weight = np.where(pos, 1.0 / npos, np.where(bt.ignore, 0.0, 1.0 / nneg)).astype(p.dtype)
        bce = E.bce_with_logits(p[..., OBJ], bt.obj)
        parts["conf"] = parts["conf"] + (bce * weight).sum()
        if not pos.any():
            continue
        pp = p[pos]
        parts["hbb"] = parts["hbb"] + E.smooth_l1(pp[:, 0:4] - bt.t[pos]).sum() / npos
        cls_start = 9 if obb else 5
        parts["cls"] = parts["cls"] + E.bce_with_logits(pp[:, cls_start:], bt.cls[pos]).sum() / npos
        if obb:
            ab = m_sigmoid_t(pp[:, OBB_SLICE], cfg.activation, cfg.revive)
            parts["obb"] = parts["obb"] + obb_loss(ab, bt.code[pos], cfg.derived_alpha) / npos
    total = None
    for k, v in parts.items():
        term = v * cfg.weights.get(k, 1.0)
        total = term if total is None else total + term
    return total, parts


# ------------------------------------------------------------------ decoding

@dataclass
class Detection:
    image: int
    cls: int
    score: float
    quad: np.ndarray


def decode_grid(p: np.ndarray, anchors, stride: int, head_mode: str = "obb", activation: str = "exact"):
    """Decode one branch for one image.

    ``p``: (A, H, W, L) raw predictions. Returns ``(quads (A, H, W, 4, 2),
    objectness (A, H, W), class probabilities (A, H, W, K))``.
    """
    na, gh, gw, _ = p.shape
    anchors = np.asarray(anchors, dtype=np.float64).reshape(na, 1, 1, 2)
    cy, cx = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    twh = np.clip(p[..., 2:4], -T_WH_LIMIT, T_WH_LIMIT)
    x = (cx + p[..., 0]) * stride
    y = (cy + p[..., 1]) * stride
    wh = anchors * np.exp(twh)
    hbb = xywh_to_xyxy(np.stack([x, y, wh[..., 0], wh[..., 1]], -1))
    if head_mode == "obb":
        quads = decode_obb(hbb, m_sigmoid(p[..., OBB_SLICE], activation))
        cls = p[..., 9:]
    else:
        quads = hbb_corners(xyxy_to_xywh(hbb))
        cls = p[..., 5:]
    obj = E.sigmoid_np(p[..., OBJ].copy())
    return quads, obj, E.sigmoid_np(cls.copy())


def decode_predictions(outputs, anchors, strides, head_mode: str = "obb", score_thresh: float = 0.05,
                       activation: str = "exact") -> list[list[Detection]]:
    """Per-image detections (best class per anchor, score = objectness x class prob)."""
    n = outputs[0].shape[0]
    dets: list[list[Detection]] = [[] for _ in range(n)]
    for out, anc, s in zip(outputs, anchors, strides):
        data = out.data if isinstance(out, Tensor) else np.asarray(out)
        na = len(anc)
        nb, c, gh, gw = data.shape
        p = data.reshape(nb, na, c // na, gh, gw).transpose(0, 1, 3, 4, 2).astype(np.float64)
        for i in range(n):
            quads, obj, cls = decode_grid(p[i], anc, s, head_mode, activation)
            k = cls.argmax(-1)
            score = obj * np.take_along_axis(cls, k[..., None], -1)[..., 0]
            for idx in zip(*np.nonzero(score > score_thresh)):
                dets[i].append(Detection(i, int(k[idx]), float(score[idx]), quads[idx]))
    return dets
