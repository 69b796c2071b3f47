"""Detection head decoding, NMS, target assignment and training losses."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .errors import DimensionError
from .tensor import Tensor

DEFAULT_CONF = 0.25
DEFAULT_IOU = 0.45
ANCHOR_RATIO_LIMIT = 4.0

COCO_ANCHORS = ((10, 13, 16, 30, 33, 23),
                (30, 61, 62, 45, 59, 119),
                (116, 90, 156, 198, 373, 326))


@dataclass(frozen=True)
class AnchorSet:
    """Per-scale anchor (w, h) pairs in input pixels plus the scale strides."""

    anchors: Tuple[Tuple[Tuple[float, float], ...], ...]
    strides: Tuple[int, ...] = (8, 16, 32)

    def __post_init__(self):
        if len(self.anchors) != len(self.strides):
            raise ValueError("one anchor group per stride required")
        sizes = {len(a) for a in self.anchors}
        if len(sizes) != 1:
            raise ValueError("every scale needs the same number of anchors")
        for group in self.anchors:
            for w, h in group:
                if not (w > 0 and h > 0):
                    raise ValueError("anchor dimensions must be positive")

    @classmethod
    def from_flat(cls, rows: Sequence[Sequence[float]], strides=(8, 16, 32)) -> "AnchorSet":
        groups = tuple(tuple((float(r[i]), float(r[i + 1])) for i in range(0, len(r), 2))
                       for r in rows)
        return cls(groups, tuple(int(s) for s in strides))

    @property
    def per_scale(self) -> int:
        return len(self.anchors[0])

    def array(self, scale: int) -> np.ndarray:
        return np.asarray(self.anchors[scale], dtype=np.float64)

    def scaled(self, factor: float) -> "AnchorSet":
        return AnchorSet(tuple(tuple((w * factor, h * factor) for w, h in g)
                               for g in self.anchors), self.strides)

    def to_flat(self) -> List[List[float]]:
        return [[v for wh in g for v in wh] for g in self.anchors]


@dataclass
class Detection:
    class_id: int
    score: float
    box: Tuple[float, float, float, float]   # cx, cy, w, h in input pixels
    image_id: Optional[str] = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if not (self.box[2] > 0 and self.box[3] > 0):
            raise ValueError("box width and height must be positive")

    def to_record(self) -> dict:
        return {"image_id": self.image_id, "class_id": int(self.class_id),
                "score": round(float(self.score), 6),
                "box": [round(float(v), 4) for v in self.box]}


@dataclass(frozen=True)
class SmoothedTarget:
    """Target placing ``1-(K-1)eps`` on the true class and ``eps`` elsewhere."""

    K: int
    epsilon: float
    true_class: int

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("need at least two classes")
        if not 0 <= self.true_class < self.K:
            raise ValueError("true_class out of range")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.epsilon > 0 and not (1 - (self.K - 1) * self.epsilon > self.epsilon):
            raise ValueError(f"epsilon={self.epsilon} leaves the true class without the "
                             f"majority for K={self.K}")

    @property
    def on_value(self) -> float:
        return 1.0 - (self.K - 1) * self.epsilon

    def distribution(self) -> np.ndarray:
        y = np.full(self.K, self.epsilon, dtype=np.float64)
        y[self.true_class] = self.on_value
        return y


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------
def xywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([b[..., :2] - b[..., 2:4] / 2, b[..., :2] + b[..., 2:4] / 2], axis=-1)


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (cx, cy, w, h) boxes, shape (len(a), len(b))."""
    a = xywh_to_xyxy(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    b = xywh_to_xyxy(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def ciou_loss(pred_box, gt_box) -> float:
    """Complete-IoU loss ``1 - IoU + rho^2/c^2 + alpha*v`` for (cx, cy, w, h) boxes."""
    x1, y1, w1, h1 = (float(v) for v in pred_box)
    x2, y2, w2, h2 = (float(v) for v in gt_box)
    if not (w1 > 0 and h1 > 0 and w2 > 0 and h2 > 0):
        raise ValueError("boxes must have positive width and height")
    iw = max(0.0, min(x1 + w1 / 2, x2 + w2 / 2) - max(x1 - w1 / 2, x2 - w2 / 2))
    ih = max(0.0, min(y1 + h1 / 2, y2 + h2 / 2) - max(y1 - h1 / 2, y2 - h2 / 2))
    inter = iw * ih
    union = w1 * h1 + w2 * h2 - inter
    iou = inter / union
    cw = max(x1 + w1 / 2, x2 + w2 / 2) - min(x1 - w1 / 2, x2 - w2 / 2)
    ch = max(y1 + h1 / 2, y2 + h2 / 2) - min(y1 - h1 / 2, y2 - h2 / 2)
    c2 = cw * cw + ch * ch
    rho2 = (x2 - x1) ** 2 + (y2 - y1) ** 2
    v = (4 / math.pi ** 2) * (math.atan(w2 / h2) - math.atan(w1 / h1)) ** 2
    alpha = v / ((1 - iou) + v) if v > 0 else 0.0
    return 1 - iou + rho2 / c2 + alpha * v


def ciou_tensor(p_xy: Tensor, p_wh: Tensor, t_xy: np.ndarray, t_wh: np.ndarray,
                eps: float = 1e-9, detach_alpha: bool = True) -> Tensor:
    """Differentiable CIoU between predicted and fixed target boxes, shape (m,)."""
    px, py = p_xy[:, 0], p_xy[:, 1]
    pw, ph = p_wh[:, 0], p_wh[:, 1]
    tx, ty, tw, th = (t_xy[:, 0], t_xy[:, 1], t_wh[:, 0], t_wh[:, 1])
    p_x1, p_x2 = px - pw * 0.5, px + pw * 0.5
    p_y1, p_y2 = py - ph * 0.5, py + ph * 0.5
    t_x1, t_x2 = tx - tw / 2, tx + tw / 2
    t_y1, t_y2 = ty - th / 2, ty + th / 2
    iw = ops.maximum(ops.minimum(p_x2, t_x2) - ops.maximum(p_x1, t_x1), 0.0)
    ih = ops.maximum(ops.minimum(p_y2, t_y2) - ops.maximum(p_y1, t_y1), 0.0)
    inter = iw * ih
    union = pw * ph + (tw * th) - inter + eps
    iou = inter / union
    cw = ops.maximum(p_x2, t_x2) - ops.minimum(p_x1, t_x1)
    ch = ops.maximum(p_y2, t_y2) - ops.minimum(p_y1, t_y1)
    c2 = cw * cw + ch * ch + eps
    rho2 = (px - tx) * (px - tx) + (py - ty) * (py - ty)
    v = (4 / math.pi ** 2) * (np.arctan(tw / th) - ops.atan(pw / ph)) ** 2
    if detach_alpha:
        vd, iod = v.data, iou.data
        alpha = Tensor(vd / (vd - iod + (1 + eps)))
    else:
        alpha = v / (v - iou + (1 + eps))
    return iou - (rho2 / c2 + v * alpha)


# ---------------------------------------------------------------------------
# classification with label smoothing
# ---------------------------------------------------------------------------
def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def smoothed_ce_loss(logits, target: SmoothedTarget) -> float:
    """``-sum_i y_i log p_i`` with ``p = softmax(logits)`` and smoothed ``y``."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape != (target.K,):
        raise DimensionError(f"expected {target.K} logits, got shape {z.shape}", axis="classes")
    logp = z - z.max() - np.log(np.exp(z - z.max()).sum())
    return float(-(target.distribution() * logp).sum())


def smoothed_ce_from_probs(probs, target: SmoothedTarget) -> float:
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p <= 0):
        raise ValueError("probabilities must be strictly positive")
    return float(-(target.distribution() * np.log(p)).sum())


def analytic_grad(probs, target: SmoothedTarget) -> np.ndarray:
    """Gradient of the smoothed cross-entropy w.r.t. the predicted probabilities.

    ``-(1-(K-1)eps)/p_c`` on the true class and ``-eps/p_i`` elsewhere.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.shape != (target.K,):
        raise DimensionError(f"expected {target.K} probabilities", axis="classes")
    if np.any(p <= 0):
        raise ValueError("probabilities must be strictly positive")
    g = -target.epsilon / p
    g[target.true_class] = -target.on_value / p[target.true_class]
    return g


def softmax_jacobian(p: np.ndarray) -> np.ndarray:
    """``J[i, j] = d p_i / d z_j`` of the softmax at probabilities ``p``."""
    p = np.asarray(p, dtype=np.float64)
    return np.diag(p) - np.outer(p, p)


def sigmoid_jacobian(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.diag(p * (1 - p))


# ---------------------------------------------------------------------------
# head, decode, NMS
# ---------------------------------------------------------------------------
def head_forward(features: Sequence[Tensor], head) -> List[Tensor]:
    """Run a :class:`~yoga.blocks.Detect` head; outputs are ``(n, N, C+5, h, w)``."""
    return head(features)


def _sig(x):
    # +/-30 keeps every probability strictly inside (0, 1) in float64
    return 1.0 / (1.0 + np.exp(-np.clip(x, -30, 30)))


def decode(raw: Sequence, anchors: AnchorSet, conf_threshold: float = DEFAULT_CONF,
           image_ids: Optional[Sequence] = None) -> List[List[Detection]]:
    """Turn raw head maps into per-image detections scoring at least the threshold.

    Centre: ``(2*sig(tx) - 0.5 + grid_x) * stride``; size: ``(2*sig(tw))^2 * anchor``;
    score: ``sig(obj) * max_k sig(cls_k)``.
    """
    raw = [np.asarray(r.data if isinstance(r, Tensor) else r, dtype=np.float64) for r in raw]
    if len(raw) != len(anchors.strides):
        raise DimensionError("one raw map per anchor scale required", axis="scales")
    n = raw[0].shape[0]
    out: List[List[Detection]] = [[] for _ in range(n)]
    for scale, r in enumerate(raw):
        if r.ndim != 5 or r.shape[1] != anchors.per_scale:
            raise DimensionError(f"raw map {scale} has shape {r.shape}", axis="anchors")
        stride = anchors.strides[scale]
        a = anchors.array(scale)
        _, na, no, h, w = r.shape
        s = _sig(r)
        gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        cx = (2 * s[:, :, 0] - 0.5 + gx) * stride
        cy = (2 * s[:, :, 1] - 0.5 + gy) * stride
        bw = (2 * s[:, :, 2]) ** 2 * a[None, :, 0, None, None]
        bh = (2 * s[:, :, 3]) ** 2 * a[None, :, 1, None, None]
        obj = s[:, :, 4]
        if no > 5:
            cls = s[:, :, 5:]
            cid = cls.argmax(axis=2)
            score = obj * cls.max(axis=2)
        else:
            cid = np.zeros_like(obj, dtype=int)
            score = obj
        keep = score >= conf_threshold
        for b, ai, j, i in zip(*np.nonzero(keep)):
            out[b].append(Detection(int(cid[b, ai, j, i]), float(score[b, ai, j, i]),
                                    (float(cx[b, ai, j, i]), float(cy[b, ai, j, i]),
                                     float(bw[b, ai, j, i]), float(bh[b, ai, j, i])),
                                    None if image_ids is None else image_ids[b]))
    return out


def _logit(p):
    return math.log(p / (1 - p))


def encode(box, anchor: Tuple[float, float], stride: int) -> Tuple[int, int, np.ndarray]:
    """Inverse of :func:`decode` for one box at the cell containing its centre.

    Returns ``(grid_x, grid_y, [tx, ty, tw, th])``.
    """
    cx, cy, w, h = (float(v) for v in box)
    gx, gy = int(cx // stride), int(cy // stride)
    ox, oy = cx / stride - gx, cy / stride - gy
    rw, rh = w / anchor[0], h / anchor[1]
    if not (0 < rw < 4 and 0 < rh < 4):
        raise ValueError("box is not encodable against this anchor")
    t = np.array([_logit((ox + 0.5) / 2), _logit((oy + 0.5) / 2),
                  _logit(math.sqrt(rw) / 2), _logit(math.sqrt(rh) / 2)])
    return gx, gy, t


def nms(dets: Sequence[Detection], iou_threshold: float = DEFAULT_IOU) -> List[Detection]:
    """Greedy per-class non-maximum suppression (stable in score order)."""
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    classes = np.array([d.class_id for d in dets])
    kept: List[int] = []
    for c in np.unique(classes):
        idx = [i for i in order if classes[i] == c]
        iou = box_iou(boxes[idx], boxes[idx])
        alive = np.ones(len(idx), dtype=bool)
        for k in range(len(idx)):
            if not alive[k]:
                continue
            kept.append(idx[k])
            alive[k + 1:] &= iou[k, k + 1:] < iou_threshold
    kept.sort(key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in kept]


# ---------------------------------------------------------------------------
# training targets and loss
# ---------------------------------------------------------------------------
@dataclass
class ScaleTargets:
    image: np.ndarray     # (m,) image index in batch
    anchor: np.ndarray    # (m,) anchor index within the scale
    gy: np.ndarray
    gx: np.ndarray
    cls: np.ndarray
    box: np.ndarray       # (m, 4): centre offset within cell, w, h in grid units
    anchor_wh: np.ndarray # (m, 2) in grid units

    def __len__(self):
        return len(self.image)


def assign_targets(gt: np.ndarray, anchors: AnchorSet, grids: Sequence[Tuple[int, int]],
                   ratio_limit: float = ANCHOR_RATIO_LIMIT) -> List[ScaleTargets]:
    """Match ground truth to anchors at the cell containing each box centre.

    ``gt`` rows are ``[image, class, cx, cy, w, h]`` in input pixels.  An
    anchor is assigned when ``max(w/wa, wa/w, h/ha, ha/h) < ratio_limit``.
    """
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 6)
    out = []
    for scale, (gh, gw) in enumerate(grids):
        stride = anchors.strides[scale]
        a = anchors.array(scale)
        if len(gt):
            rw = gt[:, None, 4] / a[None, :, 0]
            rh = gt[:, None, 5] / a[None, :, 1]
            r = np.maximum(np.maximum(rw, 1 / rw), np.maximum(rh, 1 / rh))
            ti, ai = np.nonzero(r < ratio_limit)
        else:
            ti = ai = np.zeros(0, dtype=int)
        g = gt[ti]
        gx = np.clip((g[:, 2] // stride).astype(int), 0, gw - 1)
        gy = np.clip((g[:, 3] // stride).astype(int), 0, gh - 1)
        box = np.stack([g[:, 2] / stride - gx, g[:, 3] / stride - gy,
                        g[:, 4] / stride, g[:, 5] / stride], axis=1) if len(g) else np.zeros((0, 4))
        out.append(ScaleTargets(g[:, 0].astype(int), ai, gy, gx, g[:, 1].astype(int), box,
                                a[ai] / stride))
    return out


@dataclass
class LossConfig:
    box: float = 0.05
    obj: float = 1.0
    cls: float = 0.5
    balance: Tuple[float, ...] = (4.0, 1.0, 0.4)
    label_smoothing: float = 0.1
    ratio_limit: float = ANCHOR_RATIO_LIMIT


class DetectionLoss:
    """CIoU box loss + BCE objectness + label-smoothed BCE classification."""

    def __init__(self, num_classes: int, anchors: AnchorSet, config: LossConfig = None,
                 detach_alpha: bool = True):
        self.nc = num_classes
        self.anchors = anchors
        self.cfg = config or LossConfig()
        self.detach_alpha = detach_alpha
        eps = self.cfg.label_smoothing
        if num_classes > 1 and eps > 0:
            SmoothedTarget(num_classes, eps, 0)   # validates eps for this K
        self.cls_on = 1.0 - (num_classes - 1) * eps if num_classes > 1 else 1.0
        self.cls_off = eps if num_classes > 1 else 0.0

    def __call__(self, outputs: Sequence[Tensor], gt: np.ndarray):
        grids = [o.shape[3:5] for o in outputs]
        targets = assign_targets(gt, self.anchors, grids, self.cfg.ratio_limit)
        bs = outputs[0].shape[0]
        dtype = outputs[0].dtype
        lbox = Tensor(np.zeros((), dtype))
        lobj = Tensor(np.zeros((), dtype))
        lcls = Tensor(np.zeros((), dtype))
        for i, (p, t) in enumerate(zip(outputs, targets)):
            tobj = np.zeros((p.shape[0], p.shape[1], p.shape[3], p.shape[4]), dtype=dtype)
            if len(t):
                ps = p[(t.image, t.anchor, slice(None), t.gy, t.gx)]
                pxy = ops.sigmoid(ps[:, 0:2]) * 2.0 - 0.5
                pwh = (ops.sigmoid(ps[:, 2:4]) * 2.0) ** 2 * t.anchor_wh.astype(dtype)
                ciou = ciou_tensor(pxy, pwh, t.box[:, :2].astype(dtype), t.box[:, 2:].astype(dtype),
                                   detach_alpha=self.detach_alpha)
                lbox = lbox + (1.0 - ciou).mean()
                tobj[t.image, t.anchor, t.gy, t.gx] = 1.0
                if self.nc > 1:
                    tc = np.full((len(t), self.nc), self.cls_off, dtype=dtype)
                    tc[np.arange(len(t)), t.cls] = self.cls_on
                    lcls = lcls + ops.bce_with_logits(ps[:, 5:], tc).mean()
            pobj = p[:, :, 4]
            lobj = lobj + ops.bce_with_logits(pobj, tobj).mean() * self.cfg.balance[i]
        total = (lbox * self.cfg.box + lobj * self.cfg.obj + lcls * self.cfg.cls) * float(bs)
        parts = {"box": float(lbox.data), "obj": float(lobj.data), "cls": float(lcls.data)}
        return total, parts


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------
def to_jsonl(dets: Iterable[Detection]) -> str:
    """One JSON object per line: image_id, class_id, score, box (cx, cy, w, h)."""
    return "".join(json.dumps(d.to_record()) + "\n" for d in dets)


def read_jsonl(text: str) -> List[Detection]:
    out = []
    for line in text.splitlines():
        if line.strip():
            r = json.loads(line)
            out.append(Detection(r["class_id"], r["score"], tuple(r["box"]), r["image_id"]))
    return out
