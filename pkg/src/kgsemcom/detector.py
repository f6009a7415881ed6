"""Region proposals over the feature pyramid, the detection loss, and mAP.

Boxes are corner-form (x1, y1, x2, y2) with continuous areas. Box
regression uses the center/log-size parameterization (tx, ty, tw, th).
A single 3x3 convolutional head is shared across all pyramid scales and
emits A objectness logits plus 4A box deltas per cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError, ValueRangeError
from .extractor import FeaturePyramid
from .layers import Conv2d, log_loss, smooth_l1_rows
from .optim import ParameterStore
from .tensor import Tensor, _accumulate, _make, concat

STRIDES = (4, 8, 16, 32, 64)
ANCHOR_RATIOS = (0.5, 1.0, 2.0)
POS_IOU = 0.7
NEG_IOU = 0.3


# ---------------------------------------------------------------------------
# boxes
# ---------------------------------------------------------------------------

def iou(a, b) -> float:
    """Intersection over union of two corner-form boxes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return float(inter / union) if union > 0 else 0.0


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N,4) and (M,4) corner boxes."""
    if len(boxes_a) == 0 or len(boxes_b) == 0:
        return np.zeros((len(boxes_a), len(boxes_b)))
    a = np.asarray(boxes_a, dtype=np.float64)
    b = np.asarray(boxes_b, dtype=np.float64)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def encode_deltas(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """(tx, ty, tw, th) of boxes relative to anchors."""
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bx = boxes[:, 0] + 0.5 * bw
    by = boxes[:, 1] + 0.5 * bh
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    return np.stack([(bx - ax) / aw, (by - ay) / ah,
                     np.log(bw / aw), np.log(bh / ah)], axis=1)


def decode_deltas(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    bx = deltas[:, 0] * aw + ax
    by = deltas[:, 1] * ah + ay
    bw = np.exp(deltas[:, 2]) * aw
    bh = np.exp(deltas[:, 3]) * ah
    return np.stack([bx - 0.5 * bw, by - 0.5 * bh,
                     bx + 0.5 * bw, by + 0.5 * bh], axis=1)


def clip_boxes(boxes: np.ndarray, image_size: int) -> np.ndarray:
    return np.clip(boxes, 0.0, float(image_size))


# ---------------------------------------------------------------------------
# anchors
# ---------------------------------------------------------------------------

def generate_anchors(image_size: int, pyramid_sizes, strides=STRIDES,
                     ratios=ANCHOR_RATIOS, scale: float = 4.0):
    """Corner-form anchors per level: one size (stride*scale) at each cell,
    three aspect ratios. Returns a list of (S*S*A, 4) arrays."""
    per_level = []
    for s, stride in zip(pyramid_sizes, strides):
        base = stride * scale
        centers = (np.arange(s) + 0.5) * stride
        cx, cy = np.meshgrid(centers, centers, indexing="xy")
        boxes = []
        for r in ratios:
            w = base * np.sqrt(1.0 / r)
            h = base * np.sqrt(r)
            boxes.append(np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2],
                                  axis=-1))
        # layout matches the head output: cell-major, then ratio
        level = np.stack(boxes, axis=2).reshape(-1, 4)
        per_level.append(level)
    return per_level


def assign_anchors(anchors: np.ndarray, ground_truths: np.ndarray,
                   pos_iou: float = POS_IOU, neg_iou: float = NEG_IOU):
    """Labels per anchor: 1 positive, 0 negative, -1 ignored; plus the
    index of the matched ground-truth box (or -1)."""
    n = len(anchors)
    labels = np.full(n, -1, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if len(ground_truths) == 0:
        labels[:] = 0
        return labels, matched
    ious = iou_matrix(anchors, ground_truths)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[best_iou <= neg_iou] = 0
    labels[best_iou >= pos_iou] = 1
    # every ground truth claims its best anchor
    for g in range(len(ground_truths)):
        col = ious[:, g]
        if col.max() > 0:
            labels[col == col.max()] = 1
    matched[labels == 1] = best_gt[labels == 1]
    return labels, matched


# ---------------------------------------------------------------------------
# RPN head
# ---------------------------------------------------------------------------

class RPNHead:
    """Shared 3x3 trunk + 1x1 objectness and box-delta branches."""

    def __init__(self, store: ParameterStore, in_channels: int,
                 n_anchors: int = len(ANCHOR_RATIOS), hidden: int = 32,
                 slope: float = 0.01, rng=None, prefix: str = "rpn"):
        rng = rng or np.random.default_rng(0)
        self.n_anchors = n_anchors
        self.slope = slope
        self.trunk = Conv2d(store, f"{prefix}.trunk", in_channels, hidden, 3, 1, 1, rng=rng)
        self.obj = Conv2d(store, f"{prefix}.obj", hidden, n_anchors, 1, 1, 0, rng=rng)
        self.delta = Conv2d(store, f"{prefix}.delta", hidden, 4 * n_anchors, 1, 1, 0, rng=rng)

    def forward_level(self, level: Tensor):
        h = self.trunk(level).leaky_relu(self.slope)
        return self.obj(h), self.delta(h)

    def complexity(self, pyramid_sizes):
        params = adds = mults = 0
        first = True
        for s in pyramid_sizes:
            for conv in (self.trunk, self.obj, self.delta):
                p, a, m, _ = conv.complexity(s, s)
                if first:
                    params += p
                adds, mults = adds + a, mults + m
            first = False
        return params, adds, mults


def rpn_forward(pyramid: FeaturePyramid, head: RPNHead):
    """Per-scale objectness maps and box deltas from the shared head."""
    return [head.forward_level(level) for level in pyramid.levels]


def flatten_rpn_outputs(outputs, batch_index: int):
    """(objectness logits, deltas) for one image, anchor-major across levels.

    Layout matches generate_anchors: levels in order, cells row-major,
    A anchors per cell.
    """
    logit_parts, delta_parts = [], []
    for obj, delta in outputs:
        a = obj.shape[1]
        o = obj[batch_index]                       # (A, S, S)
        d = delta[batch_index]                     # (4A, S, S)
        s = o.shape[1]
        logit_parts.append(o.transpose(1, 2, 0).reshape(s * s * a))
        delta_parts.append(d.reshape(a, 4, s, s).transpose(2, 3, 0, 1).reshape(s * s * a, 4))
    return concat(logit_parts, axis=0), concat(delta_parts, axis=0)


# ---------------------------------------------------------------------------
# Eq.-style multi-task loss
# ---------------------------------------------------------------------------

def loss_total(p: Tensor, p_star, t: Tensor, t_star, lam: float = 1.0,
               n_cls: int | None = None, n_reg: int | None = None) -> Tensor:
    """(1/N_cls) sum log_loss(p_i, p*_i) + lam (1/N_reg) sum p*_i smooth_l1(t_i, t*_i).

    ``p`` holds predicted object probabilities for the sampled anchors,
    ``p_star`` their 0/1 labels; the regression term is gated by p*_i.
    Zero N_cls or N_reg makes that term contribute nothing.
    """
    p_star = np.asarray(p_star, dtype=np.float64)
    if p.data.shape != p_star.shape:
        raise ShapeMismatchError(
            f"loss_total: p shape {p.data.shape} vs labels {p_star.shape}")
    n_cls = len(p_star) if n_cls is None else n_cls
    n_reg = int(p_star.sum()) if n_reg is None else n_reg
    total = Tensor(np.zeros(()))
    if n_cls > 0 and p.size > 0:
        total = total + log_loss(p, p_star).sum() / float(n_cls)
    if n_reg > 0 and p.size > 0 and p_star.sum() > 0:
        per_anchor = smooth_l1_rows(t, t_star)
        gated = (per_anchor * Tensor(p_star)).sum()
        total = total + gated * (lam / float(n_reg))
    return total


# ---------------------------------------------------------------------------
# proposals, NMS, RoI pooling
# ---------------------------------------------------------------------------

def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices, score-descending."""
    order = np.argsort(-scores, kind="stable")
    mat = iou_matrix(boxes, boxes)
    keep = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(int(idx))
        suppressed |= mat[idx] >= iou_thresh
    return keep


def propose(rpn_outputs, anchors_per_level, image_size: int,
            pre_nms_n: int = 200, nms_iou: float = 0.7,
            post_nms_n: int = 16, batch_index: int = 0):
    """Decode deltas, clip, and NMS-filter into scored proposal boxes."""
    logits, deltas = flatten_rpn_outputs(rpn_outputs, batch_index)
    scores = logits.sigmoid().data
    anchors = np.concatenate(anchors_per_level, axis=0)
    boxes = clip_boxes(decode_deltas(deltas.data, anchors), image_size)
    valid = (boxes[:, 2] - boxes[:, 0] > 1e-6) & (boxes[:, 3] - boxes[:, 1] > 1e-6)
    idx = np.nonzero(valid)[0]
    if idx.size == 0:
        return np.zeros((0, 4)), np.zeros(0)
    order = idx[np.argsort(-scores[idx], kind="stable")][:pre_nms_n]
    kept = nms(boxes[order], scores[order], nms_iou)[:post_nms_n]
    sel = order[kept]
    return boxes[sel], scores[sel]


def roi_level(box, image_size: int, scale: float = 4.0) -> int:
    """Pyramid level for a box: floor(4 + log2(sqrt(area)/image * scale)),
    clamped to [2, 6]."""
    area = max(1e-9, (box[2] - box[0]) * (box[3] - box[1]))
    lvl = int(np.floor(4 + np.log2(np.sqrt(area) / image_size * scale)))
    return min(6, max(2, lvl))


def _bilinear_gather(level: Tensor, ys: np.ndarray, xs: np.ndarray) -> Tensor:
    """Sample (C, H, W) at fractional points; returns (P, C). Differentiable
    with scatter-add backward."""
    c, h, w = level.shape
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)
    fx = np.clip(xs - x0, 0.0, 1.0)
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    data = level.data
    vals = (data[:, y0, x0] * w00 + data[:, y0, x1] * w01
            + data[:, y1, x0] * w10 + data[:, y1, x1] * w11)   # (C, P)
    out = _make(vals.T, (level,))
    if out._prev:
        def bwd(g, level=level, idx=(y0, x0, y1, x1), wts=(w00, w01, w10, w11)):
            y0, x0, y1, x1 = idx
            w00, w01, w10, w11 = wts
            full = np.zeros_like(level.data)
            gt = g.T  # (C, P)
            np.add.at(full, (slice(None), y0, x0), gt * w00)
            np.add.at(full, (slice(None), y0, x1), gt * w01)
            np.add.at(full, (slice(None), y1, x0), gt * w10)
            np.add.at(full, (slice(None), y1, x1), gt * w11)
            _accumulate(level, full)
        out._backward = bwd
    return out


def roi_pool(pyramid: FeaturePyramid, boxes: np.ndarray, out_size: int = 5,
             image_size: int = 128, batch_index: int = 0,
             level_override: int | None = None) -> Tensor:
    """Bilinearly sample an out_size x out_size grid per box from the level
    selected by box area; returns (N, C*out_size^2)."""
    if len(boxes) == 0:
        c = pyramid.channels
        return Tensor(np.zeros((0, c * out_size * out_size)))
    feats = []
    for box in boxes:
        lvl = roi_level(box, image_size) if level_override is None else level_override
        level = pyramid.levels[lvl - 2][batch_index]
        s = level.shape[1]
        cell = image_size / s
        # grid point centers inside the box, in feature-map coordinates
        gx = (box[0] + (np.arange(out_size) + 0.5) * (box[2] - box[0]) / out_size) / cell - 0.5
        gy = (box[1] + (np.arange(out_size) + 0.5) * (box[3] - box[1]) / out_size) / cell - 0.5
        yy, xx = np.meshgrid(gy, gx, indexing="ij")
        sampled = _bilinear_gather(level, yy.reshape(-1), xx.reshape(-1))  # (P, C)
        feats.append(sampled.transpose().reshape(level.shape[0] * out_size * out_size))
    from .tensor import stack_rows
    return stack_rows(feats)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Detection:
    image_id: int
    category: int
    score: float
    box: tuple

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueRangeError(f"detection score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    category: int
    box: tuple


def average_precision(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """Area under the all-point interpolated precision-recall curve."""
    mrec = np.concatenate([[0.0], recalls])
    mpre = np.concatenate([[1.0], precisions])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def mean_average_precision(detections, ground_truths, iou_thresh: float = 0.5):
    """Per-class AP and their unweighted mean.

    Greedy score-descending matching, each ground truth used at most once;
    classes without ground truth are excluded from the mean.
    """
    gt_by_class: dict[int, list[GroundTruth]] = {}
    for gt in ground_truths:
        gt_by_class.setdefault(gt.category, []).append(gt)

    ap_per_class: dict[int, float] = {}
    for cls, gts in sorted(gt_by_class.items()):
        dets = sorted((d for d in detections if d.category == cls),
                      key=lambda d: (-d.score, d.image_id))
        matched: set[int] = set()
        tp = np.zeros(len(dets))
        fp = np.zeros(len(dets))
        for i, det in enumerate(dets):
            best, best_iou = -1, iou_thresh
            for j, gt in enumerate(gts):
                if gt.image_id != det.image_id or j in matched:
                    continue
                v = iou(det.box, gt.box)
                if v >= best_iou:
                    best, best_iou = j, v
            if best >= 0:
                matched.add(best)
                tp[i] = 1
            else:
                fp[i] = 1
        if len(dets) == 0:
            ap_per_class[cls] = 0.0
            continue
        ctp = np.cumsum(tp)
        cfp = np.cumsum(fp)
        recalls = ctp / len(gts)
        precisions = ctp / np.maximum(ctp + cfp, 1e-12)
        ap_per_class[cls] = average_precision(recalls, precisions)

    m = float(np.mean(list(ap_per_class.values()))) if ap_per_class else 0.0
    return ap_per_class, m
