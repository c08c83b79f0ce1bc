"""Detection mAP@0.5, segmentation mIoU, and batched inference."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from triplenet import anchors as A
from triplenet import tensor as T
from triplenet.anchors import Box
from triplenet.netgraph import Mode, Network

IGNORE = 255
KEEP_TOP_K = 200


@dataclass(frozen=True)
class Detection:
    box: Box
    cls: int
    score: float


@dataclass
class APResult:
    per_class_ap: dict  # class -> AP, only classes with ground truth
    mAP: float
    pr_points: dict = field(default_factory=dict)  # class -> (recall array, precision array)


@dataclass
class MIoUResult:
    per_class_iou: list  # None for classes absent from both prediction and ground truth
    mIoU: float


def average_precision(tp: np.ndarray, npos: int) -> tuple:
    """All-points interpolated AP from a ranked TP(1)/FP(0) vector."""
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    rec = ctp / npos
    prec = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).tiny)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1])), rec, prec


def _ranked(dets_per_image: dict, cls: int) -> list:
    rows = []
    for img_id in sorted(dets_per_image):
        for j, d in enumerate(dets_per_image[img_id]):
            if d.cls == cls:
                rows.append((-float(d.score), img_id, j, d))
    rows.sort(key=lambda r: r[:3])
    return [(r[1], r[3]) for r in rows]


def match_ranked(dets_per_image: dict, gts_per_image: dict, cls: int, iou_thresh: float = 0.5) -> tuple:
    """Greedy TP/FP labelling of class ``cls`` detections in descending score order."""
    gts = {}
    npos = 0
    for img_id, items in gts_per_image.items():
        boxes = np.array([b.as_array() for b, k in items if k == cls]).reshape(-1, 4)
        gts[img_id] = (A.to_corners(boxes), np.zeros(len(boxes), dtype=bool))
        npos += len(boxes)
    ranked = _ranked(dets_per_image, cls)
    tp = np.zeros(len(ranked))
    for r, (img_id, d) in enumerate(ranked):
        if img_id not in gts or len(gts[img_id][0]) == 0:
            continue
        corners, used = gts[img_id]
        ov = A.iou_corners(np.array([d.box.corners()]), corners)[0]
        ov = np.where(used, -1.0, ov)
        g = int(np.argmax(ov))
        if ov[g] >= iou_thresh:
            used[g] = True
            tp[r] = 1.0
    return tp, npos


def evaluate_detections(dets_per_image: dict, gts_per_image: dict, num_classes: int,
                        iou_thresh: float = 0.5) -> APResult:
    """Per-class all-points AP and their mean over classes that have ground truth.

    ``dets_per_image`` maps image id -> list of :class:`Detection`;
    ``gts_per_image`` maps image id -> list of ``(Box, class)``.
    """
    unknown = set(dets_per_image) - set(gts_per_image)
    if unknown:
        raise ValueError(f"detections for unknown image ids: {sorted(unknown)[:5]}")
    per_class, pr = {}, {}
    for c in range(1, num_classes + 1):
        tp, npos = match_ranked(dets_per_image, gts_per_image, c, iou_thresh)
        if npos == 0:
            continue
        ap, rec, prec = average_precision(tp, npos)
        per_class[c] = ap
        pr[c] = (rec, prec)
    m = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return APResult(per_class, m, pr)


class ConfusionMatrix:
    def __init__(self, num_classes: int):
        self.n = num_classes
        self.mat = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} differs from ground truth shape {gt.shape}")
        valid = gt != IGNORE
        p, g = pred[valid].astype(np.int64), gt[valid].astype(np.int64)
        if (p >= self.n).any() or (g >= self.n).any() or (p < 0).any() or (g < 0).any():
            raise ValueError(f"labels must lie in 0..{self.n - 1} (or {IGNORE} in ground truth)")
        self.mat += np.bincount(g * self.n + p, minlength=self.n * self.n).reshape(self.n, self.n)

    def result(self) -> MIoUResult:
        tp = np.diag(self.mat).astype(np.float64)
        fp = self.mat.sum(axis=0) - tp
        fn = self.mat.sum(axis=1) - tp
        denom = tp + fp + fn
        ious = [None if d == 0 else float(t / d) for t, d in zip(tp, denom)]
        present = [v for v in ious if v is not None]
        return MIoUResult(ious, float(np.mean(present)) if present else 0.0)


def miou(pred_mask, gt_mask, num_classes: int) -> MIoUResult:
    """mIoU from the pixel confusion matrix; accepts one mask pair or sequences of them."""
    cm = ConfusionMatrix(num_classes)
    if isinstance(pred_mask, (list, tuple)):
        if len(pred_mask) != len(gt_mask):
            raise ValueError("prediction and ground-truth lists differ in length")
        for p, g in zip(pred_mask, gt_mask):
            cm.update(p, g)
    else:
        cm.update(pred_mask, gt_mask)
    return cm.result()


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def postprocess(scores: np.ndarray, deltas: np.ndarray, anchors: np.ndarray, num_classes: int,
                score_floor: float = A.SCORE_FLOOR, nms_thresh: float = A.NMS_THRESH,
                top_k_class: int = A.TOP_K_PER_CLASS, keep_top_k: int = KEEP_TOP_K) -> list:
    """Per-class score floor + NMS, then a global top-k on one image's anchor outputs."""
    boxes, _ = A.decode_boxes(deltas, anchors)
    corners = np.clip(A.to_corners(boxes), 0.0, 1.0)
    wh = corners[:, 2:] - corners[:, :2]
    ok = (wh > 0).all(axis=1)
    boxes = A.to_center(corners)
    dets = []
    for c in range(1, num_classes + 1):
        s = scores[:, c]
        idx = np.flatnonzero((s > score_floor) & ok)
        if len(idx) == 0:
            continue
        idx = idx[np.argsort(-s[idx], kind="stable")[:top_k_class]]
        keep = A.nms(boxes[idx], s[idx], nms_thresh)
        for i in idx[keep]:
            dets.append(Detection(Box(*(float(v) for v in boxes[i])), c, float(s[i])))
    dets.sort(key=lambda d: -d.score)
    return dets[:keep_top_k]


def predict_batch(net: Network, images: np.ndarray, anchor_boxes: Optional[np.ndarray] = None) -> list:
    """Inference on (N, 3, H, W) images; returns ``[(detections, seg_mask), ...]``."""
    from triplenet.losses import flatten_detections

    cfg = net.cfg
    if anchor_boxes is None:
        anchor_boxes = A.generate_anchors(cfg).boxes
    out = net.forward(T.tensor(images), Mode.INFERENCE)
    results = []
    dets_all = [[] for _ in range(len(images))]
    if cfg.detection:
        cls_rows, box_rows = flatten_detections(out, cfg.num_classes)
        probs = np.exp(T.log_softmax(cls_rows.data, axis=-1))
        for i in range(len(images)):
            dets_all[i] = postprocess(probs[i], box_rows.data[i], anchor_boxes, cfg.num_classes)
    masks = [None] * len(images)
    if out.seg_output is not None:
        h, w = cfg.input_size
        logits = out.seg_output
        if logits.shape[2:] != (h, w):
            logits = T.bilinear_resize(logits, h, w)
        am = np.argmax(logits.data, axis=1).astype(np.uint8)
        masks = list(am)
    for d, m in zip(dets_all, masks):
        results.append((d, m))
    return results


def predict(net: Network, image: np.ndarray) -> tuple:
    """Single (3, H, W) image -> ``(detections, seg_mask)``."""
    return predict_batch(net, np.asarray(image)[None])[0]


# ---------------------------------------------------------------------------
# Prediction dump: JSON lines, one record per image
# ---------------------------------------------------------------------------

def write_predictions(path, preds: dict) -> None:
    """``preds`` maps image id -> list of :class:`Detection`."""
    with open(path, "w") as f:
        for img_id in sorted(preds):
            dets = preds[img_id]
            f.write(json.dumps({
                "id": img_id,
                "boxes": [[d.box.cx, d.box.cy, d.box.w, d.box.h] for d in dets],
                "classes": [d.cls for d in dets],
                "scores": [d.score for d in dets],
            }) + "\n")


def read_predictions(path) -> dict:
    out = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                dets = [Detection(Box(*b), int(c), float(s))
                        for b, c, s in zip(rec["boxes"], rec["classes"], rec["scores"], strict=True)]
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{ln}: bad prediction record ({exc})") from exc
            out[rec["id"]] = dets
    return out
