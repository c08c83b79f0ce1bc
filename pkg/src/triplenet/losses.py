"""Supervision terms: detection (cls + loc), class-aware and class-agnostic segmentation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from triplenet import anchors as A
from triplenet import tensor as T
from triplenet.netgraph import ForwardOutputs, NetworkConfig, SegLossStrategy
from triplenet.tensor import Tensor

IGNORE = 255
NEG_RATIO = 3.0


def smooth_l1(d: float) -> float:
    ad = abs(d)
    return 0.5 * d * d if ad < 1.0 else ad - 0.5


def agnostic_target(class_mask: np.ndarray) -> np.ndarray:
    m = np.asarray(class_mask)
    return np.where(m == IGNORE, IGNORE, (m > 0).astype(m.dtype)).astype(m.dtype)


def anchor_rows(x: Tensor, per_anchor: int) -> Tensor:
    """(N, A*D, H, W) head output -> (N, H*W*A, D) rows in anchor order."""
    n, ch, h, w = x.shape
    a = ch // per_anchor
    y = T.reshape(x, (n, a, per_anchor, h, w))
    y = T.permute(y, (0, 3, 4, 1, 2))
    return T.reshape(y, (n, h * w * a, per_anchor))


def flatten_detections(out: ForwardOutputs, num_classes: int) -> tuple:
    cls = [anchor_rows(lv.det_cls_logits, num_classes + 1) for lv in out.levels]
    box = [anchor_rows(lv.det_box_deltas, 4) for lv in out.levels]
    if len(cls) == 1:
        return cls[0], box[0]
    return T.concat(cls, axis=1), T.concat(box, axis=1)


def detection_loss(matches: list, cls_logits: Tensor, box_deltas: Tensor, neg_ratio: float = NEG_RATIO) -> tuple:
    """SSD-style detection loss over a batch.

    ``cls_logits`` is (N, M, K+1), ``box_deltas`` (N, M, 4), ``matches`` one
    :class:`~triplenet.anchors.MatchResult` per image. Both terms are sums
    normalized by the batch positive count (floored at 1).
    """
    x = cls_logits.data
    n, m, _ = x.shape
    labels = np.stack([mr.labels for mr in matches])
    targets = np.stack([mr.targets for mr in matches])
    pos = labels > 0
    bg_loss = -T.log_softmax(x, axis=-1)[..., 0]
    sel = np.stack([A.hard_negative_mine(bg_loss[i], pos[i], neg_ratio) for i in range(n)])
    norm = max(1, int(pos.sum()))
    cls = T.cross_entropy(cls_logits, labels, sel.astype(np.float64) / norm, axis=-1)
    loc = T.smooth_l1(box_deltas, targets, pos[..., None].astype(np.float64) / norm)
    return cls, loc


def nearest_downsample(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbor label resize with half-pixel centers; works on (..., H, W)."""
    H, W = mask.shape[-2:]
    ys = np.minimum(((np.arange(h) + 0.5) * H / h).astype(int), H - 1)
    xs = np.minimum(((np.arange(w) + 0.5) * W / w).astype(int), W - 1)
    return mask[..., ys[:, None], xs[None, :]]


def segmentation_loss(logits: Tensor, gt_mask: np.ndarray, strategy=SegLossStrategy.UPSAMPLE_LOGITS) -> Tensor:
    """Mean per-pixel softmax cross-entropy; label ``IGNORE`` is excluded.

    ``logits`` is (N, C, h, w), ``gt_mask`` (N, H, W) or (H, W) for N == 1.
    """
    gt = np.asarray(gt_mask)
    if gt.ndim == 2:
        gt = gt[None]
    c = logits.shape[1]
    bad = (gt >= c) & (gt != IGNORE)
    if bad.any():
        raise ValueError(f"gt mask contains labels {sorted(set(np.unique(gt[bad]).tolist()))} "
                         f"outside 0..{c - 1}")
    H, W = gt.shape[-2:]
    h, w = logits.shape[2:]
    if H % h or W % w:
        raise ValueError(f"logit size {(h, w)} must divide gt size {(H, W)}")
    strategy = SegLossStrategy(strategy)
    if strategy is SegLossStrategy.UPSAMPLE_LOGITS:
        x = logits if (h, w) == (H, W) else T.bilinear_resize(logits, H, W)
        target = gt
    else:
        x = logits
        target = gt if (h, w) == (H, W) else nearest_downsample(gt, h, w)
    valid = target != IGNORE
    count = max(1, int(valid.sum()))
    return T.cross_entropy(x, target, valid.astype(np.float64) / count, axis=1)


@dataclass
class LossWeights:
    det: float = 1.0
    seg: float = 1.0
    agn: float = 1.0

    def __post_init__(self):
        for k in ("det", "seg", "agn"):
            v = getattr(self, k)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {k} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    det_cls: Optional[float] = None
    det_loc: Optional[float] = None
    seg_ca_per_level: list = field(default_factory=list)  # None where a level is unsupervised
    seg_fused: Optional[float] = None
    seg_agnostic_per_level: Optional[list] = None
    total: float = 0.0

    def terms(self) -> dict:
        """Flat name -> value mapping of the present terms."""
        out = {}
        if self.det_cls is not None:
            out["det_cls"] = self.det_cls
            out["det_loc"] = self.det_loc
        for i, v in enumerate(self.seg_ca_per_level):
            if v is not None:
                out[f"seg_ca_{i}"] = v
        if self.seg_fused is not None:
            out["seg_fused"] = self.seg_fused
        for i, v in enumerate(self.seg_agnostic_per_level or []):
            out[f"seg_agn_{i}"] = v
        out["total"] = self.total
        return out


def total_loss(det_cls=None, det_loc=None, seg_ca=(), seg_fused=None, seg_agn=None,
               weights: LossWeights = LossWeights()) -> tuple:
    """Combine loss tensors; returns ``(total_tensor, LossBreakdown)``.

    total = w_det (cls + loc) + w_seg (mean of per-level class-aware + fused)
    + w_agn (mean of per-level agnostic). Absent terms contribute nothing.
    """
    parts = []
    bd = LossBreakdown()
    if det_cls is not None:
        bd.det_cls, bd.det_loc = float(det_cls.data), float(det_loc.data)
        parts.append(T.mul(T.add(det_cls, det_loc), T.tensor(weights.det)))
    bd.seg_ca_per_level = [None if t is None else float(t.data) for t in seg_ca]
    present = [t for t in seg_ca if t is not None]
    seg_terms = []
    if present:
        s = present[0]
        for t in present[1:]:
            s = T.add(s, t)
        seg_terms.append(T.mul(s, T.tensor(1.0 / len(present))))
    if seg_fused is not None:
        bd.seg_fused = float(seg_fused.data)
        seg_terms.append(seg_fused)
    if seg_terms:
        s = seg_terms[0] if len(seg_terms) == 1 else T.add(*seg_terms)
        parts.append(T.mul(s, T.tensor(weights.seg)))
    if seg_agn:
        bd.seg_agnostic_per_level = [float(t.data) for t in seg_agn]
        s = seg_agn[0]
        for t in seg_agn[1:]:
            s = T.add(s, t)
        parts.append(T.mul(s, T.tensor(weights.agn / len(seg_agn))))
    if not parts:
        total = T.tensor(0.0)
    else:
        total = parts[0]
        for p in parts[1:]:
            total = T.add(total, p)
    bd.total = float(total.data)
    return total, bd


def compute_losses(cfg: NetworkConfig, out: ForwardOutputs, matches: Optional[list], class_masks: np.ndarray,
                   weights: LossWeights = LossWeights()) -> tuple:
    """All supervision terms present for ``cfg`` on one train-mode forward."""
    det_cls = det_loc = None
    if cfg.detection:
        cls_rows, box_rows = flatten_detections(out, cfg.num_classes)
        det_cls, det_loc = detection_loss(matches, cls_rows, box_rows)
    strategy = cfg.seg_loss_strategy
    supervised = set(cfg.ca_supervised_levels())
    seg_ca = [segmentation_loss(lv.seg_logits, class_masks, strategy) if i in supervised else None
              for i, lv in enumerate(out.levels)]
    fused = segmentation_loss(out.fused_seg_logits, class_masks, strategy) if cfg.mfs else None
    agn = None
    if cfg.cas:
        tgt = agnostic_target(class_masks)
        agn = [segmentation_loss(lv.agnostic_logits, tgt, strategy) for lv in out.levels]
    return total_loss(det_cls, det_loc, seg_ca, fused, agn, weights)
