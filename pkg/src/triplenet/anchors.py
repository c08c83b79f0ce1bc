"""Anchor grids, box geometry, matching, coding, NMS and hard negative mining.

Boxes are normalized ``(cx, cy, w, h)`` rows; helpers convert to corner form
``(x1, y1, x2, y2)`` where overlap arithmetic is simpler.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from triplenet import kernels

VARIANCES = (0.1, 0.2)
POS_THRESH = 0.5
NMS_THRESH = 0.45
SCORE_FLOOR = 0.01
TOP_K_PER_CLASS = 200
MIN_SIZE = 1e-6
ASPECT_RATIOS = (1.0, 2.0, 0.5, 3.0, 1.0 / 3.0, 4.0, 0.25)
BACKGROUND = 0


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box needs positive size, got w={self.w}, h={self.h}")

    def corners(self) -> tuple:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


def to_corners(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    half = b[:, 2:] / 2
    return np.concatenate([b[:, :2] - half, b[:, :2] + half], axis=1)


def to_center(corners: np.ndarray) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64).reshape(-1, 4)
    return np.concatenate([(c[:, :2] + c[:, 2:]) / 2, c[:, 2:] - c[:, :2]], axis=1)


def iou(a: Box, b: Box) -> float:
    return float(iou_corners(np.array([a.corners()]), np.array([b.corners()]))[0, 0])


def iou_corners(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between corner-form rows of ``a`` (n,4) and ``b`` (m,4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


# ---------------------------------------------------------------------------
# Anchor generation
# ---------------------------------------------------------------------------

@dataclass
class AnchorSet:
    levels: list  # per level: (H_l*W_l*A, 4) center-form array
    scales: list
    grid_sizes: list

    @property
    def boxes(self) -> np.ndarray:
        return np.concatenate(self.levels, axis=0)

    def __len__(self) -> int:
        return sum(len(lv) for lv in self.levels)

    def level_slices(self) -> list:
        out, lo = [], 0
        for lv in self.levels:
            out.append(slice(lo, lo + len(lv)))
            lo += len(lv)
        return out


def level_scales(num_levels: int, coarse: float = 0.8, fine: float = 0.2) -> list:
    if num_levels == 1:
        return [coarse]
    return list(np.linspace(coarse, fine, num_levels))


def anchors_for_grids(grid_sizes, anchors_per_cell: int) -> AnchorSet:
    if anchors_per_cell > len(ASPECT_RATIOS):
        raise ValueError(f"at most {len(ASPECT_RATIOS)} anchors per cell supported")
    scales = level_scales(len(grid_sizes))
    ratios = np.array(ASPECT_RATIOS[:anchors_per_cell])
    levels = []
    for (gh, gw), s in zip(grid_sizes, scales):
        cy, cx = np.meshgrid((np.arange(gh) + 0.5) / gh, (np.arange(gw) + 0.5) / gw, indexing="ij")
        ws = s * np.sqrt(ratios)
        hs = s / np.sqrt(ratios)
        a = np.empty((gh, gw, anchors_per_cell, 4))
        a[..., 0] = cx[..., None]
        a[..., 1] = cy[..., None]
        a[..., 2] = ws
        a[..., 3] = hs
        levels.append(a.reshape(-1, 4))
    return AnchorSet(levels, scales, [tuple(g) for g in grid_sizes])


def generate_anchors(cfg) -> AnchorSet:
    """Anchors for every decoder level of a :class:`~triplenet.netgraph.NetworkConfig`."""
    return anchors_for_grids(cfg.decoder_grid_sizes(), cfg.anchors_per_cell)


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------

@dataclass
class MatchResult:
    labels: np.ndarray  # (M,) 0 = background, k in 1..K
    matched_gt: np.ndarray  # (M,) gt index or -1
    targets: np.ndarray  # (M, 4) encoded deltas, zero for negatives

    @property
    def positives(self) -> np.ndarray:
        return self.labels > 0


def match_anchors(anchors: np.ndarray, gt_boxes: np.ndarray, gt_classes, pos_thresh: float = POS_THRESH
                  ) -> MatchResult:
    """Two-phase matching of center-form ``anchors`` (M,4) to ground truths.

    Each ground truth, in index order, first claims its best not-yet-claimed
    anchor. Remaining anchors become positive for their best ground truth
    when the overlap reaches ``pos_thresh``.
    """
    if not 0.0 < pos_thresh < 1.0:
        raise ValueError(f"pos_thresh must lie in (0, 1), got {pos_thresh}")
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    m = len(anchors)
    labels = np.zeros(m, dtype=np.int64)
    matched = np.full(m, -1, dtype=np.int64)
    targets = np.zeros((m, 4))
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    if len(gt_boxes) == 0:
        return MatchResult(labels, matched, targets)
    ov = iou_corners(to_corners(anchors), to_corners(gt_boxes))  # (M, G)
    claimed = np.zeros(m, dtype=bool)
    for g in range(len(gt_boxes)):
        col = np.where(claimed, -1.0, ov[:, g])
        a = int(np.argmax(col))
        claimed[a] = True
        matched[a] = g
    rest = ~claimed
    best_gt = np.argmax(ov, axis=1)
    best_ov = ov[np.arange(m), best_gt]
    take = rest & (best_ov >= pos_thresh)
    matched[take] = best_gt[take]
    pos = matched >= 0
    labels[pos] = gt_classes[matched[pos]]
    targets[pos] = encode_boxes(gt_boxes[matched[pos]], anchors[pos])
    return MatchResult(labels, matched, targets)


# ---------------------------------------------------------------------------
# Box coding
# ---------------------------------------------------------------------------

def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    an = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    v1, v2 = VARIANCES
    return np.stack([
        (gt[:, 0] - an[:, 0]) / an[:, 2] / v1,
        (gt[:, 1] - an[:, 1]) / an[:, 3] / v1,
        np.log(gt[:, 2] / an[:, 2]) / v2,
        np.log(gt[:, 3] / an[:, 3]) / v2,
    ], axis=1)


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray) -> tuple:
    """Inverse of :func:`encode_boxes`. Returns ``(boxes, clamped_mask)``.

    Sizes that decode to less than ``MIN_SIZE`` (including overflow to
    non-finite values) are clamped and flagged in ``clamped_mask``.
    """
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    an = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    v1, v2 = VARIANCES
    with np.errstate(over="ignore"):
        w = an[:, 2] * np.exp(d[:, 2] * v2)
        h = an[:, 3] * np.exp(d[:, 3] * v2)
    bad = ~(w >= MIN_SIZE) | ~(h >= MIN_SIZE)
    w = np.where(w >= MIN_SIZE, w, MIN_SIZE)
    h = np.where(h >= MIN_SIZE, h, MIN_SIZE)
    boxes = np.stack([an[:, 0] + d[:, 0] * v1 * an[:, 2], an[:, 1] + d[:, 1] * v1 * an[:, 3], w, h], axis=1)
    return boxes, bad


def encode_box(gt: Box, anchor: Box) -> tuple:
    return tuple(float(v) for v in encode_boxes(gt.as_array(), anchor.as_array())[0])


def decode_box(deltas, anchor: Box) -> Box:
    b, _ = decode_boxes(np.asarray(deltas), anchor.as_array())
    return Box(*(float(v) for v in b[0]))


# ---------------------------------------------------------------------------
# NMS and mining
# ---------------------------------------------------------------------------

def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float = NMS_THRESH) -> np.ndarray:
    """Greedy NMS over center-form boxes. Returns kept indices by descending score.

    Score ties keep input order. Any two survivors overlap below ``iou_thresh``.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(scores) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable").astype(np.int64)
    corners = np.ascontiguousarray(to_corners(boxes))
    return np.asarray(kernels.nms(corners, order, float(iou_thresh)), dtype=np.int64)


NEG_FLOOR = 8


def hard_negative_mine(per_anchor_loss: np.ndarray, positives: np.ndarray, ratio: float = 3.0) -> np.ndarray:
    """Loss mask: positives plus the highest-loss negatives.

    Keeps ``min(ratio * #pos, #neg)`` negatives, or ``NEG_FLOOR`` of them when
    there are no positives. Loss ties go to the lower index.
    """
    if ratio <= 0:
        raise ValueError(f"ratio must be positive, got {ratio}")
    loss = np.asarray(per_anchor_loss, dtype=np.float64).reshape(-1)
    pos = np.asarray(positives, dtype=bool).reshape(-1)
    npos = int(pos.sum())
    neg_idx = np.flatnonzero(~pos)
    want = int(ratio * npos) if npos else max(1, NEG_FLOOR)
    k = min(want, len(neg_idx))
    mask = pos.copy()
    if k:
        order = np.argsort(-loss[neg_idx], kind="stable")
        mask[neg_idx[order[:k]]] = True
    return mask
