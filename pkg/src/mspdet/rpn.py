"""Multi-scale region proposal network.

Each pyramid level gets its own prediction head. Coarse predictions are
upsampled 2x by a learnable bilinear-initialised deconvolution and added to
the next finer level (P5 -> P4 -> P3), so the fused objectness and box maps
live on the stride-4 grid.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import boxes as bx
from .backbone import LEVEL_STRIDES, FeaturePyramid
from .layers import DeconvLayer, PredictionHead, softmax
from .tensor import ModelParams, Tensor, add, make_op


@dataclass(frozen=True)
class AnchorConfig:
    base_size: float = 8.0
    scales: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0)
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)

    @property
    def num_anchors(self) -> int:
        return len(self.scales) * len(self.ratios)


@dataclass
class RpnPrediction:
    objectness: Tensor  # (N, 2A, H, W): channel 2a is background, 2a+1 object
    box_deltas: Tensor  # (N, 4A, H, W)
    stride: int

    @property
    def grid(self) -> tuple[int, int]:
        return self.objectness.shape[2], self.objectness.shape[3]


def fuse_predictions(coarse: RpnPrediction, finer: RpnPrediction,
                     up_cls: DeconvLayer, up_box: DeconvLayer) -> RpnPrediction:
    """Upsample ``coarse`` by 2 and add it to ``finer`` element-wise."""
    ch, cw = coarse.grid
    fh, fw = finer.grid
    if (2 * ch, 2 * cw) != (fh, fw):
        raise ValueError(f"fuse: coarse grid {ch}x{cw} is not half of finer grid {fh}x{fw}")
    if coarse.objectness.shape[1] != finer.objectness.shape[1] or coarse.box_deltas.shape[1] != finer.box_deltas.shape[1]:
        raise ValueError("fuse: channel counts differ between levels")
    return RpnPrediction(
        objectness=add(up_cls(coarse.objectness), finer.objectness),
        box_deltas=add(up_box(coarse.box_deltas), finer.box_deltas),
        stride=finer.stride,
    )


def generate_anchors(grid: tuple[int, int], stride: float, cfg: AnchorConfig) -> np.ndarray:
    """Anchors ordered row-major over cells, then scale, then ratio.

    Ratio is height / width; every ratio keeps the area (base*scale)^2.
    """
    h, w = grid
    if h <= 0 or w <= 0:
        raise ValueError(f"anchor grid must be positive, got {grid}")
    if not cfg.scales or not cfg.ratios:
        raise ValueError("anchor config needs at least one scale and one ratio")
    sizes = []
    for s in cfg.scales:
        for r in cfg.ratios:
            side = cfg.base_size * s
            sizes.append((side / np.sqrt(r), side * np.sqrt(r)))
    sizes = np.asarray(sizes)  # (A, 2) as (w, h)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cx = ((xs.reshape(-1) + 0.5) * stride)[:, None]
    cy = ((ys.reshape(-1) + 0.5) * stride)[:, None]
    half_w, half_h = sizes[None, :, 0] / 2, sizes[None, :, 1] / 2
    out = np.stack([cx - half_w, cy - half_h, cx + half_w, cy + half_h], axis=-1)
    return out.reshape(-1, 4)


def gather_anchor_rows(pred: Tensor, per_anchor: int, index: np.ndarray) -> Tensor:
    """Pick rows of a (1, A*per_anchor, H, W) map in anchor order -> (len(index), per_anchor, 1, 1)."""
    n, ch, h, w = pred.shape
    if n != 1:
        raise ValueError("gather_anchor_rows works on a single image")
    a = ch // per_anchor
    flat = pred.data.reshape(a, per_anchor, h, w).transpose(2, 3, 0, 1).reshape(-1, per_anchor)
    index = np.asarray(index, dtype=np.int64)
    out = flat[index].reshape(len(index), per_anchor, 1, 1)

    def bwd(g):
        gflat = np.zeros((h * w * a, per_anchor))
        np.add.at(gflat, index, g.reshape(len(index), per_anchor))
        return (gflat.reshape(h, w, a, per_anchor).transpose(2, 3, 0, 1).reshape(1, ch, h, w),)

    return make_op(out, (pred,), bwd, "gather_anchor_rows")


def anchor_view(arr: np.ndarray, per_anchor: int) -> np.ndarray:
    """(1, A*per_anchor, H, W) array -> (H*W*A, per_anchor) in anchor order."""
    _, ch, h, w = arr.shape
    a = ch // per_anchor
    return arr.reshape(a, per_anchor, h, w).transpose(2, 3, 0, 1).reshape(-1, per_anchor)


def objectness_scores(pred: RpnPrediction) -> np.ndarray:
    return softmax(anchor_view(pred.objectness.data, 2), axis=1)[:, 1]


def decode_proposals(pred: RpnPrediction, anchors: np.ndarray, image_size: tuple[int, int],
                     pre_nms_n: int = 2000, post_nms_n: int = 300, nms_iou: float = 0.7,
                     min_size: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Scored proposals (boxes (M,4), scores (M,)) from a fused prediction.

    ``image_size`` is the original (height, width); boxes are clipped to it.
    """
    scores = objectness_scores(pred)
    deltas = anchor_view(pred.box_deltas.data, 4)
    if len(anchors) != len(scores):
        raise ValueError(f"{len(anchors)} anchors for a prediction with {len(scores)} slots")
    h, w = image_size
    boxes = bx.clip(bx.decode(anchors, deltas), w, h)
    keep = ((boxes[:, 2] - boxes[:, 0]) >= min_size) & ((boxes[:, 3] - boxes[:, 1]) >= min_size)
    boxes, scores = boxes[keep], scores[keep]
    order = np.argsort(-scores, kind="stable")[:pre_nms_n]
    boxes, scores = boxes[order], scores[order]
    kept = bx.nms(boxes, scores, nms_iou, max_keep=post_nms_n)
    return boxes[kept], scores[kept]


def assign_rpn_targets(anchors: np.ndarray, gt_boxes, rng: np.random.Generator | None,
                       pos_iou: float = 0.7, neg_iou: float = 0.3,
                       batch_size: int = 256, pos_fraction: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Label anchors 1 (object), 0 (background) or -1 (ignored) and compute deltas.

    With ``rng`` set, labels are subsampled to ``batch_size`` anchors with at
    most ``pos_fraction`` positives; without it every decided anchor is kept.
    """
    gt = bx.as_boxes(gt_boxes)
    n = len(anchors)
    labels = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 4))
    if len(gt) == 0:
        labels[:] = 0
    else:
        iou = bx.iou_matrix(anchors, gt)
        best_gt = iou.argmax(axis=1)
        best_iou = iou[np.arange(n), best_gt]
        labels[best_iou < neg_iou] = 0
        gt_best = iou.max(axis=0)
        # every anchor tied for a gt's best overlap becomes positive
        fallback = np.nonzero((iou == gt_best[None, :]) & (gt_best[None, :] > 0))[0]
        labels[fallback] = 1
        labels[best_iou >= pos_iou] = 1
        pos = labels == 1
        targets[pos] = bx.encode(anchors[pos], gt[best_gt[pos]])
    if rng is not None:
        labels = subsample_labels(labels, rng, batch_size, pos_fraction)
    return labels, targets


def subsample_labels(labels: np.ndarray, rng: np.random.Generator, batch_size: int,
                     pos_fraction: float) -> np.ndarray:
    labels = labels.copy()
    pos = np.nonzero(labels == 1)[0]
    max_pos = int(batch_size * pos_fraction)
    if len(pos) > max_pos:
        labels[rng.choice(pos, len(pos) - max_pos, replace=False)] = -1
    n_pos = min(len(pos), max_pos)
    neg = np.nonzero(labels == 0)[0]
    max_neg = batch_size - n_pos
    if len(neg) > max_neg:
        labels[rng.choice(neg, len(neg) - max_neg, replace=False)] = -1
    return labels


class RPN:
    """Per-level heads plus coarse-to-fine fusion.

    ``levels`` is ("p3", "p4", "p5") for the fused model or ("p5",) for the
    single-scale baseline.
    """

    def __init__(self, params: ModelParams, in_channels: dict[str, int], anchor_cfg: AnchorConfig,
                 rng: np.random.Generator, mid_channels: int = 32,
                 levels: tuple[str, ...] = ("p3", "p4", "p5")):
        self.anchor_cfg = anchor_cfg
        self.levels = tuple(sorted(levels))
        a = anchor_cfg.num_anchors
        self.heads = {
            lvl: PredictionHead(params, f"rpn.head_{lvl}", in_channels[lvl], mid_channels, 2 * a, 4 * a, rng)
            for lvl in self.levels
        }
        # upsamplers indexed by the coarse level they consume
        self.up = {}
        for coarse in self.levels[1:][::-1]:
            self.up[coarse] = (DeconvLayer(params, f"rpn.up_{coarse}.cls", 2 * a, 2),
                               DeconvLayer(params, f"rpn.up_{coarse}.box", 4 * a, 2))
        self._anchor_cache: dict = {}

    @property
    def stride(self) -> int:
        return LEVEL_STRIDES[self.levels[0]]

    def level_predictions(self, pyr: FeaturePyramid) -> dict[str, RpnPrediction]:
        out = {}
        for lvl in self.levels:
            cls, box = self.heads[lvl](pyr.normalized(lvl))
            out[lvl] = RpnPrediction(cls, box, LEVEL_STRIDES[lvl])
        return out

    def __call__(self, pyr: FeaturePyramid) -> RpnPrediction:
        preds = self.level_predictions(pyr)
        order = self.levels[::-1]  # coarsest first
        fused = preds[order[0]]
        for finer in order[1:]:
            up_cls, up_box = self.up[fused_level(fused)]
            fused = fuse_predictions(fused, preds[finer], up_cls, up_box)
        return fused

    def anchors(self, grid: tuple[int, int]) -> np.ndarray:
        key = tuple(grid)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = generate_anchors(grid, self.stride, self.anchor_cfg)
        return self._anchor_cache[key]


def fused_level(pred: RpnPrediction) -> str:
    return {v: k for k, v in LEVEL_STRIDES.items()}[pred.stride]


def write_proposals_csv(path, rows) -> None:
    """rows: iterable of (image_id, boxes (M,4), scores (M,))."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["image_id", "x_min", "y_min", "x_max", "y_max", "score"])
        for image_id, b, s in rows:
            for box, score in zip(bx.as_boxes(b), np.asarray(s).reshape(-1)):
                wr.writerow([image_id, *(f"{v:.6f}" for v in box), f"{score:.6f}"])
