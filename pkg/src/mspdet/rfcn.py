"""Position-sensitive region classification across pyramid levels.

Every level predicts k*k*(C+1) classification maps and 4*k*k regression maps.
An RoI is split into a k x k grid; bin (i, j) (row i, column j) averages only
its own score map over the pixels the bin covers on each level, and the
per-level averages are summed.

Channel layout is bin-major: channel = (i*k + j) * D + d, D = C+1 or 4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import boxes as bx
from .backbone import LEVEL_STRIDES, FeaturePyramid
from .layers import PredictionHead, softmax
from .tensor import ModelParams, Tensor, make_op

# regression targets are divided by these before the loss
BBOX_STDS = (0.1, 0.1, 0.2, 0.2)


@dataclass(frozen=True)
class HeadConfig:
    k: int = 3
    num_classes: int = 4

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.num_classes < 1:
            raise ValueError("need at least one foreground class")

    @property
    def cls_channels(self) -> int:
        return self.k * self.k * (self.num_classes + 1)

    @property
    def reg_channels(self) -> int:
        return 4 * self.k * self.k


@dataclass
class PositionSensitiveMaps:
    cls: dict[str, Tensor]
    reg: dict[str, Tensor]

    def cls_levels(self) -> list[tuple[Tensor, int]]:
        return [(self.cls[lvl], LEVEL_STRIDES[lvl]) for lvl in sorted(self.cls)]

    def reg_levels(self) -> list[tuple[Tensor, int]]:
        return [(self.reg[lvl], LEVEL_STRIDES[lvl]) for lvl in sorted(self.reg)]


def bin_edges(rois: np.ndarray, stride: float, k: int, height: int, width: int):
    """Integer bin boundaries on one level.

    Returns (hs, he, ws, we), each (R, k): rows [hs, he) and columns [ws, we),
    clipped to the map. Starts are floored and ends ceiled.
    """
    r = bx.as_boxes(rois) / float(stride)
    x0, y0, x1, y1 = r[:, 0:1], r[:, 1:2], r[:, 2:3], r[:, 3:4]
    bw = (x1 - x0) / k
    bh = (y1 - y0) / k
    steps = np.arange(k)[None, :]
    hs = np.floor(y0 + steps * bh)
    he = np.ceil(y0 + (steps + 1) * bh)
    ws = np.floor(x0 + steps * bw)
    we = np.ceil(x0 + (steps + 1) * bw)
    hs = np.clip(hs, 0, height).astype(np.int64)
    he = np.clip(he, 0, height).astype(np.int64)
    ws = np.clip(ws, 0, width).astype(np.int64)
    we = np.clip(we, 0, width).astype(np.int64)
    return hs, he, ws, we


def psroi_pool(levels: list[tuple[Tensor, int]], rois, k: int, out_dim: int,
               batch_index=None) -> Tensor:
    """Cross-level position-sensitive RoI pooling.

    ``levels`` is a list of (maps (N, k*k*out_dim, H, W), stride). Returns a
    (R, out_dim, k, k) tensor; entry [r, d, i, j] sums, over levels, the mean of
    channel (i*k + j)*out_dim + d inside bin (i, j). Empty bins contribute 0.
    """
    rois = bx.as_boxes(rois)
    nr = len(rois)
    bidx = np.zeros(nr, dtype=np.int64) if batch_index is None else np.asarray(batch_index, dtype=np.int64)
    chan = ((np.arange(k)[:, None] * k + np.arange(k)[None, :])[:, :, None] * out_dim
            + np.arange(out_dim)[None, None, :])  # (k, k, D)
    out = np.zeros((nr, k, k, out_dim))
    saved = []
    for maps, stride in levels:
        n, ch, h, w = maps.shape
        if ch != k * k * out_dim:
            raise ValueError(f"psroi_pool: map has {ch} channels, expected {k * k * out_dim}")
        hs, he, ws, we = bin_edges(rois, stride, k, h, w)
        # broadcast to (R, k_i, k_j, D)
        HS = hs[:, :, None, None]
        HE = he[:, :, None, None]
        WS = ws[:, None, :, None]
        WE = we[:, None, :, None]
        count = np.maximum(HE - HS, 0) * np.maximum(WE - WS, 0)
        sat = np.zeros((n, ch, h + 1, w + 1))
        np.cumsum(np.cumsum(maps.data, axis=2), axis=3, out=sat[:, :, 1:, 1:])
        B = bidx[:, None, None, None]
        C = chan[None]
        total = sat[B, C, HE, WE] - sat[B, C, HS, WE] - sat[B, C, HE, WS] + sat[B, C, HS, WS]
        live = count > 0
        out += np.where(live, total / np.where(live, count, 1), 0.0)
        saved.append((maps, HS, HE, WS, WE, count, live))

    def bwd(g):
        g = g.transpose(0, 2, 3, 1)  # (R, k, k, D)
        grads = []
        for maps, HS, HE, WS, WE, count, live in saved:
            if not maps._tracked:
                grads.append(None)
                continue
            n, ch, h, w = maps.shape
            v = np.where(live, g / np.where(live, count, 1), 0.0)
            diff = np.zeros((n, ch, h + 1, w + 1))
            B = np.broadcast_to(bidx[:, None, None, None], v.shape)
            C = np.broadcast_to(chan[None], v.shape)
            for rows, cols, sign in ((HS, WS, 1.0), (HS, WE, -1.0), (HE, WS, -1.0), (HE, WE, 1.0)):
                np.add.at(diff, (B, C, np.broadcast_to(rows, v.shape), np.broadcast_to(cols, v.shape)), sign * v)
            dense = np.cumsum(np.cumsum(diff, axis=2), axis=3)
            grads.append(dense[:, :, :h, :w])
        return grads

    return make_op(out.transpose(0, 3, 1, 2).copy(), [m for m, _ in levels], bwd, "psroi_pool")


def vote(pooled: Tensor) -> Tensor:
    """Average over the k*k bins: (R, D, k, k) -> (R, D, 1, 1)."""
    r, d, k1, k2 = pooled.shape
    nb = k1 * k2
    out = pooled.data.mean(axis=(2, 3), keepdims=True)

    def bwd(g):
        return (np.broadcast_to(g / nb, pooled.shape).copy(),)

    return make_op(out, (pooled,), bwd, "vote")


def vote_and_classify(pooled_cls, pooled_reg=None):
    """Class probabilities (R, C+1) and, optionally, mean regression (R, 4).

    Accepts tensors or arrays of shape (R, D, k, k).
    """
    pc = pooled_cls.data if isinstance(pooled_cls, Tensor) else np.asarray(pooled_cls, dtype=np.float64)
    scores = pc.mean(axis=(2, 3))
    probs = softmax(scores, axis=1)
    if pooled_reg is None:
        return probs
    pr = pooled_reg.data if isinstance(pooled_reg, Tensor) else np.asarray(pooled_reg, dtype=np.float64)
    return probs, pr.mean(axis=(2, 3))


class RFCNHead:
    """Per-level 3x3 conv + sibling 1x1 convs producing position-sensitive maps."""

    def __init__(self, params: ModelParams, in_channels: dict[str, int], cfg: HeadConfig,
                 rng: np.random.Generator, mid_channels: int = 32,
                 levels: tuple[str, ...] = ("p3", "p4", "p5")):
        self.cfg = cfg
        self.levels = tuple(sorted(levels))
        self.heads = {
            lvl: PredictionHead(params, f"rfcn.head_{lvl}", in_channels[lvl], mid_channels,
                                cfg.cls_channels, cfg.reg_channels, rng)
            for lvl in self.levels
        }

    def __call__(self, pyr: FeaturePyramid) -> PositionSensitiveMaps:
        cls, reg = {}, {}
        for lvl in self.levels:
            cls[lvl], reg[lvl] = self.heads[lvl](pyr.normalized(lvl))
        return PositionSensitiveMaps(cls, reg)

    def pool(self, maps: PositionSensitiveMaps, rois) -> tuple[Tensor, Tensor]:
        k, c1 = self.cfg.k, self.cfg.num_classes + 1
        return (psroi_pool(maps.cls_levels(), rois, k, c1),
                psroi_pool(maps.reg_levels(), rois, k, 4))


@dataclass
class RoiMinibatch:
    rois: np.ndarray       # (R, 4)
    labels: np.ndarray     # (R,) class id, 0 = background
    targets: np.ndarray    # (R, 4) encoded deltas (zero for background)
    weights: np.ndarray    # (R,) 1 for foreground rows


def assign_roi_targets(proposals, gt_boxes, gt_classes, rng: np.random.Generator | None,
                       batch_size: int = 128, fg_fraction: float = 0.25, fg_iou: float = 0.5,
                       bg_iou_hi: float = 0.5, bg_iou_lo: float = 0.1) -> RoiMinibatch:
    """Label proposals for the classification head and subsample a minibatch."""
    props = bx.as_boxes(proposals)
    gt = bx.as_boxes(gt_boxes)
    gcls = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    if len(gt):
        iou = bx.iou_matrix(props, gt)
        best = iou.argmax(axis=1)
        best_iou = iou[np.arange(len(props)), best]
    else:
        best = np.zeros(len(props), dtype=np.int64)
        best_iou = np.zeros(len(props))
    fg = np.nonzero(best_iou >= fg_iou)[0]
    bg = np.nonzero((best_iou < bg_iou_hi) & (best_iou >= bg_iou_lo))[0]
    if len(gt) == 0:
        bg = np.arange(len(props))
    n_fg = min(int(round(batch_size * fg_fraction)), len(fg))
    if rng is not None:
        if len(fg) > n_fg:
            fg = np.sort(rng.choice(fg, n_fg, replace=False))
        n_bg = min(batch_size - n_fg, len(bg))
        if len(bg) > n_bg:
            bg = np.sort(rng.choice(bg, n_bg, replace=False))
    keep = np.concatenate([fg, bg])
    labels = np.zeros(len(keep), dtype=np.int64)
    labels[: len(fg)] = gcls[best[fg]] if len(gt) else 0
    targets = np.zeros((len(keep), 4))
    weights = np.zeros(len(keep))
    if len(fg):
        targets[: len(fg)] = bx.encode(props[fg], gt[best[fg]])
        weights[: len(fg)] = 1.0
    return RoiMinibatch(props[keep], labels, targets, weights)
