"""Two-stage detector assembly, joint training and inference."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import boxes as bx
from .data import worker_count
from .backbone import Backbone, BackboneConfig, pad_to_stride
from .rfcn import BBOX_STDS, HeadConfig, RFCNHead, assign_roi_targets, vote, vote_and_classify
from .rpn import RPN, AnchorConfig, assign_rpn_targets, decode_proposals, gather_anchor_rows
from .layers import softmax_xent, smooth_l1
from .tensor import SGD, ModelParams, NonFiniteError, Tape, Tensor, add_scalars

log = logging.getLogger(__name__)

FUSED = ("p3", "p4", "p5")
SINGLE = ("p5",)


@dataclass
class ModelConfig:
    num_classes: int = 4
    k: int = 3
    levels: tuple[str, ...] = FUSED
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    rpn_mid: int = 32
    rfcn_mid: int = 32
    image_mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    seed: int = 0

    def __post_init__(self):
        self.levels = tuple(sorted(self.levels))
        if not set(self.levels) <= set(FUSED) or not self.levels:
            raise ValueError(f"levels must be a non-empty subset of {FUSED}, got {self.levels}")
        if "p5" not in self.levels:
            raise ValueError("the coarsest level p5 is always required")


@dataclass
class Detection:
    box: bx.Box
    class_id: int
    score: float


@dataclass
class TrainConfig:
    iterations: int = 5000
    base_lr: float = 1e-3
    lr_step: int = 2000
    lr_factor: float = 0.5
    warmup: int = 0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    rpn_cls_weight: float = 1.0
    rpn_reg_weight: float = 1.0
    det_cls_weight: float = 1.0
    det_reg_weight: float = 1.0
    rpn_batch: int = 256
    roi_batch: int = 128
    roi_fg_fraction: float = 0.25
    roi_bg_lo: float = 0.1
    train_pre_nms: int = 2000
    train_post_nms: int = 300
    train_nms_iou: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.lr_step < 1:
            raise ValueError("iterations and lr_step must be positive")
        if self.base_lr < 0 or self.lr_factor <= 0 or self.warmup < 0 or self.weight_decay < 0:
            raise ValueError("learning-rate settings and weight decay must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        weights = (self.rpn_cls_weight, self.rpn_reg_weight, self.det_cls_weight, self.det_reg_weight)
        if min(weights) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.rpn_batch < 1 or self.roi_batch < 1 or not 0.0 < self.roi_fg_fraction <= 1.0:
            raise ValueError("sampling sizes must be positive and roi_fg_fraction in (0, 1]")

    def lr_at(self, it: int) -> float:
        lr = self.base_lr * self.lr_factor ** (it // self.lr_step)
        if self.warmup and it < self.warmup:
            lr *= (it + 1) / self.warmup
        return lr


@dataclass
class InferenceConfig:
    score_thresh: float = 0.05
    nms_iou: float = 0.3
    pre_nms: int = 2000
    post_nms: int = 300
    rpn_nms_iou: float = 0.5
    max_detections: int = 100


class Detector:
    """Backbone + multi-scale RPN + cross-level position-sensitive head.

    ``cfg.levels == ("p5",)`` gives the single-scale baseline: one RPN head at
    stride 16 and single-level pooling.
    """

    def __init__(self, cfg: ModelConfig | None = None):
        self.cfg = cfg or ModelConfig()
        rng = np.random.default_rng(self.cfg.seed)
        self.params = ModelParams()
        self.backbone = Backbone(self.params, self.cfg.backbone, rng, levels=self.cfg.levels)
        widths = self.cfg.backbone.widths
        in_ch = {"p3": widths[2], "p4": widths[3], "p5": widths[4]}
        self.rpn = RPN(self.params, in_ch, self.cfg.anchors, rng, self.cfg.rpn_mid, self.cfg.levels)
        self.head_cfg = HeadConfig(self.cfg.k, self.cfg.num_classes)
        self.rfcn = RFCNHead(self.params, in_ch, self.head_cfg, rng, self.cfg.rfcn_mid, self.cfg.levels)

    @property
    def single_scale(self) -> bool:
        return self.cfg.levels == SINGLE

    def preprocess(self, image) -> tuple[Tensor, tuple[int, int]]:
        arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        mean = np.asarray(self.cfg.image_mean, dtype=np.float64).reshape(1, -1, 1, 1)
        return pad_to_stride(Tensor(arr - mean))

    def forward(self, x: Tensor):
        pyr = self.backbone(x)
        return pyr, self.rpn(pyr), self.rfcn(pyr)

    # -- training ----------------------------------------------------------

    def loss(self, image, gt_boxes, gt_classes, tcfg: TrainConfig, rng: np.random.Generator):
        """Record the joint loss on the active tape; returns (total, parts)."""
        x, size = self.preprocess(image)
        gt = bx.as_boxes(gt_boxes)
        gcls = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
        pyr, rpn_pred, maps = self.forward(x)

        anchors = self.rpn.anchors(rpn_pred.grid)
        labels, targets = assign_rpn_targets(anchors, gt, rng, batch_size=tcfg.rpn_batch)
        sampled = np.nonzero(labels >= 0)[0]
        pos = np.nonzero(labels == 1)[0]
        rpn_cls = softmax_xent(gather_anchor_rows(rpn_pred.objectness, 2, sampled), labels[sampled])
        rpn_reg = smooth_l1(gather_anchor_rows(rpn_pred.box_deltas, 4, pos), targets[pos],
                            normalizer=max(len(sampled), 1))

        props, _ = decode_proposals(rpn_pred, anchors, size, tcfg.train_pre_nms,
                                    tcfg.train_post_nms, tcfg.train_nms_iou)
        if len(gt):
            props = np.concatenate([props, gt], axis=0)
        mb = assign_roi_targets(props, gt, gcls, rng, batch_size=tcfg.roi_batch,
                                fg_fraction=tcfg.roi_fg_fraction, bg_iou_lo=tcfg.roi_bg_lo)
        if len(mb.rois) == 0:
            mb = assign_roi_targets(props, gt, gcls, rng, batch_size=tcfg.roi_batch,
                                    fg_fraction=tcfg.roi_fg_fraction, bg_iou_lo=0.0)
        pooled_cls, pooled_reg = self.rfcn.pool(maps, mb.rois)
        det_cls = softmax_xent(vote(pooled_cls), mb.labels)
        det_reg = smooth_l1(vote(pooled_reg), mb.targets / np.asarray(BBOX_STDS), mb.weights,
                            normalizer=max(len(mb.rois), 1))
        parts = {"rpn_cls": rpn_cls, "rpn_reg": rpn_reg, "det_cls": det_cls, "det_reg": det_reg}
        total = add_scalars(rpn_cls, rpn_reg, det_cls, det_reg,
                            weights=(tcfg.rpn_cls_weight, tcfg.rpn_reg_weight,
                                     tcfg.det_cls_weight, tcfg.det_reg_weight))
        return total, parts

    # -- inference ---------------------------------------------------------

    def detect(self, image, icfg: InferenceConfig | None = None) -> list[Detection]:
        icfg = icfg or InferenceConfig()
        x, size = self.preprocess(image)
        _, rpn_pred, maps = self.forward(x)
        return self.detect_from_outputs(rpn_pred, maps, size, icfg)

    def detect_from_outputs(self, rpn_pred, maps, size: tuple[int, int],
                            icfg: InferenceConfig) -> list[Detection]:
        """Proposals, position-sensitive scoring and post-processing for one image of ``size`` (h, w)."""
        h, w = size
        anchors = self.rpn.anchors(rpn_pred.grid)
        props, _ = decode_proposals(rpn_pred, anchors, (h, w), icfg.pre_nms, icfg.post_nms, icfg.rpn_nms_iou)
        if len(props) == 0:
            return []
        pooled_cls, pooled_reg = self.rfcn.pool(maps, props)
        probs, reg = vote_and_classify(pooled_cls, pooled_reg)
        boxes = bx.clip(bx.decode(props, reg * np.asarray(BBOX_STDS)), w, h)
        return postprocess(boxes, probs, icfg)


def postprocess(boxes: np.ndarray, probs: np.ndarray, icfg: InferenceConfig) -> list[Detection]:
    """Per-class thresholding and NMS over class-agnostic boxes."""
    valid = ((boxes[:, 2] - boxes[:, 0]) > 0) & ((boxes[:, 3] - boxes[:, 1]) > 0)
    dets = []
    for c in range(1, probs.shape[1]):
        sel = np.nonzero(valid & (probs[:, c] >= icfg.score_thresh) & (probs[:, c] > 0))[0]
        if not len(sel):
            continue
        keep = sel[bx.nms(boxes[sel], probs[sel, c], icfg.nms_iou)]
        dets.extend(Detection(bx.Box(*map(float, boxes[i])), c, float(probs[i, c])) for i in keep)
    dets.sort(key=lambda d: -d.score)
    return dets[: icfg.max_detections]


def detect_many(model: Detector, images, icfg: InferenceConfig, workers: int | None = None) -> list:
    """Run inference over images on up to ``workers`` threads (default MSP_THREADS).

    Forward passes are pure, so the result equals the sequential one and keeps
    input order.
    """
    images = list(images)
    workers = min(workers or worker_count(), max(len(images), 1))
    if workers <= 1:
        return [model.detect(img, icfg) for img in images]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda img: model.detect(img, icfg), images))


def train(model: Detector, dataset, tcfg: TrainConfig, log_every: int = 0):
    """Joint single-loop SGD over ``dataset`` (sequence of (image, boxes, classes)).

    Returns the per-iteration loss log: a list of dicts with the iteration,
    learning rate, total and component losses.
    """
    if len(dataset) == 0:
        raise ValueError("training needs a non-empty dataset")
    rng = np.random.default_rng(tcfg.seed)
    opt = SGD(model.params, momentum=tcfg.momentum, weight_decay=tcfg.weight_decay)
    order = np.array([], dtype=np.int64)
    history = []
    for it in range(tcfg.iterations):
        if len(order) == 0:
            order = rng.permutation(len(dataset))
        idx, order = int(order[0]), order[1:]
        image, gt_boxes, gt_classes = dataset[idx]
        try:
            with Tape() as tape:
                total, parts = model.loss(image, gt_boxes, gt_classes, tcfg, rng)
        except NonFiniteError as exc:
            raise FloatingPointError(f"non-finite values at iteration {it + 1}: {exc}") from exc
        value = total.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"loss became {value} at iteration {it + 1}")
        tape.backward(total)
        for name, p in model.params.items():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        lr = tcfg.lr_at(it)
        opt.step(lr)
        row = {"iter": it + 1, "lr": lr, "total": value}
        row.update({k: v.item() for k, v in parts.items()})
        history.append(row)
        if log_every and (it + 1) % log_every == 0:
            recent = history[-log_every:]
            log.info("iter %d  loss %.4f  (%s)", it + 1, np.mean([r["total"] for r in recent]),
                     "  ".join(f"{k} {np.mean([r[k] for r in recent]):.3f}" for k in parts))
    return history


def config_dict(model: Detector) -> dict:
    return asdict(model.cfg)
