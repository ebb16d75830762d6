"""Fused vs single-scale comparison on the synthetic benchmark."""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .data import DatasetIndex, DetectionRecord, SynthConfig, generate_synthetic
from .model import FUSED, SINGLE, Detector, InferenceConfig, ModelConfig, TrainConfig, detect_many, train

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    train_images: int = 800
    test_images: int = 200
    num_classes: int = 4
    seed: int = 7
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        iterations=5000, base_lr=0.01, lr_step=2000, lr_factor=0.5, warmup=200))
    model: ModelConfig = field(default_factory=ModelConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)


@dataclass
class VariantResult:
    name: str
    overall_ap: float
    small_ap: float
    overall_ar: float
    small_ar: float
    losses: list
    seconds: float
    digest: str


def detect_dataset(model: Detector, dataset, index: DatasetIndex, icfg: InferenceConfig) -> list[DetectionRecord]:
    images = [dataset[i][0] for i in range(len(index.entries))]
    out = []
    for entry, dets in zip(index.entries, detect_many(model, images, icfg)):
        out.extend(DetectionRecord(entry.image_id, d.class_id, d.score, d.box) for d in dets)
    return out


def params_digest(model: Detector) -> str:
    h = hashlib.sha256()
    for name, p in model.params.items():
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


def make_datasets(cfg: ExperimentConfig, root) -> tuple[DatasetIndex, DatasetIndex]:
    root = Path(root)
    tr = generate_synthetic(SynthConfig(num_images=cfg.train_images, num_classes=cfg.num_classes,
                                        seed=cfg.seed, prefix="train"), root / "train")
    te = generate_synthetic(SynthConfig(num_images=cfg.test_images, num_classes=cfg.num_classes,
                                        seed=cfg.seed + 1, prefix="test"), root / "test")
    return tr, te


def run_variant(name: str, levels, cfg: ExperimentConfig, train_set, test_set, test_index) -> VariantResult:
    mcfg = replace(cfg.model, levels=levels, num_classes=cfg.num_classes, seed=cfg.seed)
    model = Detector(mcfg)
    t0 = time.time()
    losses = train(model, train_set, cfg.train, log_every=250)
    dets = detect_dataset(model, test_set, test_index, cfg.inference)
    gts = test_index.all_gts()
    n = len(test_index)
    classes = list(range(1, cfg.num_classes + 1))
    overall = ev.evaluate(dets, gts, n, ev.ALL, classes)
    small = ev.evaluate(dets, gts, n, ev.SMALL, classes)
    res = VariantResult(name, overall.ap, small.ap, overall.ar, small.ar, losses,
                        time.time() - t0, params_digest(model))
    log.info("%s: AP %.4f (small %.4f)  AR %.4f (small %.4f)  %.0fs", name, res.overall_ap,
             res.small_ap, res.overall_ar, res.small_ar, res.seconds)
    return res


def run_ablation(cfg: ExperimentConfig, root) -> dict[str, VariantResult]:
    tr, te = make_datasets(cfg, root)
    train_set, test_set = tr.load(), te.load()
    return {
        "fused": run_variant("fused", FUSED, cfg, train_set, test_set, te),
        "single": run_variant("single", SINGLE, cfg, train_set, test_set, te),
    }


def ablation_table(results: dict[str, VariantResult]) -> str:
    f, s = results["fused"], results["single"]
    rows = [
        f"{'metric':<12}{'fused':>10}{'single':>10}{'delta':>10}",
        f"{'AP all':<12}{f.overall_ap:>10.4f}{s.overall_ap:>10.4f}{f.overall_ap - s.overall_ap:>10.4f}",
        f"{'AP h<16':<12}{f.small_ap:>10.4f}{s.small_ap:>10.4f}{f.small_ap - s.small_ap:>10.4f}",
        f"{'AR all':<12}{f.overall_ar:>10.4f}{s.overall_ar:>10.4f}{f.overall_ar - s.overall_ar:>10.4f}",
        f"{'AR h<16':<12}{f.small_ar:>10.4f}{s.small_ar:>10.4f}{f.small_ar - s.small_ar:>10.4f}",
    ]
    return "\n".join(rows)


def loss_digest(losses) -> str:
    arr = np.array([[r["total"], r["rpn_cls"], r["rpn_reg"], r["det_cls"], r["det_reg"]] for r in losses])
    return hashlib.sha256(arr.tobytes()).hexdigest()
