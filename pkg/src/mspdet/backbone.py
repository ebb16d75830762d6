"""Small convolutional trunk emitting C3/C4/C5 at strides 4/8/16."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import ConvLayer, L2NormScaleLayer
from .tensor import ModelParams, Tensor, relu

PYRAMID_STRIDE = 16
LEVEL_STRIDES = {"p3": 4, "p4": 8, "p5": 16}


@dataclass
class BackboneConfig:
    widths: tuple[int, ...] = (16, 32, 64, 96, 128)
    blocks: tuple[int, ...] = (1, 1, 2, 2, 2)
    # first-block stride of each stage; stage 3 keeps stride 4
    strides: tuple[int, ...] = (2, 2, 1, 2, 2)
    c5_dilation: int = 2
    in_channels: int = 3

    def __post_init__(self):
        self.widths = tuple(int(v) for v in self.widths)
        self.blocks = tuple(int(v) for v in self.blocks)
        self.strides = tuple(int(v) for v in self.strides)
        if not (len(self.widths) == len(self.blocks) == len(self.strides) == 5):
            raise ValueError("backbone needs exactly 5 stages")
        cum = np.cumprod(self.strides)
        if tuple(cum[2:]) != (4, 8, 16):
            raise ValueError(f"stage strides {self.strides} do not give C3/C4/C5 strides 4/8/16")


@dataclass
class FeaturePyramid:
    c3: Tensor
    c4: Tensor
    c5: Tensor
    n3: Tensor | None = None
    n4: Tensor | None = None
    n5: Tensor | None = None
    extras: dict = field(default_factory=dict)

    def normalized(self, level: str) -> Tensor:
        return {"p3": self.n3, "p4": self.n4, "p5": self.n5}[level]


def pad_to_stride(image: Tensor, stride: int = PYRAMID_STRIDE) -> tuple[Tensor, tuple[int, int]]:
    """Zero-pad right/bottom to a multiple of ``stride``; returns the original (h, w)."""
    n, c, h, w = image.shape
    ph = -h % stride
    pw = -w % stride
    if ph == 0 and pw == 0:
        return image, (h, w)
    data = np.pad(image.data, ((0, 0), (0, 0), (0, ph), (0, pw)))
    return Tensor(data), (h, w)


class Backbone:
    """Plain 3x3 conv + ReLU blocks; the last C5 block is dilated.

    ``levels`` selects which pyramid levels receive an L2-normalisation layer.
    """

    def __init__(self, params: ModelParams, cfg: BackboneConfig, rng: np.random.Generator,
                 levels: tuple[str, ...] = ("p3", "p4", "p5")):
        self.cfg = cfg
        self.levels = levels
        self.stages: list[list[ConvLayer]] = []
        in_c = cfg.in_channels
        for s, (width, nblocks, stride) in enumerate(zip(cfg.widths, cfg.blocks, cfg.strides), start=1):
            stage = []
            for b in range(nblocks):
                dil = cfg.c5_dilation if (s == 5 and b > 0) else 1
                stage.append(ConvLayer(params, f"backbone.conv{s}_{b + 1}", in_c, width, 3, rng,
                                       stride=stride if b == 0 else 1, dilation=dil))
                in_c = width
            self.stages.append(stage)
        self.norms = {
            lvl: L2NormScaleLayer(params, f"backbone.norm_{lvl}", cfg.widths[int(lvl[1]) - 1])
            for lvl in levels
        }

    def __call__(self, image: Tensor) -> FeaturePyramid:
        h, w = image.shape[2:]
        if h % PYRAMID_STRIDE or w % PYRAMID_STRIDE:
            raise RuntimeError(f"backbone input {h}x{w} is not a multiple of {PYRAMID_STRIDE}")
        x = image
        outs = []
        for stage in self.stages:
            for conv in stage:
                x = relu(conv(x))
            outs.append(x)
        pyr = FeaturePyramid(c3=outs[2], c4=outs[3], c5=outs[4], extras={"c1": outs[0], "c2": outs[1]})
        for lvl, norm in self.norms.items():
            setattr(pyr, "n" + lvl[1], norm(getattr(pyr, "c" + lvl[1])))
        return pyr
