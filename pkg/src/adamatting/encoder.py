"""Four-stage convolutional backbone producing the 1/2..1/16 feature pyramid.

Each stage is two conv-BN-ReLU units. Stages 1-3 halve resolution in their
first conv. Stage 4 enters with a stride-2 conv and then swaps further
striding for a dilation-2 conv, which is where a MobileNetV2-style backbone
trades its last stride for dilation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .nn import Conv2d, ConvBNReLU, Module, Sequential
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple[int, int, int, int] = (16, 24, 32, 96)
    hidden: int = 64

    def __post_init__(self):
        if len(self.channels) != 4 or min(self.channels) <= 0 or self.hidden <= 0:
            raise ConfigError(f"invalid encoder config {self}")


@dataclass
class FramePyramid:
    f_half: Tensor
    f_quarter: Tensor
    f_eighth: Tensor
    f_sixteenth: Tensor
    # f_sixteenth after the 1x1 reduction to the transformer width
    z: Tensor | None = None


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        c1, c2, c3, c4 = cfg.channels
        self.stages = [
            Sequential(ConvBNReLU(3, c1, rng, stride=2), ConvBNReLU(c1, c1, rng)),
            Sequential(ConvBNReLU(c1, c2, rng, stride=2), ConvBNReLU(c2, c2, rng)),
            Sequential(ConvBNReLU(c2, c3, rng, stride=2), ConvBNReLU(c3, c3, rng)),
            Sequential(ConvBNReLU(c3, c4, rng, stride=2), ConvBNReLU(c4, c4, rng, dilation=2)),
        ]
        self.reduce = Conv2d(c4, cfg.hidden, 1, rng)

    def extract_features(self, frame: Tensor) -> FramePyramid:
        if frame.ndim != 3 or frame.shape[0] != 3:
            raise DimensionError(f"expected a 3×H×W frame, got {frame.shape}")
        h, w = frame.shape[1:]
        if h % 16 or w % 16:
            raise DimensionError(f"frame size {h}×{w} must be a multiple of 16; pad first")
        feats = []
        x = frame
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return FramePyramid(*feats)

    def reduce_channels(self, f_sixteenth: Tensor) -> Tensor:
        if f_sixteenth.shape[0] != self.cfg.channels[3]:
            raise DimensionError(
                f"reduce_channels expects {self.cfg.channels[3]} channels, got {f_sixteenth.shape[0]}")
        return self.reduce(f_sixteenth)

    def forward(self, frame: Tensor) -> FramePyramid:
        pyr = self.extract_features(frame)
        pyr.z = self.reduce_channels(pyr.f_sixteenth)
        return pyr


def extract_features(frame: Tensor, encoder: Encoder) -> FramePyramid:
    return encoder.extract_features(frame)

