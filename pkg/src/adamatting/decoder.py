"""FPN-style decoder with two-stage alpha refinement.

Four upscaling blocks walk 1/16 -> 1/8 -> 1/4 -> 1/2 -> 1/1. After the second
block a coarse head emits the 2-channel Fg/Bg logits and a coarse alpha at
1/4 scale; the coarse alpha is concatenated into the third block's input.
The fine head refines the full-resolution feature into the final alpha.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, FramePyramid
from .errors import DimensionError
from .nn import Conv2d, ConvBNReLU, Module
from .tensor import Tensor


@dataclass
class DecoderOutputs:
    mask_p: Tensor        # 2×H/4×W/4 logits; channel 1 is foreground
    alpha_coarse: Tensor  # 1×H/4×W/4
    alpha_fine: Tensor    # 1×H×W


class UpscaleBlock(Module):
    """concat(prev, skip) -> conv-BN-ReLU -> conv -> bilinear ×2."""

    def __init__(self, c_prev: int, c_skip: int, c_out: int, rng: np.random.Generator):
        self.c_prev, self.c_skip = c_prev, c_skip
        self.fuse = ConvBNReLU(c_prev + c_skip, c_out, rng)
        self.conv = Conv2d(c_out, c_out, 3, rng)

    def forward(self, prev: Tensor, skip: Tensor | None) -> Tensor:
        if skip is not None:
            if prev.shape[1:] != skip.shape[1:]:
                raise DimensionError(f"upscale block: prev {prev.shape} and skip {skip.shape} differ spatially")
            x = T.concat([prev, skip], axis=0)
        else:
            x = prev
        if x.shape[0] != self.c_prev + self.c_skip:
            raise DimensionError(f"upscale block expects {self.c_prev + self.c_skip} channels, got {x.shape[0]}")
        y = self.conv(self.fuse(x))
        h, w = y.shape[1:]
        return T.bilinear_resize(y, 2 * h, 2 * w)


def upscale_block(prev: Tensor, skip: Tensor | None, block: UpscaleBlock) -> Tensor:
    return block(prev, skip)


class CoarseHead(Module):
    """Two parallel 3×3 convs: Fg/Bg logits and a sigmoid coarse alpha."""

    def __init__(self, c_in: int, rng: np.random.Generator):
        self.mask = Conv2d(c_in, 2, 3, rng)
        self.alpha = Conv2d(c_in, 1, 3, rng)

    def forward(self, feat: Tensor) -> tuple[Tensor, Tensor]:
        return self.mask(feat), T.sigmoid(self.alpha(feat))


def output_block_coarse(feat_quarter: Tensor, head: CoarseHead) -> tuple[Tensor, Tensor]:
    return head(feat_quarter)


class FineHead(Module):
    def __init__(self, c_in: int, rng: np.random.Generator):
        self.refine = ConvBNReLU(c_in, c_in, rng)
        self.alpha = Conv2d(c_in, 1, 3, rng)

    def forward(self, feat: Tensor) -> Tensor:
        return T.sigmoid(self.alpha(self.refine(feat)))


class Decoder(Module):
    def __init__(self, enc: EncoderConfig, widths: tuple[int, int, int, int], rng: np.random.Generator):
        c1, c2, c3, _ = enc.channels
        w1, w2, w3, w4 = widths
        self.widths = widths
        self.up1 = UpscaleBlock(enc.hidden, enc.hidden, w1, rng)  # 1/16 -> 1/8
        self.up2 = UpscaleBlock(w1, c3, w2, rng)                  # 1/8  -> 1/4
        self.coarse = CoarseHead(w2, rng)
        self.up3 = UpscaleBlock(w2 + 1, c2, w3, rng)              # 1/4  -> 1/2
        self.up4 = UpscaleBlock(w3, c1, w4, rng)                  # 1/2  -> 1/1
        self.fine = FineHead(w4, rng)

    def decode(self, z_prime: Tensor, pyramid: FramePyramid) -> DecoderOutputs:
        skip16 = pyramid.z if pyramid.z is not None else pyramid.f_sixteenth
        if z_prime.shape[1:] != skip16.shape[1:]:
            raise DimensionError(f"transformer output {z_prime.shape} does not match pyramid {skip16.shape}")
        x = self.up1(z_prime, skip16)
        x = self.up2(x, pyramid.f_eighth)
        mask_p, alpha_coarse = self.coarse(x)
        x = self.up3(T.concat([x, alpha_coarse], axis=0), pyramid.f_quarter)
        x = self.up4(x, pyramid.f_half)
        return DecoderOutputs(mask_p, alpha_coarse, self.fine(x))

    forward = decode


def mask_to_guidance(mask_p: Tensor, factor: int = 4) -> Tensor:
    """Foreground probability from the logits, box-averaged onto the 1/16 grid."""
    prob = T.softmax(mask_p, axis=0)[1:2]
    h, w = prob.shape[1:]
    return T.area_downsample(prob, h // factor, w // factor)
