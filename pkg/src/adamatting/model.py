"""Model assembly: encoder, Fg/Bg transformer and decoder under one config."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .decoder import Decoder
from .encoder import Encoder, EncoderConfig, FramePyramid
from .nn import Module
from .tensor import Tensor
from .transformer import FgBgTransformer, TransformerConfig


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    decoder_widths: tuple[int, int, int, int] = (64, 32, 32, 16)
    seed: int = 0

    def __post_init__(self):
        if self.encoder.hidden != self.transformer.hidden:
            raise ValueError("encoder and transformer widths must agree")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        enc = d.get("encoder", {})
        enc = EncoderConfig(**{**enc, "channels": tuple(enc.get("channels", EncoderConfig().channels))})
        return cls(encoder=enc, transformer=TransformerConfig(**d.get("transformer", {})),
                   decoder_widths=tuple(d.get("decoder_widths", (64, 32, 32, 16))),
                   seed=int(d.get("seed", 0)))

    @classmethod
    def small(cls, hidden: int = 16, heads: int = 2, seed: int = 0, **tkw) -> "ModelConfig":
        """A tiny variant for unit tests and gradient checks."""
        return cls(encoder=EncoderConfig((4, 6, 8, 12), hidden),
                   transformer=TransformerConfig(hidden=hidden, heads=heads, **tkw),
                   decoder_widths=(8, 8, 8, 4), seed=seed)


class MattingModel(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder, rng)
        self.transformer = FgBgTransformer(cfg.transformer, rng)
        self.decoder = Decoder(cfg.encoder, cfg.decoder_widths, rng)

    def encode(self, frame: Tensor) -> FramePyramid:
        return self.encoder(frame)
