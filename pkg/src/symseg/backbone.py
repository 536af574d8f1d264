"""Scaled-down encoder-decoder segmentation backbone.

Produces a pre-activation feature map at full input resolution (no final
sigmoid); encoder features are concatenated into the decoder at matching
resolutions.  Convolutions that feed a batch-norm carry no bias, since a
per-channel shift is absorbed by the normalization and its gradient would
be identically zero in train mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grad import ShapeError, Tensor
from .grad import ops
from .layers import BatchNorm2d, Conv2d, Layer


@dataclass
class BackboneConfig:
    in_channels: int = 1
    base_channels: int = 8
    depth: int = 3
    feature_channels: int = 4
    input_size: tuple[int, int] = (32, 32)

    def validate(self) -> None:
        h, w = self.input_size
        d = self.depth
        if d < 1:
            raise ValueError("depth must be >= 1")
        if h % (1 << d) or w % (1 << d):
            raise ValueError(
                f"input size {h}x{w} not divisible by 2^depth = {1 << d}"
            )
        for name in ("in_channels", "base_channels", "feature_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


class _ConvBlock(Layer):
    """conv 3x3 (no bias) -> batch norm -> relu."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.conv = Conv2d(in_ch, out_ch, 3, rng, padding=1, bias=False)
        self.bn = BatchNorm2d(out_ch)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ops.relu(self.bn(self.conv(x), training))


class _DecoderBlock(Layer):
    """nearest upsample x2 -> 1x1 channel reduce -> concat skip -> conv block."""

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, rng: np.random.Generator):
        self.reduce = Conv2d(in_ch, out_ch, 1, rng, padding=0, bias=False)
        self.block = _ConvBlock(out_ch + skip_ch, out_ch, rng)

    def __call__(self, x: Tensor, skip: Tensor, training: bool) -> Tensor:
        up = self.reduce(ops.upsample2d(x, 2))
        return self.block(ops.concat([up, skip], axis=1), training)


class Backbone(Layer):
    """Mini UNet: per-level conv blocks, 2x pooling, skip concatenation."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        widths = [config.base_channels << i for i in range(config.depth)]
        self.encoders = []
        in_ch = config.in_channels
        for w in widths:
            self.encoders.append(_ConvBlock(in_ch, w, rng))
            in_ch = w
        self.bottleneck = _ConvBlock(in_ch, in_ch * 2, rng)
        self.decoders = [
            _DecoderBlock(w * 2, w, w, rng) for w in reversed(widths)
        ]
        self.out_conv = Conv2d(widths[0], config.feature_channels, 1, rng,
                               padding=0, bias=True)

    def __call__(self, image: Tensor, training: bool) -> Tensor:
        cfg = self.config
        n, c, h, w = image.shape
        if c != cfg.in_channels:
            raise ShapeError(f"backbone expects {cfg.in_channels} channels, got {c}")
        if h % (1 << cfg.depth) or w % (1 << cfg.depth):
            raise ShapeError(
                f"spatial extents {h}x{w} not divisible by 2^depth = {1 << cfg.depth}"
            )
        skips = []
        x = image
        for enc in self.encoders:
            x = enc(x, training)
            skips.append(x)
            x = ops.max_pool2d(x, 2)
        x = self.bottleneck(x, training)
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = dec(x, skip, training)
        return self.out_conv(x)
