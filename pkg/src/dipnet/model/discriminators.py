"""Noise-level classifier on fused features and the perceptual patch
discriminator on images."""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import ShapeError, Tensor
from .config import ModelConfig
from .extractor import FeatureExtractor
from .nn import BatchNorm2d, Conv2d, Linear, Module


class FeatureDiscriminator(Module):
    """Predicts the noise-level class of a batch of fused feature maps.

    The input first passes through a gradient reversal layer, so minimizing
    this classifier's loss pushes the upstream network the other way.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.conv = Conv2d(config.base_channels, config.feat_disc_channels, 3, rng, stride=2, padding=1)
        self.fc1 = Linear(config.feat_disc_channels, config.feat_disc_fc_width, rng)
        self.fc2 = Linear(config.feat_disc_fc_width, config.num_noise_classes, rng)

    def forward(self, features: Tensor, lambda_grl: float = 1.0, reverse: bool = True) -> Tensor:
        h = ad.grad_reverse(features, lambda_grl) if reverse else features
        h = ad.relu(self.conv(h))
        h = ad.reshape(ad.global_avg_pool(h), (h.shape[0], h.shape[1]))
        return self.fc2(ad.relu(self.fc1(h)))


class DiscBlock(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, rng, stride=2, padding=1, bias=False)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return ad.leaky_relu(self.bn(self.conv(x)), 0.2)


class PixelDiscriminator(Module):
    """Patch discriminator; block i sees concat(previous output, extractor map i)."""

    def __init__(self, config: ModelConfig, extractor: FeatureExtractor, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.extractor = extractor
        self.blocks = []
        prev = config.input_channels
        for feat, width in zip(extractor.channels, config.pixel_disc_channels):
            self.blocks.append(DiscBlock(prev + feat, width, rng))
            prev = width
        self.head = Conv2d(prev, 1, 1, rng)

    def forward(self, image: Tensor) -> Tensor:
        maps = self.extractor(image)
        h = image
        for i, (block, fmap) in enumerate(zip(self.blocks, maps)):
            if fmap.shape[2:] != h.shape[2:]:
                raise ShapeError(f"extractor map {i} has extent {fmap.shape[2:]}, block input {h.shape[2:]}")
            h = block(ad.concat([h, fmap], axis=1))
        return self.head(h)


def build_feature_discriminator(config: ModelConfig, seed: int = 0) -> FeatureDiscriminator:
    return FeatureDiscriminator(config, seed)


def build_pixel_discriminator(config: ModelConfig, extractor: FeatureExtractor, seed: int = 0) -> PixelDiscriminator:
    return PixelDiscriminator(config, extractor, seed)
