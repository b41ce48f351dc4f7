"""Denoising network, priors' discriminators, and the perceptual extractor."""

from .config import ModelConfig
from .discriminators import (
    DiscBlock,
    FeatureDiscriminator,
    PixelDiscriminator,
    build_feature_discriminator,
    build_pixel_discriminator,
)
from .extractor import FeatureExtractor, MalformedWeightsError, build_extractor, perceptual_features
from .nn import BatchNorm2d, Conv2d, Linear, Module, Parameter
from .transform import (
    DenoiseOutput,
    Fusion,
    PreActBlock,
    TransformNet,
    build_transform_net,
    forward_denoise,
    fuse_local_global,
)

__all__ = [
    "BatchNorm2d", "Conv2d", "DenoiseOutput", "DiscBlock", "FeatureDiscriminator", "FeatureExtractor",
    "Fusion", "Linear", "MalformedWeightsError", "ModelConfig", "Module", "Parameter", "PixelDiscriminator",
    "PreActBlock", "TransformNet", "build_extractor", "build_feature_discriminator",
    "build_pixel_discriminator", "build_transform_net", "forward_denoise", "fuse_local_global",
    "perceptual_features",
]
