"""The denoising (transformation) network: low-level residual stack with a
long skip, then parallel local and global paths merged by a 1x1 fusion."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .. import autodiff as ad
from ..autodiff import ShapeError, Tensor
from .config import ModelConfig
from .nn import BatchNorm2d, Conv2d, Linear, Module, Parameter, he_normal


class DenoiseOutput(NamedTuple):
    denoised: Tensor
    fused_features: Tensor


class PreActBlock(Module):
    """``x + conv(relu(bn(conv(relu(bn(x))))))`` with 3x3 zero-padded convs."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        self.bn1 = BatchNorm2d(channels)
        # followed by batch norm, which cancels any per-channel bias
        self.conv1 = Conv2d(channels, channels, 3, rng, bias=False)
        self.bn2 = BatchNorm2d(channels)
        self.conv2 = Conv2d(channels, channels, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"residual block expects {self.channels} channels, got shape {x.shape}")
        h = self.conv1(ad.relu(self.bn1(x)))
        h = self.conv2(ad.relu(self.bn2(h)))
        return ad.add(x, h)


def fuse_local_global(local: Tensor, glob: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``relu(w' G + w L + b)`` per pixel, as a 1x1 conv over concat(L, G broadcast).

    ``weight`` is (C', 2C, 1, 1): the first C input channels mix the local
    maps, the last C the global vector.
    """
    if local.ndim != 4:
        raise ShapeError(f"local features must be NCHW, got {local.shape}")
    N, C, H, W = local.shape
    if glob.ndim == 2:
        glob = ad.reshape(glob, (glob.shape[0], glob.shape[1], 1, 1))
    if glob.shape != (N, C, 1, 1):
        raise ShapeError(f"global vector {glob.shape} does not match local features {local.shape}")
    tiled = ad.expand(glob, (N, C, H, W))
    return ad.relu(ad.conv2d(ad.concat([local, tiled], axis=1), weight, bias))


class Fusion(Module):
    def __init__(self, channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Parameter(he_normal(rng, (out_channels, 2 * channels, 1, 1), 2 * channels))
        self.bias = Parameter(np.zeros(out_channels))

    def forward(self, local: Tensor, glob: Tensor) -> Tensor:
        return fuse_local_global(local, glob, self.weight, self.bias)


class TransformNet(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        C = config.base_channels
        self.head = Conv2d(config.input_channels, C, 3, rng)
        self.low = [PreActBlock(C, rng) for _ in range(config.low_level_blocks)]
        self.local = [PreActBlock(C, rng) for _ in range(config.local_blocks)]
        self.global_fc1 = Linear(C, config.global_fc_width, rng)
        self.global_fc2 = Linear(config.global_fc_width, C, rng)
        self.fusion = Fusion(C, C, rng)
        self.tail = Conv2d(C, config.input_channels, 3, rng)
        # no ReLU follows the output conv, and full-scale outputs swamp the [0, 1] targets at the start
        self.tail.weight.data = (self.tail.weight.data * config.output_init_gain).astype(self.tail.weight.dtype)

    def lift(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise ShapeError(f"expected (N, {self.config.input_channels}, H, W) input, got {x.shape}")
        return self.head(x)

    def low_level(self, lifted: Tensor) -> Tensor:
        """Residual stack output before the long skip is added."""
        h = lifted
        for block in self.low:
            h = block(h)
        return h

    def global_vector(self, h: Tensor) -> Tensor:
        g = ad.reshape(ad.global_avg_pool(h), (h.shape[0], h.shape[1]))
        g = ad.relu(self.global_fc1(g))
        return ad.relu(self.global_fc2(g))

    def forward(self, x: Tensor) -> DenoiseOutput:
        lifted = self.lift(x)
        h = ad.add(self.low_level(lifted), lifted)
        local = h
        for block in self.local:
            local = block(local)
        fused = self.fusion(local, self.global_vector(h))
        out = self.tail(fused)
        if self.config.input_skip:
            out = ad.add(out, x)
        return DenoiseOutput(out, fused)


def build_transform_net(config: ModelConfig, seed: int = 0) -> TransformNet:
    return TransformNet(config, seed)


def forward_denoise(model: TransformNet, noisy: Tensor, mode: str = "eval") -> DenoiseOutput:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    return model(noisy)
