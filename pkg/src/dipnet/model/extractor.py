"""Frozen perceptual feature extractor feeding the pixel discriminator.

Three conv+ReLU stages with strides 1, 2, 2 give maps at 1, 1/2 and 1/4 of
the input resolution. Inputs are edge-padded, so a constant image yields
per-channel constant maps. The default weights are random but seeded;
pretrained weights can be supplied as a checkpoint file holding blobs
``stage{1,2,3}.weight`` (out, in, 3, 3) and ``stage{1,2,3}.bias`` (out,).
"""

from __future__ import annotations

from collections import OrderedDict
from typing import List, Sequence

import numpy as np

from .. import autodiff as ad
from ..autodiff import ShapeError, Tensor
from ..checkpoint import CheckpointError, load_checkpoint
from .nn import Module, Parameter, he_normal

STRIDES = (1, 2, 2)


class MalformedWeightsError(ValueError):
    pass


class ExtractorStage(Module):
    def __init__(self, weight: np.ndarray, bias: np.ndarray, stride: int):
        super().__init__()
        self.weight = Parameter(weight, requires_grad=False)
        self.bias = Parameter(bias, requires_grad=False)
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        k = self.weight.shape[-1]
        return ad.relu(ad.conv2d(ad.pad(x, k // 2, "edge"), self.weight, self.bias, self.stride, 0))


class FeatureExtractor(Module):
    def __init__(self, weights: Sequence[tuple], source: str = "seeded"):
        super().__init__()
        self.stages = [ExtractorStage(w, b, s) for (w, b), s in zip(weights, STRIDES)]
        self.source = source

    @property
    def channels(self) -> tuple:
        return tuple(stage.weight.shape[0] for stage in self.stages)

    @classmethod
    def seeded(cls, channels=(16, 32, 64), seed: int = 1234) -> "FeatureExtractor":
        rng = np.random.default_rng(seed)
        weights, c_in = [], 3
        for c_out in channels:
            w = he_normal(rng, (c_out, c_in, 3, 3), 9 * c_in)
            b = rng.uniform(-0.1, 0.1, c_out)
            weights.append((w, b))
            c_in = c_out
        return cls(weights, "seeded")

    @classmethod
    def from_file(cls, path) -> "FeatureExtractor":
        try:
            ckpt = load_checkpoint(path)
        except (OSError, CheckpointError) as exc:
            raise MalformedWeightsError(f"cannot read extractor weights from {path}: {exc}") from None
        blobs = ckpt.section("extractor.") or ckpt.blobs
        return cls(_validate_weights(blobs), f"file:{path}")

    def forward(self, image: Tensor) -> List[Tensor]:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"extractor expects (N, 3, H, W), got {image.shape}")
        maps, h = [], image
        for stage in self.stages:
            h = stage(h)
            maps.append(h)
        return maps

    def weight_blobs(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for i, stage in enumerate(self.stages, 1):
            out[f"stage{i}.weight"] = stage.weight.data
            out[f"stage{i}.bias"] = stage.bias.data
        return out


def _validate_weights(blobs) -> list:
    expected = {f"stage{i}.{k}" for i in (1, 2, 3) for k in ("weight", "bias")}
    if set(blobs) != expected:
        raise MalformedWeightsError(f"extractor weights need exactly {sorted(expected)}, got {sorted(blobs)}")
    weights, c_in = [], 3
    for i in (1, 2, 3):
        w, b = blobs[f"stage{i}.weight"], blobs[f"stage{i}.bias"]
        if w.ndim != 4 or w.shape[1] != c_in or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
            raise MalformedWeightsError(f"stage{i}.weight has shape {w.shape}; expected (out, {c_in}, k, k), k odd")
        if b.shape != (w.shape[0],):
            raise MalformedWeightsError(f"stage{i}.bias has shape {b.shape}; expected ({w.shape[0]},)")
        weights.append((w, b))
        c_in = w.shape[0]
    return weights


def build_extractor(identifier: str = "seeded", channels=(16, 32, 64), seed: int = 1234) -> FeatureExtractor:
    if identifier == "seeded":
        return FeatureExtractor.seeded(channels, seed)
    if identifier.startswith("file:"):
        return FeatureExtractor.from_file(identifier[len("file:"):])
    raise ValueError(f"unknown extractor {identifier!r}")


def perceptual_features(extractor: FeatureExtractor, image: Tensor) -> List[Tensor]:
    return extractor(image)
