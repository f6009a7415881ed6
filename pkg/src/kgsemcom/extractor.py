"""Multi-scale semantic feature extraction.

A small five-stage convolutional backbone feeds a feature pyramid: 1x1
lateral projections to a common channel width, top-down nearest-neighbor
upsampling with addition, then a 3x3 smoothing convolution per level. The
five output levels sit at strides 4, 8, 16, 32 and 64 relative to the
input image, the deepest map coming from a stride-2 convolution on the
last backbone stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError, ValueRangeError
from .layers import LEAKY_SLOPE, Conv2d, ResidualBlock
from .optim import ParameterStore
from .tensor import Tensor, _accumulate, _make

PYRAMID_LEVELS = (2, 3, 4, 5, 6)


@dataclass
class FeaturePyramid:
    """Five feature maps with strictly halving spatial sizes."""

    levels: list  # Tensor[B, C, s_i, s_i] for i in 2..6

    def __post_init__(self):
        if len(self.levels) != 5:
            raise ShapeMismatchError(
                f"pyramid needs exactly 5 levels, got {len(self.levels)}")
        c = self.levels[0].shape[1]
        for a, b in zip(self.levels, self.levels[1:]):
            if b.shape[2] * 2 != a.shape[2] or b.shape[3] * 2 != a.shape[3]:
                raise ShapeMismatchError(
                    f"pyramid levels must halve: {a.shape} then {b.shape}")
            if b.shape[1] != c:
                raise ShapeMismatchError(
                    f"pyramid channel widths differ: {c} vs {b.shape[1]}")
        if self.levels[-1].shape[2] < 2:
            raise ShapeMismatchError(
                f"smallest pyramid level must be at least 2x2, got {self.levels[-1].shape}")

    @property
    def channels(self) -> int:
        return self.levels[0].shape[1]

    @property
    def batch(self) -> int:
        return self.levels[0].shape[0]

    def sizes(self) -> tuple:
        return tuple(l.shape[2] for l in self.levels)


def upsample2x(t: Tensor) -> Tensor:
    """Nearest-neighbor doubling; every pixel becomes a 2x2 block."""
    if t.ndim != 4:
        raise ShapeMismatchError(f"upsample2x expects (B,C,H,W), got {t.shape}")
    y = np.repeat(np.repeat(t.data, 2, axis=2), 2, axis=3)
    out = _make(y, (t,))
    if out._prev:
        def bwd(g, t=t):
            b, c, h, w = t.data.shape
            _accumulate(t, g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))
        out._backward = bwd
    return out


def validate_image(image: Tensor):
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeMismatchError(f"image must be (B,3,h,w), got {image.shape}")
    h, w = image.shape[2], image.shape[3]
    if h != w:
        raise ValueRangeError(f"image must be square, got {h}x{w}")
    if h < 128:
        raise ValueRangeError(
            f"image side {h} too small for five pyramid strides (needs >= 128)")
    if h & (h - 1):
        raise ValueRangeError(f"image side {h} must be a power of two")


class PyramidExtractor:
    """Toy backbone + feature pyramid producing five semantic scales."""

    def __init__(self, store: ParameterStore, feature_channels: int = 32,
                 stem_channels: int = 16, stage_channels=(16, 24, 32, 48),
                 slope: float = LEAKY_SLOPE, rng=None, prefix: str = "extractor"):
        rng = rng or np.random.default_rng(0)
        self.feature_channels = feature_channels
        self.slope = slope
        self.stem = Conv2d(store, f"{prefix}.stem", 3, stem_channels, 3, 2, 1, rng=rng)
        chans = [stem_channels, *stage_channels]
        self.stages = [
            ResidualBlock(store, f"{prefix}.stage{i + 2}", chans[i], chans[i + 1],
                          stride=2, slope=slope, rng=rng)
            for i in range(4)
        ]
        self.top = Conv2d(store, f"{prefix}.top", stage_channels[-1],
                          stage_channels[-1], 3, 2, 1, rng=rng)
        bottom_up = [*stage_channels, stage_channels[-1]]
        self.laterals = [
            Conv2d(store, f"{prefix}.lateral{i + 2}", c, feature_channels, 1, 1, 0, rng=rng)
            for i, c in enumerate(bottom_up)
        ]
        self.smooths = [
            Conv2d(store, f"{prefix}.smooth{i + 2}", feature_channels,
                   feature_channels, 3, 1, 1, rng=rng)
            for i in range(5)
        ]

    def extract(self, image: Tensor) -> FeaturePyramid:
        validate_image(image)
        x = self.stem(image).leaky_relu(self.slope)
        bottom_up = []
        for stage in self.stages:
            x = stage(x)
            bottom_up.append(x)
        bottom_up.append(self.top(bottom_up[-1]))

        merged = [None] * 5
        merged[4] = self.laterals[4](bottom_up[4])
        for i in range(3, -1, -1):
            merged[i] = self.laterals[i](bottom_up[i]) + upsample2x(merged[i + 1])
        return FeaturePyramid([self.smooths[i](merged[i]) for i in range(5)])

    def complexity(self, image_size: int):
        params = adds = mults = 0
        h = image_size
        p, a, m, (h, _) = self.stem.complexity(h, h)
        params, adds, mults = params + p, adds + a, mults + m
        stage_sizes = []
        for stage in self.stages:
            p, a, m, (h, _) = stage.complexity(h, h)
            params, adds, mults = params + p, adds + a, mults + m
            stage_sizes.append(h)
        p, a, m, (h, _) = self.top.complexity(stage_sizes[-1], stage_sizes[-1])
        params, adds, mults = params + p, adds + a, mults + m
        sizes = [*stage_sizes, h]
        for conv_set in (self.laterals, self.smooths):
            for conv, s in zip(conv_set, sizes):
                p, a, m, _ = conv.complexity(s, s)
                params, adds, mults = params + p, adds + a, mults + m
        return params, adds, mults


def extract(image: Tensor, extractor: PyramidExtractor) -> FeaturePyramid:
    """Functional facade over a configured PyramidExtractor."""
    return extractor.extract(image)
