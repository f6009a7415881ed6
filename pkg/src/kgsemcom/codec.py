"""Parallel multi-scale semantic codec and channel transmission.

Five independent single-scale encoders compress each pyramid level with a
residual stack plus a stride-2 convolution; the decoders mirror them with
a stride-2 deconvolution followed by a residual stack. The encoded channel
width C is derived from the requested bandwidth compression ratio R = k/n,
where k counts complex channel symbols and n = 3*w*h counts image reals.

Transmission flattens each scale of each batch item into its own complex
vector, normalizes it to the average power constraint, runs it through the
configured channel, equalizes (Rayleigh, perfect CSI), undoes the
normalization bookkeeping, and reshapes. Noise samples enter the autodiff
graph as constants, so gradients flow back to the encoder and extractor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelConfig, draw_awgn_noise, draw_rayleigh_gain
from .errors import RateError, ShapeMismatchError, SignalError
from .extractor import FeaturePyramid
from .layers import LEAKY_SLOPE, Conv2d, Deconv2d, ResidualBlock
from .optim import ParameterStore
from .tensor import Tensor, concat


@dataclass
class EncodedPyramid:
    """Encoded levels at half the spatial size of their pyramid sources."""

    levels: list

    def __post_init__(self):
        if len(self.levels) != 5:
            raise ShapeMismatchError(
                f"encoded pyramid needs exactly 5 levels, got {len(self.levels)}")
        c = self.levels[0].shape[1]
        for lv in self.levels:
            if lv.shape[1] != c:
                raise ShapeMismatchError("encoded channel widths differ across levels")

    @property
    def channels(self) -> int:
        return self.levels[0].shape[1]

    @property
    def batch(self) -> int:
        return self.levels[0].shape[0]

    def sizes(self) -> tuple:
        return tuple(l.shape[2] for l in self.levels)


@dataclass(frozen=True)
class RateConfig:
    """Bandwidth compression accounting for one model geometry."""

    requested: float
    n: int                      # image reals, 3*w*h
    channels: int               # encoded width C
    k: int                      # total complex symbols
    k_per_scale: tuple          # per-level complex symbol counts
    achieved: float             # k / n

    def as_row(self) -> dict:
        return {
            "requested_R": self.requested,
            "achieved_R": self.achieved,
            "C": self.channels,
            "k": self.k,
            "n": self.n,
        }


def channels_for_ratio(requested: float, image_size: int = 128,
                       pyramid_sizes=(32, 16, 8, 4, 2)) -> RateConfig:
    """Derive the encoded channel width C for a requested ratio R = k/n.

    Total encoded reals are C * sum((s_i/2)^2); k is the complex symbol
    count after pairing each scale separately (odd scale payloads pad one
    real). C is the closest integer realization of the request.
    """
    if requested <= 0:
        raise RateError(f"compression ratio must be positive, got {requested}")
    for s in pyramid_sizes:
        if s < 2:
            raise RateError(f"pyramid level of size {s} cannot be halved")
    n = 3 * image_size * image_size
    half_areas = [(s // 2) ** 2 for s in pyramid_sizes]
    total_area = sum(half_areas)
    c = round(2.0 * requested * n / total_area)
    if c < 1:
        min_r = total_area / (2.0 * n)
        raise RateError(
            f"ratio {requested} too small for this geometry; "
            f"minimum representable R is {total_area}/(2*{n}) = {min_r:.6g}")
    k_per_scale = tuple(-(-c * a // 2) for a in half_areas)  # ceil for odd payloads
    k = sum(k_per_scale)
    return RateConfig(requested=float(requested), n=n, channels=int(c), k=int(k),
                      k_per_scale=k_per_scale, achieved=k / n)


class SingleScaleEncoder:
    """Residual stack then a stride-2 convolution down to C channels."""

    def __init__(self, store, name, in_channels, out_channels, depth=2,
                 slope=LEAKY_SLOPE, rng=None):
        self.blocks = [
            ResidualBlock(store, f"{name}.res{i}", in_channels, in_channels,
                          slope=slope, rng=rng)
            for i in range(depth)
        ]
        self.down = Conv2d(store, f"{name}.down", in_channels, out_channels,
                           3, 2, 1, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[2] < 2 or x.shape[3] < 2:
            raise ShapeMismatchError(
                f"encoder level input {x.shape} too small to halve")
        for b in self.blocks:
            x = b(x)
        return self.down(x)

    def complexity(self, h, w):
        params = adds = mults = 0
        for b in self.blocks:
            p, a, m, (h, w) = b.complexity(h, w)
            params, adds, mults = params + p, adds + a, mults + m
        p, a, m, _ = self.down.complexity(h, w)
        return params + p, adds + a, mults + m


class SingleScaleDecoder:
    """Stride-2 deconvolution back up, then a residual stack."""

    def __init__(self, store, name, in_channels, out_channels, depth=2,
                 slope=LEAKY_SLOPE, rng=None):
        self.up = Deconv2d(store, f"{name}.up", in_channels, out_channels,
                           4, 2, 1, rng=rng)
        self.blocks = [
            ResidualBlock(store, f"{name}.res{i}", out_channels, out_channels,
                          slope=slope, rng=rng)
            for i in range(depth)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        x = self.up(x)
        for b in self.blocks:
            x = b(x)
        return x

    def complexity(self, h, w):
        params, adds, mults, (h, w) = self.up.complexity(h, w)
        for b in self.blocks:
            p, a, m, (h, w) = b.complexity(h, w)
            params, adds, mults = params + p, adds + a, mults + m
        return params, adds, mults


class MultiScaleCodec:
    """Five parallel encoder/decoder pairs with no weight sharing."""

    def __init__(self, store: ParameterStore, rate: RateConfig,
                 feature_channels: int = 32, depth: int = 2,
                 slope: float = LEAKY_SLOPE, rng=None, prefix: str = "codec"):
        rng = rng or np.random.default_rng(0)
        self.rate = rate
        self.feature_channels = feature_channels
        self.encoders = [
            SingleScaleEncoder(store, f"{prefix}.enc{i + 2}", feature_channels,
                               rate.channels, depth, slope, rng)
            for i in range(5)
        ]
        self.decoders = [
            SingleScaleDecoder(store, f"{prefix}.dec{i + 2}", rate.channels,
                               feature_channels, depth, slope, rng)
            for i in range(5)
        ]

    def encode(self, pyramid: FeaturePyramid) -> EncodedPyramid:
        if pyramid.channels != self.feature_channels:
            raise ShapeMismatchError(
                f"codec built for {self.feature_channels} feature channels, "
                f"pyramid has {pyramid.channels}")
        return EncodedPyramid([enc(lv) for enc, lv in zip(self.encoders, pyramid.levels)])

    def decode(self, received: EncodedPyramid) -> FeaturePyramid:
        if received.channels != self.rate.channels:
            raise ShapeMismatchError(
                f"decoder expects {self.rate.channels} encoded channels, "
                f"got {received.channels}")
        return FeaturePyramid([dec(lv) for dec, lv in zip(self.decoders, received.levels)])

    def complexity(self, pyramid_sizes=(32, 16, 8, 4, 2)):
        params = adds = mults = 0
        for enc, dec, s in zip(self.encoders, self.decoders, pyramid_sizes):
            p, a, m = enc.complexity(s, s)
            params, adds, mults = params + p, adds + a, mults + m
            p, a, m = dec.complexity(s // 2, s // 2)
            params, adds, mults = params + p, adds + a, mults + m
        return params, adds, mults


# ---------------------------------------------------------------------------
# differentiable transmission
# ---------------------------------------------------------------------------

def _transmit_vector(flat: Tensor, k: int, channel: ChannelConfig, rng):
    """Send one real vector (interpreted as k complex symbols) through the
    channel; returns the received real vector with bookkeeping undone."""
    padded = flat.size % 2 == 1
    if padded:
        flat = concat([flat, Tensor(np.zeros(1))], axis=0)
    energy = (flat * flat).sum()
    if energy.item() == 0.0:
        raise SignalError("power normalization undefined for the all-zero signal")
    scale = (energy / (k * channel.power)) ** 0.5  # divide by this to normalize
    z = flat / scale

    if channel.kind == "awgn":
        noise = draw_awgn_noise(k, channel.sigma2, rng)
        received = z + _interleave(noise)
    else:
        g = draw_rayleigh_gain(rng)
        noise = draw_awgn_noise(k, channel.sigma2, rng)
        faded = _complex_scale(z, g) + _interleave(noise)
        if channel.mode == "equalize":
            if abs(g) < 1e-12:
                raise SignalError(f"deep fade: |g|={abs(g):.3e}")
            received = _complex_scale(faded, 1.0 / g)
        else:
            received = faded

    out = received * scale
    if padded:
        out = out[:-1]
    return out


def _interleave(samples: np.ndarray) -> np.ndarray:
    flat = np.empty(2 * samples.size)
    flat[0::2] = samples.real
    flat[1::2] = samples.imag
    return flat


def _complex_scale(flat: Tensor, g: complex) -> Tensor:
    """Multiply interleaved (re, im) pairs by the complex scalar g."""
    rot = np.array([[g.real, g.imag], [-g.imag, g.real]])
    pairs = flat.reshape(-1, 2)
    return (pairs @ Tensor(rot)).reshape(flat.size)


def transmit_pyramid(encoded: EncodedPyramid, channel: ChannelConfig,
                     rng=None) -> EncodedPyramid:
    """Transmit each (item, scale) payload as its own normalized complex
    vector; output shapes equal input shapes."""
    rng = np.random.default_rng(channel.seed) if rng is None else rng
    out_levels = []
    for level in encoded.levels:
        b = level.shape[0]
        shape = level.shape[1:]
        reals = int(np.prod(shape))
        k = (reals + 1) // 2
        rows = []
        for i in range(b):
            flat = level[i].reshape(reals)
            rows.append(_transmit_vector(flat, k, channel, rng).reshape(shape))
        out_levels.append(_stack_levels(rows))
    return EncodedPyramid(out_levels)


def _stack_levels(rows):
    from .tensor import stack_rows  # local import to keep module load light
    flats = [r.reshape(r.size) for r in rows]
    stacked = stack_rows(flats)
    c, h, w = rows[0].shape
    return stacked.reshape(len(rows), c, h, w)


def scale_symbol_counts(encoded: EncodedPyramid) -> tuple:
    """Complex symbols per scale for one batch item (pad-aware)."""
    return tuple((int(np.prod(l.shape[1:])) + 1) // 2 for l in encoded.levels)


# ---------------------------------------------------------------------------
# complexity accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ComplexityCount:
    parameters: int
    additions: int
    multiplications: int


def count_complexity(model) -> ComplexityCount:
    """Exact parameter and per-image operation counts for a model.

    Convolution counting rule: multiplications = Cout*Cin*K^2*H'*W' and
    additions = multiplications - (number of outputs); biases contribute to
    the parameter count only. Dense layers follow the same rule.
    """
    params, adds, mults = model.complexity()
    return ComplexityCount(int(params), int(adds), int(mults))
