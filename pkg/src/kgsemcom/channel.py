"""Complex-baseband channel simulation.

Conventions:
  * noise power sigma^2 is the total variance per complex sample, split
    evenly between the real and imaginary components;
  * SNR(dB) = 10 log10(P / sigma^2) with P the average per-sample transmit
    power in linear units;
  * Rayleigh fading draws one complex gain per call (block fading) with
    E[|g|^2] = 1, the gain being drawn before the noise samples.

All functions are pure given an explicit seed or numpy Generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SignalError, ValueRangeError
from .tensor import Tensor

DEEP_FADE_FLOOR = 1e-12


@dataclass
class ComplexSignal:
    """Length-k complex baseband vector with transmit bookkeeping.

    ``padded`` records whether a trailing zero real component was appended
    to make the source length even; ``scale`` records the power
    normalization factor applied by power_normalize (1.0 if none).
    """

    samples: np.ndarray
    padded: bool = False
    scale: float = 1.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueRangeError(
                f"complex signal must be a non-empty vector, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples.view(np.float64))):
            raise ValueRangeError("complex signal contains non-finite components")

    @property
    def k(self) -> int:
        return self.samples.size


@dataclass
class ChannelConfig:
    """Channel kind plus power/noise bookkeeping.

    Exactly one of ``sigma2`` or ``snr_db`` must be given; the other is
    derived so that SNR(dB) = 10 log10(P / sigma^2) always holds.
    """

    kind: str = "awgn"
    power: float = 1.0
    sigma2: float | None = None
    snr_db: float | None = None
    seed: int = 0
    mode: str = "equalize"  # receiver handling of the Rayleigh gain

    def __post_init__(self):
        if self.kind not in ("awgn", "rayleigh"):
            raise ValueRangeError(f"unknown channel kind {self.kind!r}")
        if self.mode not in ("equalize", "raw"):
            raise ValueRangeError(f"unknown receiver mode {self.mode!r}")
        if self.power <= 0:
            raise ValueRangeError(f"transmit power must be positive, got {self.power}")
        if (self.sigma2 is None) == (self.snr_db is None):
            raise ValueRangeError("specify exactly one of sigma2 or snr_db")
        if self.sigma2 is None:
            self.sigma2 = self.power / (10.0 ** (self.snr_db / 10.0))
        else:
            if self.sigma2 < 0:
                raise ValueRangeError(f"noise power must be >= 0, got {self.sigma2}")
            self.snr_db = (np.inf if self.sigma2 == 0
                           else 10.0 * np.log10(self.power / self.sigma2))


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# real <-> complex mapping
# ---------------------------------------------------------------------------

def to_complex(features) -> ComplexSignal:
    """Pair consecutive reals into (re, im); odd lengths get one zero pad."""
    if isinstance(features, Tensor):
        features = features.data
    flat = np.asarray(features, dtype=np.float64).reshape(-1)
    padded = flat.size % 2 == 1
    if padded:
        flat = np.concatenate([flat, [0.0]])
    pairs = flat.reshape(-1, 2)
    return ComplexSignal(pairs[:, 0] + 1j * pairs[:, 1], padded=padded)


def from_complex(signal: ComplexSignal, original_shape) -> np.ndarray:
    """Inverse of to_complex; drops the pad and restores the shape."""
    flat = np.empty(2 * signal.k, dtype=np.float64)
    flat[0::2] = signal.samples.real
    flat[1::2] = signal.samples.imag
    n = int(np.prod(original_shape))
    if n not in (flat.size, flat.size - 1):
        raise ValueRangeError(
            f"shape {tuple(original_shape)} needs {n} reals, signal carries {flat.size}")
    return flat[:n].reshape(original_shape)


# ---------------------------------------------------------------------------
# power normalization and channel impairments
# ---------------------------------------------------------------------------

def power_normalize(z_tilde: ComplexSignal, power: float = 1.0) -> ComplexSignal:
    """Scale so the average per-sample power equals ``power`` exactly."""
    energy = float(np.sum(z_tilde.samples.real ** 2 + z_tilde.samples.imag ** 2))
    if energy == 0.0:
        raise SignalError("power normalization undefined for the all-zero signal")
    scale = float(np.sqrt(z_tilde.k * power) / np.sqrt(energy))
    return ComplexSignal(z_tilde.samples * scale, padded=z_tilde.padded, scale=scale)


def draw_awgn_noise(k: int, sigma2: float, rng) -> np.ndarray:
    """k circularly-symmetric complex Gaussian samples, total variance sigma2."""
    n = _rng(rng).standard_normal((k, 2))
    w = np.sqrt(sigma2 / 2.0) * (n[:, 0] + 1j * n[:, 1])
    return w


def draw_rayleigh_gain(rng) -> complex:
    """One complex block-fading gain with E[|g|^2] = 1."""
    n = _rng(rng).standard_normal(2)
    return complex(n[0] / np.sqrt(2.0), n[1] / np.sqrt(2.0))


def awgn(z: ComplexSignal, sigma2: float, seed) -> ComplexSignal:
    if sigma2 < 0:
        raise ValueRangeError(f"noise power must be >= 0, got {sigma2}")
    w = draw_awgn_noise(z.k, sigma2, seed)
    return ComplexSignal(z.samples + w, padded=z.padded, scale=z.scale)


def rayleigh(z: ComplexSignal, sigma2: float, seed,
             g_override: complex | None = None) -> tuple[ComplexSignal, complex]:
    if sigma2 < 0:
        raise ValueRangeError(f"noise power must be >= 0, got {sigma2}")
    rng = _rng(seed)
    g = draw_rayleigh_gain(rng) if g_override is None else complex(g_override)
    w = draw_awgn_noise(z.k, sigma2, rng)
    return ComplexSignal(g * z.samples + w, padded=z.padded, scale=z.scale), g


def equalize(z_hat: ComplexSignal, g: complex) -> ComplexSignal:
    """Divide by the known gain (perfect CSI); rejects deep fades."""
    if abs(g) < DEEP_FADE_FLOOR:
        raise SignalError(f"deep fade: |g|={abs(g):.3e} below {DEEP_FADE_FLOOR}")
    return ComplexSignal(z_hat.samples / g, padded=z_hat.padded, scale=z_hat.scale)
