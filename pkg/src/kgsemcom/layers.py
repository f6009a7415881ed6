"""Layer primitives: convolution, deconvolution, residual blocks, dense
layers, softmax, and the detection loss primitives.

conv2d computes a direct cross-correlation; deconv2d is its exact linear
adjoint for the same (kernel, stride, padding) geometry, so
<conv2d(x, w), y> == <x, deconv2d(y, w)> up to float64 rounding.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatchError, ValueRangeError
from .tensor import Tensor, _accumulate, _as_tensor, _make

LEAKY_SLOPE = 0.01
LOG_LOSS_EPS = 1e-7


# ---------------------------------------------------------------------------
# raw convolution kernels (numpy in, numpy out)
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    b, c, hp, wp = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (b, c, k, k, ho, wo), (s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False)


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv_forward_raw(x, w, stride, pad):
    k = w.shape[2]
    cols = _im2col(_pad(x, pad), k, stride)
    y = np.tensordot(cols, w, axes=((1, 2, 3), (1, 2, 3)))
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv_backward_input_raw(dy, w, stride, pad, x_shape):
    b, cin, h, wdt = x_shape
    k = w.shape[2]
    ho, wo = dy.shape[2], dy.shape[3]
    dxp = np.zeros((b, cin, h + 2 * pad, wdt + 2 * pad))
    # (Cout,Cin,K,K) x (B,Cout,Ho,Wo) -> (Cin,K,K,B,Ho,Wo)
    t = np.tensordot(w, dy, axes=(0, 1))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                t[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv_backward_weight_raw(x, dy, stride, pad, k):
    cols = _im2col(_pad(x, pad), k, stride)
    # (B,Cout,Ho,Wo) x (B,Cin,K,K,Ho,Wo) -> (Cout,Cin,K,K)
    return np.tensordot(dy, cols, axes=((0, 2, 3), (0, 4, 5)))


# ---------------------------------------------------------------------------
# differentiable primitives
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate (B,Cin,H,W) with (Cout,Cin,K,K)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d expects 4-d input/weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeMismatchError(
            f"conv2d channel mismatch: input {x.shape} has Cin={x.shape[1]}, "
            f"weight {weight.shape} expects Cin={weight.shape[1]}")
    k = weight.shape[2]
    if k > x.shape[2] + 2 * padding or k > x.shape[3] + 2 * padding:
        raise ShapeMismatchError(
            f"kernel {k} larger than padded input {x.shape} with padding {padding}")
    y = conv_forward_raw(x.data, weight.data, stride, padding)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeMismatchError(
                f"conv2d bias shape {bias.shape} != ({weight.shape[0]},)")
        y = y + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _make(y, parents)
    if out._prev:
        def bwd(g, x=x, weight=weight, bias=bias, stride=stride, padding=padding):
            _accumulate(x, conv_backward_input_raw(g, weight.data, stride, padding, x.data.shape))
            _accumulate(weight, conv_backward_weight_raw(x.data, g, stride, padding, weight.data.shape[2]))
            if bias is not None:
                _accumulate(bias, g.sum(axis=(0, 2, 3)))
        out._backward = bwd
    return out


def deconv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
             stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution of (B,Cin,H,W) with (Cin,Cout,K,K).

    Linear adjoint of conv2d with the same geometry; output spatial size is
    (H-1)*stride - 2*padding + K.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatchError(
            f"deconv2d expects 4-d input/weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeMismatchError(
            f"deconv2d channel mismatch: input {x.shape} has Cin={x.shape[1]}, "
            f"weight {weight.shape} expects Cin={weight.shape[0]}")
    k = weight.shape[2]
    ho = (x.shape[2] - 1) * stride - 2 * padding + k
    wo = (x.shape[3] - 1) * stride - 2 * padding + k
    if ho <= 0 or wo <= 0:
        raise ShapeMismatchError(
            f"deconv2d output size ({ho},{wo}) not positive for input {x.shape}, "
            f"K={k}, stride={stride}, padding={padding}")
    out_shape = (x.shape[0], weight.shape[1], ho, wo)
    y = conv_backward_input_raw(x.data, weight.data, stride, padding, out_shape)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeMismatchError(
                f"deconv2d bias shape {bias.shape} != ({weight.shape[1]},)")
        y = y + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _make(y, parents)
    if out._prev:
        def bwd(g, x=x, weight=weight, bias=bias, stride=stride, padding=padding):
            _accumulate(x, conv_forward_raw(g, weight.data, stride, padding))
            _accumulate(weight, conv_backward_weight_raw(g, x.data, stride, padding, weight.data.shape[2]))
            if bias is not None:
                _accumulate(bias, g.sum(axis=(0, 2, 3)))
        out._backward = bwd
    return out


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Dense layer: (B,D) @ (D,E) + (E,)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeMismatchError(
            f"fully_connected dimension mismatch: {x.shape} @ {weight.shape}")
    y = x @ weight
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeMismatchError(
                f"fully_connected bias shape {bias.shape} != ({weight.shape[1]},)")
        y = y + bias
    return y


def softmax(x: Tensor) -> Tensor:
    """Row softmax of (B,E); rows sum to 1 and are strictly positive."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeMismatchError(f"softmax expects (B,E), got {x.shape}")
    shift = Tensor(x.data.max(axis=1, keepdims=True))
    e = (x - shift).exp()
    return e / e.sum(axis=1, keepdims=True)


def log_loss(p: Tensor, p_star) -> Tensor:
    """Binary log loss -[p* ln p + (1-p*) ln(1-p)], elementwise.

    p is clamped into (eps, 1-eps) before the logs; values outside [0,1]
    are rejected.
    """
    p = _as_tensor(p)
    target = np.asarray(p_star, dtype=np.float64)
    if p.data.shape != target.shape:
        raise ShapeMismatchError(
            f"log_loss shape mismatch: p {p.data.shape} vs p* {target.shape}")
    if np.any(p.data < 0.0) or np.any(p.data > 1.0):
        bad = p.data[(p.data < 0.0) | (p.data > 1.0)].flat[0]
        raise ValueRangeError(f"log_loss probability {bad} outside [0, 1]")
    pc = p.clip(LOG_LOSS_EPS, 1.0 - LOG_LOSS_EPS)
    t = Tensor(target)
    return -(t * pc.log() + (1.0 - t) * (1.0 - pc).log())


def _smooth_l1_elementwise(diff: Tensor) -> Tensor:
    """0.5 x^2 for |x|<1 else |x|-0.5, as a single differentiable op."""
    x = diff.data
    small = np.abs(x) < 1.0
    val = np.where(small, 0.5 * x * x, np.abs(x) - 0.5)
    out = _make(val, (diff,))
    if out._prev:
        def bwd(g, diff=diff, small=small, x=x):
            _accumulate(diff, g * np.where(small, x, np.sign(x)))
        out._backward = bwd
    return out


def smooth_l1(t: Tensor, t_star) -> Tensor:
    """Summed smooth-L1 between two same-shape tensors."""
    t = _as_tensor(t)
    t_star = _as_tensor(t_star)
    if t.data.shape != t_star.data.shape:
        raise ShapeMismatchError(
            f"smooth_l1 shape mismatch: {t.data.shape} vs {t_star.data.shape}")
    return _smooth_l1_elementwise(t - t_star).sum()


def smooth_l1_rows(t: Tensor, t_star) -> Tensor:
    """Per-row smooth-L1 sums for (N,D) inputs; used by the detection loss."""
    t = _as_tensor(t)
    t_star = _as_tensor(t_star)
    if t.data.shape != t_star.data.shape:
        raise ShapeMismatchError(
            f"smooth_l1 shape mismatch: {t.data.shape} vs {t_star.data.shape}")
    return _smooth_l1_elementwise(t - t_star).sum(axis=1)


# ---------------------------------------------------------------------------
# parameterized layers
# ---------------------------------------------------------------------------

def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(1.0 / max(1, fan_in))
    return rng.uniform(-limit, limit, size=shape)


class Conv2d:
    """Convolution layer owning named parameters in a ParameterStore."""

    def __init__(self, store, name, cin, cout, k=3, stride=1, padding=1,
                 bias=True, rng=None):
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.padding = stride, padding
        rng = rng or np.random.default_rng(0)
        self.weight = store.add(f"{name}.w", fan_in_uniform(rng, (cout, cin, k, k), cin * k * k))
        self.bias = store.add(f"{name}.b", np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def out_hw(self, h, w):
        k, s, p = self.k, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def complexity(self, h, w):
        ho, wo = self.out_hw(h, w)
        mults = self.cout * self.cin * self.k * self.k * ho * wo
        n_out = self.cout * ho * wo
        params = self.cout * self.cin * self.k * self.k + (self.cout if self.bias is not None else 0)
        return params, mults - n_out, mults, (ho, wo)


class Deconv2d:
    def __init__(self, store, name, cin, cout, k=4, stride=2, padding=1,
                 bias=True, rng=None):
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.padding = stride, padding
        rng = rng or np.random.default_rng(0)
        self.weight = store.add(f"{name}.w", fan_in_uniform(rng, (cin, cout, k, k), cin * k * k))
        self.bias = store.add(f"{name}.b", np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return deconv2d(x, self.weight, self.bias, self.stride, self.padding)

    def out_hw(self, h, w):
        k, s, p = self.k, self.stride, self.padding
        return (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k

    def complexity(self, h, w):
        ho, wo = self.out_hw(h, w)
        # same MAC count as the adjoint convolution
        mults = self.cout * self.cin * self.k * self.k * h * w
        n_out = self.cout * ho * wo
        params = self.cout * self.cin * self.k * self.k + (self.cout if self.bias is not None else 0)
        return params, mults - n_out, mults, (ho, wo)


class Linear:
    def __init__(self, store, name, d_in, d_out, bias=True, rng=None):
        self.d_in, self.d_out = d_in, d_out
        rng = rng or np.random.default_rng(0)
        self.weight = store.add(f"{name}.w", fan_in_uniform(rng, (d_in, d_out), d_in))
        self.bias = store.add(f"{name}.b", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return fully_connected(x, self.weight, self.bias)

    def complexity(self):
        mults = self.d_in * self.d_out
        params = self.d_in * self.d_out + (self.d_out if self.bias is not None else 0)
        return params, mults - self.d_out, mults


class ResidualBlock:
    """Two 3x3 convolutions with a skip path.

    Skip is the identity when geometry allows, otherwise a 1x1 projection.
    Output is leaky_relu(inner(x) + skip(x)).
    """

    def __init__(self, store, name, cin, cout, stride=1, slope=LEAKY_SLOPE, rng=None):
        self.cin, self.cout, self.stride, self.slope = cin, cout, stride, slope
        self.conv1 = Conv2d(store, f"{name}.conv1", cin, cout, 3, stride, 1, rng=rng)
        self.conv2 = Conv2d(store, f"{name}.conv2", cout, cout, 3, 1, 1, rng=rng)
        if cin != cout or stride != 1:
            self.skip = Conv2d(store, f"{name}.skip", cin, cout, 1, stride, 0, rng=rng)
        else:
            self.skip = None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cin:
            raise ShapeMismatchError(
                f"residual block configured for {self.cin} channels, got input {x.shape}")
        h = self.conv1(x).leaky_relu(self.slope)
        h = self.conv2(h)
        s = self.skip(x) if self.skip is not None else x
        return (h + s).leaky_relu(self.slope)

    def complexity(self, h, w):
        params = adds = mults = 0
        p, a, m, (ho, wo) = self.conv1.complexity(h, w)
        params, adds, mults = params + p, adds + a, mults + m
        p, a, m, _ = self.conv2.complexity(ho, wo)
        params, adds, mults = params + p, adds + a, mults + m
        if self.skip is not None:
            p, a, m, _ = self.skip.complexity(h, w)
            params, adds, mults = params + p, adds + a, mults + m
        return params, adds, mults, (ho, wo)


def residual_block(x: Tensor, block: ResidualBlock) -> Tensor:
    """Functional facade over a configured ResidualBlock."""
    return block(x)
