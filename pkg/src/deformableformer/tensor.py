"""Dense layers with explicit forward/backward passes.

Tensors are plain numpy arrays in (B, C, H, W) layout. Every layer keeps the
input it needs for its backward pass; ``backward`` consumes that saved state,
so it can run at most once per ``forward``.
"""
from __future__ import annotations

import contextlib
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special, stats

WIDE = np.float64
NARROW = np.float32

_GRAD_ENABLED = True


class BackwardError(RuntimeError):
    """Raised when backward is called without a matching forward."""


@contextlib.contextmanager
def no_grad():
    """Run forwards without saving activations (inference only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@dataclass
class Param:
    value: np.ndarray
    init: str = "trunc_normal"  # one of trunc_normal | zeros | ones
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0


class Layer:
    """Base class. Subclasses list their params in ``_params`` and sublayers in ``_children``."""

    _params: tuple[str, ...] = ()
    _children: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Param]]:
        out = [(prefix + name, getattr(self, name)) for name in self._params]
        for child in self._children:
            out.extend(getattr(self, child).named_parameters(f"{prefix}{child}."))
        return out

    def parameters(self) -> list[Param]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def _save(self, *arrays):
        self._saved = arrays if grad_enabled() else None

    def _pop(self):
        saved = getattr(self, "_saved", None)
        if saved is None:
            raise BackwardError(f"{type(self).__name__}.backward called without forward")
        self._saved = None
        return saved


def initialize(named_params: Sequence[tuple[str, Param]], seed: int, std: float = 0.02):
    """Fill parameters in place.

    Each parameter draws from its own generator keyed by (seed, name), so a
    parameter's initial value does not depend on which other layers exist.
    """
    for name, p in named_params:
        if p.init == "zeros":
            p.value[...] = 0
        elif p.init == "ones":
            p.value[...] = 1
        elif p.init == "trunc_normal":
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            draw = stats.truncnorm.rvs(-2.0, 2.0, size=p.value.shape, random_state=rng)
            p.value[...] = std * draw
        else:
            raise ValueError(f"unknown init {p.init!r} for {name}")
        p.zero_grad()


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0:
        raise ValueError(f"kernel {kernel} larger than padded input {size + 2 * padding}")
    return span // stride + 1


def _windows(x, kh, kw, stride, padding):
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d_forward(x, weight, bias, stride=1, padding=0):
    """Cross-correlation of x (B, C, H, W) with weight (O, C, kh, kw)."""
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if x.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"input {x.shape} does not match weight {weight.shape}")
    _, _, kh, kw = weight.shape
    conv_output_size(x.shape[2], kh, stride, padding)
    conv_output_size(x.shape[3], kw, stride, padding)
    win = _windows(x, kh, kw, stride, padding)  # (B, C, Ho, Wo, kh, kw)
    out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, O)
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(grad_out, x, weight, stride=1, padding=0):
    """Returns (grad_x, grad_weight, grad_bias)."""
    _, _, kh, kw = weight.shape
    ho, wo = grad_out.shape[2:]
    expected = (x.shape[0], weight.shape[0],
                conv_output_size(x.shape[2], kh, stride, padding),
                conv_output_size(x.shape[3], kw, stride, padding))
    if grad_out.shape != expected:
        raise ValueError(f"grad_out shape {grad_out.shape} != forward output {expected}")
    win = _windows(x, kh, kw, stride, padding)
    grad_w = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
    grad_b = grad_out.sum(axis=(0, 2, 3))
    cols = np.tensordot(grad_out, weight, axes=([1], [0]))  # (B, Ho, Wo, C, kh, kw)
    cols = cols.transpose(0, 3, 1, 2, 4, 5)
    b, c, h, w = x.shape
    gxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[..., i, j]
    grad_x = gxp[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


class Conv2d(Layer):
    _params = ("weight", "bias")

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0,
                 dtype=NARROW, init="trunc_normal"):
        self.stride, self.padding = stride, padding
        self.weight = Param(np.zeros((out_channels, in_channels, kernel, kernel), dtype), init)
        self.bias = Param(np.zeros(out_channels, dtype), "zeros")

    def forward(self, x):
        self._save(x)
        return conv2d_forward(x, self.weight.value, self.bias.value, self.stride, self.padding)

    def backward(self, grad_out):
        (x,) = self._pop()
        gx, gw, gb = conv2d_backward(grad_out, x, self.weight.value, self.stride, self.padding)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx

    def output_shape(self, shape):
        b, _, h, w = shape
        k = self.weight.value.shape[-1]
        return (b, self.weight.value.shape[0],
                conv_output_size(h, k, self.stride, self.padding),
                conv_output_size(w, k, self.stride, self.padding))


# ---------------------------------------------------------------------------
# linear / pointwise


class Linear(Layer):
    """y = x @ W + b over the last axis; W has shape (in, out)."""

    _params = ("weight", "bias")

    def __init__(self, in_features, out_features, dtype=NARROW):
        self.weight = Param(np.zeros((in_features, out_features), dtype))
        self.bias = Param(np.zeros(out_features, dtype), "zeros")

    def forward(self, x):
        if x.shape[-1] != self.weight.value.shape[0]:
            raise ValueError(f"input width {x.shape[-1]} != {self.weight.value.shape[0]}")
        self._save(x)
        return x @ self.weight.value + self.bias.value

    def backward(self, grad_out):
        (x,) = self._pop()
        d_in, d_out = self.weight.value.shape
        x2 = x.reshape(-1, d_in)
        g2 = grad_out.reshape(-1, d_out)
        self.weight.grad += x2.T @ g2
        self.bias.grad += g2.sum(axis=0)
        return grad_out @ self.weight.value.T


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    return 0.5 * x * (1.0 + special.erf(x / _SQRT2))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + special.erf(x / _SQRT2))
    return cdf + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


class GELU(Layer):
    def forward(self, x):
        self._save(x)
        return gelu(x)

    def backward(self, grad_out):
        (x,) = self._pop()
        return grad_out * gelu_grad(x)


class Mlp(Layer):
    """Two pointwise (1x1) projections with GELU between, on (B, C, H, W)."""

    _children = ("fc1", "fc2")

    def __init__(self, channels, hidden, dtype=NARROW):
        self.fc1 = Linear(channels, hidden, dtype)
        self.act = GELU()
        self.fc2 = Linear(hidden, channels, dtype)

    def forward(self, x):
        h = x.transpose(0, 2, 3, 1)
        h = self.fc2.forward(self.act.forward(self.fc1.forward(h)))
        return np.ascontiguousarray(h.transpose(0, 3, 1, 2))

    def backward(self, grad_out):
        g = grad_out.transpose(0, 2, 3, 1)
        g = self.fc1.backward(self.act.backward(self.fc2.backward(g)))
        return np.ascontiguousarray(g.transpose(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# normalization


def norm_channels(x, gamma, beta, eps=1e-5):
    """Normalize across channels at every (batch, position), then scale and shift."""
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ValueError(f"gamma/beta must have length {x.shape[1]}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return gamma[None, :, None, None] * xhat + beta[None, :, None, None], xhat, inv_std


class ChannelNorm(Layer):
    _params = ("gamma", "beta")

    def __init__(self, channels, eps=1e-5, dtype=NARROW):
        self.eps = eps
        self.gamma = Param(np.ones(channels, dtype), "ones")
        self.beta = Param(np.zeros(channels, dtype), "zeros")

    def forward(self, x):
        y, xhat, inv_std = norm_channels(x, self.gamma.value, self.beta.value, self.eps)
        self._save(xhat, inv_std)
        return y

    def backward(self, grad_out):
        xhat, inv_std = self._pop()
        self.gamma.grad += (grad_out * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += grad_out.sum(axis=(0, 2, 3))
        dxhat = grad_out * self.gamma.value[None, :, None, None]
        c = xhat.shape[1]
        return inv_std * (dxhat - dxhat.sum(axis=1, keepdims=True) / c
                          - xhat * (dxhat * xhat).sum(axis=1, keepdims=True) / c)


# ---------------------------------------------------------------------------
# pooling


class PoolMixer(Layer):
    """3x3 (by default) stride-1 average pool minus identity; padding is not counted."""

    def __init__(self, pool_size=3):
        self.k = pool_size

    def _counts(self, h, w, dtype):
        pad = self.k // 2
        ones = np.ones((1, 1, h, w), dtype)
        return _windows(ones, self.k, self.k, 1, pad).sum(axis=(-1, -2))

    def forward(self, x):
        pad = self.k // 2
        counts = self._counts(x.shape[2], x.shape[3], x.dtype)
        self._save(counts)
        pooled = _windows(x, self.k, self.k, 1, pad).sum(axis=(-1, -2)) / counts
        return pooled - x

    def backward(self, grad_out):
        (counts,) = self._pop()
        pad = self.k // 2
        # the window sum is self-adjoint for odd kernels with same padding
        spread = _windows(grad_out / counts, self.k, self.k, 1, pad).sum(axis=(-1, -2))
        return spread - grad_out


class Identity(Layer):
    def forward(self, x):
        self._save(True)
        return x

    def backward(self, grad_out):
        self._pop()
        return grad_out


# ---------------------------------------------------------------------------
# loss


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood over the batch and its gradient w.r.t. logits."""
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,) or np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must be {b} class indices in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_z
    loss = -log_p[np.arange(b), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(b), labels] -= 1.0
    return float(loss), grad / b


# ---------------------------------------------------------------------------
# finite differences


def _as_tuple(x):
    return x if isinstance(x, tuple) else (x,)


def finite_diff_check(layer, inputs, epsilon=1e-4, seed=0, rel_floor=1e-3):
    """Worst relative error between analytic and central-difference gradients.

    The layer output is reduced to a scalar through a fixed random projection.
    Every coordinate of every input and every parameter is perturbed. The
    relative error of one coordinate is ``|a - n| / max(|a|, |n|, s)`` where
    ``s`` is ``rel_floor`` times the largest analytic entry of that tensor
    (at least 1e-6 times the largest entry of any tensor, so gradients that
    vanish identically compare against the overall scale).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    inputs = tuple(np.array(a, copy=True) for a in _as_tuple(inputs))
    layer.zero_grad()
    out = layer.forward(*inputs)
    proj = np.random.default_rng(seed).standard_normal(out.shape).astype(out.dtype)
    analytic_in = _as_tuple(layer.backward(proj))
    params = layer.named_parameters()
    analytic = [g.copy() for g in analytic_in] + [p.grad.copy() for _, p in params]
    targets = list(inputs) + [p.value for _, p in params]
    for g in analytic:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite analytic gradient")
    global_scale = max((float(np.abs(g).max(initial=0.0)) for g in analytic), default=0.0)

    def objective():
        with no_grad():
            y = layer.forward(*inputs)
        if not np.all(np.isfinite(y)):
            raise FloatingPointError("non-finite output during finite differences")
        return float(np.sum(proj * y))

    worst = 0.0
    for arr, grad in zip(targets, analytic):
        flat = arr.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = objective()
            flat[i] = orig - epsilon
            down = objective()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * epsilon)
        a = grad.reshape(-1).astype(np.float64)
        floor = max(rel_floor * np.abs(a).max(initial=0.0), 1e-6 * global_scale, 1e-300)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        worst = max(worst, float(np.max(np.abs(a - numeric) / denom, initial=0.0)))
    return worst


# ---------------------------------------------------------------------------
# serialization

MAGIC = b"DFT1"


def tensor_to_bytes(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > 4:
        raise ValueError("containers hold at most 4 dimensions")
    shape = (1,) * (4 - arr.ndim) + arr.shape
    body = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    return MAGIC + struct.pack("<4Q", *shape) + body


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise ValueError("not a DFT1 tensor container")
    shape = struct.unpack("<4Q", blob[4:36])
    body = blob[36:]
    count = int(np.prod(shape))
    if count == 0:
        return np.zeros(shape, WIDE)
    width, rem = divmod(len(body), count)
    if rem or width not in (4, 8):
        raise ValueError("container body does not match its shape")
    dtype = np.dtype("<f4" if width == 4 else "<f8")
    return np.frombuffer(body, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def save_tensor(path, arr):
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())

