"""Deformable convolution (v1): learned per-position offsets, bilinear sampling.

Offset fields have shape (B, 2N, H, W) for a kh x kw kernel with N = kh * kw
sampling points, enumerated row-major over the kernel grid. Channel 2n holds
the vertical displacement of point n and channel 2n + 1 the horizontal one,
both in input pixels.

Sampling is expressed as a sparse matrix per kernel point (four bilinear taps
per row), so the same matrix serves the gather in forward and, transposed,
the scatter in backward.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import sparse

from .tensor import Conv2d, Layer, NARROW, Param, conv2d_forward


def bilinear_sample(x, b, c, py, px):
    """Value of x[b, c] at fractional (py, px); pixels outside the map read 0."""
    h, w = x.shape[2], x.shape[3]
    y0, x0 = math.floor(py), math.floor(px)
    ly, lx = py - y0, px - x0

    def at(yy, xx):
        if 0 <= yy < h and 0 <= xx < w:
            return float(x[b, c, yy, xx])
        return 0.0

    return ((1 - ly) * (1 - lx) * at(y0, x0) + (1 - ly) * lx * at(y0, x0 + 1)
            + ly * (1 - lx) * at(y0 + 1, x0) + ly * lx * at(y0 + 1, x0 + 1))


def offset_channels(kh, kw):
    return 2 * kh * kw


def get_offset(offsets, n):
    """(dy, dx) planes of kernel point n."""
    return offsets[:, 2 * n], offsets[:, 2 * n + 1]


def set_offset(offsets, n, dy, dx):
    offsets[:, 2 * n] = dy
    offsets[:, 2 * n + 1] = dx


def predict_offsets(x, weight, bias):
    """Stride-1, same-padded conv producing the offset field."""
    k = weight.shape[-1]
    return conv2d_forward(x, weight, bias, stride=1, padding=k // 2)


def _sampling(offsets, n, i, j, pad, h, w, derivs):
    """Sparse bilinear matrices for kernel point n at grid cell (i, j).

    Rows and columns both index (batch, y, x) flattened; returns S and, when
    ``derivs``, the matrices of dS/dy and dS/dx (as functions of position).
    """
    b = offsets.shape[0]
    dtype = offsets.dtype
    ys = np.arange(h, dtype=dtype)[None, :, None]
    xs = np.arange(w, dtype=dtype)[None, None, :]
    py = ys + (i - pad) + offsets[:, 2 * n]
    px = xs + (j - pad) + offsets[:, 2 * n + 1]
    y0 = np.floor(py)
    x0 = np.floor(px)
    ly = (py - y0).reshape(-1)
    lx = (px - x0).reshape(-1)
    y0 = y0.astype(np.int64).reshape(-1)
    x0 = x0.astype(np.int64).reshape(-1)
    base = np.repeat(np.arange(b, dtype=np.int64) * (h * w), h * w)

    rows = b * h * w
    cols = np.empty((rows, 4), np.int64)
    valid = np.empty((rows, 4), dtype)
    for t, (dy_, dx_) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        yy, xx = y0 + dy_, x0 + dx_
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        cols[:, t] = base + np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)
        valid[:, t] = ok
    if rows * 4 < 2**31:
        cols = cols.astype(np.int32)
    indptr = np.arange(0, 4 * rows + 1, 4, dtype=cols.dtype)
    one = dtype.type(1)

    def build(data):
        return sparse.csr_matrix(((data * valid).reshape(-1), cols.reshape(-1), indptr),
                                 shape=(rows, rows))

    s = build(np.stack([(one - ly) * (one - lx), (one - ly) * lx,
                        ly * (one - lx), ly * lx], axis=1))
    if not derivs:
        return s
    dsy = build(np.stack([-(one - lx), -lx, one - lx, lx], axis=1))
    dsx = build(np.stack([-(one - ly), one - ly, -ly, ly], axis=1))
    return s, dsy, dsx


def _check(x, offsets, weight, depthwise):
    b, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError("deformable kernels must be square with odd size")
    if (ci != 1 or o != c) if depthwise else ci != c:
        raise ValueError(f"weight {weight.shape} does not fit input {x.shape}")
    if offsets.shape != (b, offset_channels(kh, kw), h, w):
        raise ValueError(f"offset field {offsets.shape} does not fit kernel {kh}x{kw} "
                         f"on input {x.shape}")


def deform_conv2d_forward(x, offsets, weight, bias=None, depthwise=False):
    """out[b, o, p] = sum over c, n of weight[o, c, n] * x[b, c](p + p_n + offset_n(p)) + bias.

    Stride 1 with same padding; the weight depends on the kernel point only.
    """
    _check(x, offsets, weight, depthwise)
    b, c, h, w = x.shape
    o, _, k, _ = weight.shape
    pad = k // 2
    xflat = x.transpose(0, 2, 3, 1).reshape(b * h * w, c)
    # (k, k, C, O) contiguous so each matmul hits BLAS
    taps = np.ascontiguousarray(weight.transpose(2, 3, 1, 0))
    out = np.zeros((b * h * w, o), dtype=x.dtype)
    for n in range(k * k):
        i, j = divmod(n, k)
        sampled = _sampling(offsets, n, i, j, pad, h, w, derivs=False) @ xflat
        if depthwise:
            out += sampled * taps[i, j, 0]
        else:
            out += sampled @ taps[i, j]
    if bias is not None:
        out += bias
    return np.ascontiguousarray(out.reshape(b, h, w, o).transpose(0, 3, 1, 2))


def deform_conv2d_backward(grad_out, x, offsets, weight, depthwise=False):
    """Returns (grad_x, grad_offsets, grad_weight, grad_bias).

    Offset gradients use the one-sided derivative of bilinear interpolation
    (the cell selected by floor), so they are exact away from integer lines.
    """
    _check(x, offsets, weight, depthwise)
    b, c, h, w = x.shape
    o, _, k, _ = weight.shape
    if grad_out.shape != (b, o, h, w):
        raise ValueError(f"grad_out {grad_out.shape} != forward output {(b, o, h, w)}")
    pad = k // 2
    xflat = x.transpose(0, 2, 3, 1).reshape(b * h * w, c)
    g = grad_out.transpose(0, 2, 3, 1).reshape(b * h * w, o)
    taps = np.ascontiguousarray(weight.transpose(2, 3, 0, 1))  # (k, k, O, C)
    grad_x = np.zeros_like(xflat)
    grad_w = np.zeros_like(weight)
    grad_off = np.zeros_like(offsets)
    for n in range(k * k):
        i, j = divmod(n, k)
        s, dsy, dsx = _sampling(offsets, n, i, j, pad, h, w, derivs=True)
        sampled = s @ xflat
        if depthwise:
            grad_w[:, 0, i, j] = (g * sampled).sum(axis=0)
            g_sampled = g * taps[i, j, :, 0]
        else:
            grad_w[:, :, i, j] = g.T @ sampled
            g_sampled = g @ taps[i, j]
        grad_x += s.T @ g_sampled
        grad_off[:, 2 * n] = ((dsy @ xflat) * g_sampled).sum(axis=1).reshape(b, h, w)
        grad_off[:, 2 * n + 1] = ((dsx @ xflat) * g_sampled).sum(axis=1).reshape(b, h, w)
    grad_x = np.ascontiguousarray(grad_x.reshape(b, h, w, c).transpose(0, 3, 1, 2))
    return grad_x, grad_off, grad_w, g.sum(axis=0)


class DeformConvCore(Layer):
    """Deformable convolution with the offset field supplied by the caller."""

    _params = ("weight", "bias")

    def __init__(self, in_channels, out_channels, kernel=3, depthwise=False, dtype=NARROW):
        self.depthwise = depthwise
        shape = (out_channels, 1 if depthwise else in_channels, kernel, kernel)
        self.weight = Param(np.zeros(shape, dtype))
        self.bias = Param(np.zeros(out_channels, dtype), "zeros")

    def forward(self, x, offsets):
        self._save(x, offsets)
        return deform_conv2d_forward(x, offsets, self.weight.value, self.bias.value,
                                     self.depthwise)

    def backward(self, grad_out):
        x, offsets = self._pop()
        gx, goff, gw, gb = deform_conv2d_backward(grad_out, x, offsets, self.weight.value,
                                                  self.depthwise)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx, goff


class DeformConv2d(Layer):
    """Offset predictor plus deformable convolution; channel preserving by default.

    The predictor starts at exactly zero, so a fresh layer computes the plain
    convolution of its main weights.
    """

    _children = ("offset_conv", "core")

    def __init__(self, in_channels, out_channels=None, kernel=3, depthwise=False, dtype=NARROW):
        out_channels = out_channels or in_channels
        self.offset_conv = Conv2d(in_channels, offset_channels(kernel, kernel), kernel,
                                  stride=1, padding=kernel // 2, dtype=dtype, init="zeros")
        self.core = DeformConvCore(in_channels, out_channels, kernel, depthwise, dtype)

    def forward(self, x):
        offsets = self.offset_conv.forward(x)
        return self.core.forward(x, offsets)

    def backward(self, grad_out):
        gx, goff = self.core.backward(grad_out)
        return gx + self.offset_conv.backward(goff)
