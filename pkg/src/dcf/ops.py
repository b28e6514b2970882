"""Differentiable operators: convolutions, pooling, normalization, reductions.

Convolutions are cross-correlations (no kernel flip) evaluated as one GEMM
over an im2col patch matrix; their backward passes reuse the same patch
matrix plus a col2im scatter. All padding is asymmetric (top, bottom, left,
right) because Table-style kernel-4 stride-1 layers need uneven zero padding
to keep spatial sizes fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, make_op

__all__ = [
    "ConvSpec", "conv2d", "conv_transpose2d", "avg_pool2", "activation",
    "relu", "tanh", "batch_norm", "concat_channels", "split_channels",
    "channel_slice", "softmax_channels", "sum_all", "mean_all", "abs_all",
    "mean_abs", "gram", "quadrant_stack", "tile_2x2",
]


def _pad4(padding) -> tuple:
    if isinstance(padding, int):
        return (padding,) * 4
    t = tuple(int(p) for p in padding)
    if len(t) != 4:
        raise ValueError(f"padding must be int or (top, bottom, left, right), got {padding!r}")
    return t


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a conv layer; output sizes are a pure function of this."""

    kernel: tuple           # (kh, kw)
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: tuple = (0, 0, 0, 0)   # top, bottom, left, right
    transpose: bool = False
    output_padding: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "padding", _pad4(self.padding))
        kh, kw = self.kernel
        if kh < 1 or kw < 1 or self.stride < 1:
            raise ValueError("kernel and stride must be positive")
        if any(p < 0 for p in self.padding):
            raise ValueError("padding entries must be >= 0")
        if self.transpose:
            if not 0 <= self.output_padding < self.stride:
                raise ValueError(f"output_padding must lie in [0, stride), got {self.output_padding}")
        elif self.output_padding:
            raise ValueError("output_padding only applies to transposed convs")

    def out_size(self, h: int, w: int) -> tuple:
        kh, kw = self.kernel
        pt, pb, pl, pr = self.padding
        if self.transpose:
            oh = (h - 1) * self.stride - (pt + pb) + kh + self.output_padding
            ow = (w - 1) * self.stride - (pl + pr) + kw + self.output_padding
        else:
            oh = (h + pt + pb - kh) // self.stride + 1
            ow = (w + pl + pr - kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"spec {self} collapses {h}x{w} input to {oh}x{ow}")
        return oh, ow

    def weight_shape(self) -> tuple:
        kh, kw = self.kernel
        if self.transpose:
            return (self.in_channels, self.out_channels, kh, kw)
        return (self.out_channels, self.in_channels, kh, kw)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Patch matrix of shape (C*kh*kw, B*oh*ow) from a padded (B,C,Hp,Wp) array."""
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]          # (B, C, oh, ow, kh, kw)
    b, c, oh, ow = windows.shape[:4]
    cols = windows.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, b * oh * ow)
    return np.ascontiguousarray(cols)


def _col2im(cols: np.ndarray, b: int, c: int, hp: int, wp: int,
            kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch columns back onto the padded grid."""
    out = np.zeros((b, c, hp, wp))
    blocks = cols.reshape(c, kh, kw, b, oh, ow)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                blocks[:, i, j].transpose(1, 0, 2, 3)
    return out


def _check_conv_args(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor):
    if x.ndim != 4:
        raise ValueError(f"conv input must be rank-4 (B,C,H,W), got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(
            f"conv input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape():
        raise ValueError(
            f"conv weight shape {weight.shape} does not match spec {spec.weight_shape()}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ValueError(
            f"conv bias shape {bias.shape} must be ({spec.out_channels},)")


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor = None) -> Tensor:
    """Strided cross-correlation with asymmetric zero padding."""
    if spec.transpose:
        raise ValueError("spec is transposed; use conv_transpose2d")
    _check_conv_args(x, spec, weight, bias)
    b, c, h, w = x.shape
    kh, kw = spec.kernel
    pt, pb, pl, pr = spec.padding
    s = spec.stride
    oh, ow = spec.out_size(h, w)

    xp = np.zeros((b, c, h + pt + pb, w + pl + pr))
    xp[:, :, pt:pt + h, pl:pl + w] = x.data
    cols = _im2col(xp, kh, kw, s)
    w2 = weight.data.reshape(spec.out_channels, c * kh * kw)
    out2 = w2 @ cols                                     # (OC, B*oh*ow)
    out = np.ascontiguousarray(out2.reshape(spec.out_channels, b, oh, ow).transpose(1, 0, 2, 3))
    if bias is not None:
        out += bias.data[None, :, None, None]

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(spec.out_channels, b * oh * ow)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = w2.T @ g2
            gxp = _col2im(gcols, b, c, xp.shape[2], xp.shape[3], kh, kw, s, oh, ow)
            gx = gxp[:, :, pt:pt + h, pl:pl + w]
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_op(out, inputs, back)


def conv_transpose2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor = None) -> Tensor:
    """Fractionally-strided adjoint of conv2d; weight layout (Cin, Cout, kh, kw)."""
    if not spec.transpose:
        raise ValueError("spec is not transposed; use conv2d")
    _check_conv_args(x, spec, weight, bias)
    b, c, h, w = x.shape
    kh, kw = spec.kernel
    pt, pb, pl, pr = spec.padding
    s, op = spec.stride, spec.output_padding
    oh, ow = spec.out_size(h, w)
    full_h, full_w = (h - 1) * s + kh + op, (w - 1) * s + kw + op

    x2 = x.data.transpose(1, 0, 2, 3).reshape(c, b * h * w)
    w2 = weight.data.reshape(c, spec.out_channels * kh * kw)
    cols = w2.T @ x2                                     # (OC*kh*kw, B*h*w)
    buf = _col2im(cols, b, spec.out_channels, full_h, full_w, kh, kw, s, h, w)
    out = np.ascontiguousarray(buf[:, :, pt:pt + oh, pl:pl + ow])
    if bias is not None:
        out += bias.data[None, :, None, None]

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gbuf = np.zeros((b, spec.out_channels, full_h, full_w))
        gbuf[:, :, pt:pt + oh, pl:pl + ow] = g
        gcols = _im2col(gbuf, kh, kw, s)                 # (OC*kh*kw, B*h*w)
        gx = gw = gb = None
        if x.requires_grad:
            gx2 = w2 @ gcols
            gx = gx2.reshape(c, b, h, w).transpose(1, 0, 2, 3)
        if weight.requires_grad:
            gw = (x2 @ gcols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_op(out, inputs, back)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 mean pooling with stride 2; spatial dims must be even."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def back(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (gx,)

    return make_op(out, (x,), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_op(y, (x,), lambda g: (g * (1.0 - y * y),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation kind {kind!r} (expected 'relu' or 'tanh')")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (batch, height, width).

    Training mode normalizes with batch statistics and updates the running
    buffers in place (biased variance); eval mode uses the running buffers.
    """
    if x.ndim != 4:
        raise ValueError(f"batch_norm input must be rank-4, got shape {x.shape}")
    axes = (0, 2, 3)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    n = x.shape[0] * x.shape[2] * x.shape[3]

    def back(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).sum(axis=axes)
        if beta.requires_grad:
            gbeta = g.sum(axis=axes)
        if x.requires_grad:
            gi = gamma.data[None, :, None, None] * inv[None, :, None, None]
            if training:
                gsum = g.sum(axis=axes)[None, :, None, None]
                gxhat = (g * xhat).sum(axis=axes)[None, :, None, None]
                gx = gi * (g - gsum / n - xhat * gxhat / n)
            else:
                gx = gi * g
        return gx, ggamma, gbeta

    return make_op(out, (x, gamma, beta), back)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels shape mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_op(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def channel_slice(x: Tensor, lo: int, hi: int) -> Tensor:
    def back(g):
        gx = np.zeros_like(x.data)
        gx[:, lo:hi] = g
        return (gx,)
    return make_op(x.data[:, lo:hi].copy(), (x,), back)


def split_channels(x: Tensor, first: int) -> tuple:
    """Split along channels into (x[:, :first], x[:, first:])."""
    return channel_slice(x, 0, first), channel_slice(x, first, x.shape[1])


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1 (the kernel-weight axis of a kernel field)."""
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return make_op(y, (x,), back)


def sum_all(x: Tensor) -> Tensor:
    return make_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return make_op(np.asarray(x.data.mean()), (x,),
                   lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def abs_all(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return make_op(np.abs(x.data), (x,), lambda g: (g * s,))


def mean_abs(x: Tensor) -> Tensor:
    return mean_all(abs_all(x))


def gram(x: Tensor) -> Tensor:
    """Channel Gram matrix F F^T / (C*H*W) of a (B,C,H,W) feature map."""
    b, c, h, w = x.shape
    f = x.data.reshape(b, c, h * w)
    norm = 1.0 / (c * h * w)
    out = np.matmul(f, f.transpose(0, 2, 1)) * norm

    def back(g):
        gf = np.matmul(g + g.transpose(0, 2, 1), f) * norm
        return (gf.reshape(b, c, h, w),)

    return make_op(out, (x,), back)


def quadrant_stack(x: Tensor) -> Tensor:
    """Stack the 2x2 spatial quadrants along channels: (B,C,H,W) -> (B,4C,H/2,W/2).

    Order: (top, bottom) split first, then (left, right), matching a
    channel-concat of row halves followed by column halves.
    """
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"quadrant_stack needs even spatial dims, got {h}x{w}")
    hh, hw = h // 2, w // 2
    rows = x.data.reshape(b, c, 2, hh, w).transpose(0, 2, 1, 3, 4).reshape(b, 2 * c, hh, w)
    out = rows.reshape(b, 2 * c, hh, 2, hw).transpose(0, 3, 1, 2, 4).reshape(b, 4 * c, hh, hw)

    def back(g):
        gr = g.reshape(b, 2, 2 * c, hh, hw).transpose(0, 2, 3, 1, 4).reshape(b, 2 * c, hh, w)
        gx = gr.reshape(b, 2, c, hh, w).transpose(0, 2, 1, 3, 4).reshape(b, c, h, w)
        return (gx,)

    return make_op(np.ascontiguousarray(out), (x,), back)


def tile_2x2(x: Tensor) -> Tensor:
    """Tile a map 2x2 spatially: (B,C,h,w) -> (B,C,2h,2w)."""
    out = np.tile(x.data, (1, 1, 2, 2))
    b, c, h, w = x.shape

    def back(g):
        g4 = g.reshape(b, c, 2, h, 2, w)
        return (g4.sum(axis=(2, 4)),)

    return make_op(out, (x,), back)
