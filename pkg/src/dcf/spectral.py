"""Real 2-D FFT (radix-2, power-of-two sizes) with exact adjoints.

Convention: the forward transform is unnormalized, the inverse carries the
full 1/(H*W) factor, so irfft2(rfft2(x), H, W) == x. Half-spectra drop the
Hermitian-redundant columns and keep width W/2+1; they are stored as
complex128, i.e. interleaved float64 real/imaginary pairs in memory.

The adjoint pair (rfft2_backward / irfft2_backward) treats a half-spectrum as
the real vector of its stacked real and imaginary parts. Folding the dropped
Hermitian half onto the kept one makes the column weights uneven: bins in
self-conjugate columns (k_w = 0 and k_w = W/2) count once, all others twice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, make_op

__all__ = [
    "SpectrumTensor", "rfft2", "irfft2", "rfft2_backward", "irfft2_backward",
    "rfft2_as_channels", "irfft2_from_channels",
]

_bitrev_cache: dict = {}


def _require_pow2(n: int, what: str) -> None:
    if n < 1 or n & (n - 1):
        raise ValueError(f"{what} must be a power of two, got {n} "
                         "(radix-2 transform restriction)")


def _bitrev(n: int) -> np.ndarray:
    perm = _bitrev_cache.get(n)
    if perm is None:
        bits = n.bit_length() - 1
        idx = np.arange(n)
        perm = np.zeros(n, dtype=np.intp)
        for b in range(bits):
            perm |= ((idx >> b) & 1) << (bits - 1 - b)
        _bitrev_cache[n] = perm
    return perm


def _fft_last_axis(a: np.ndarray, inverse: bool) -> np.ndarray:
    """Iterative Cooley-Tukey along the last axis; n must be a power of two."""
    n = a.shape[-1]
    a = np.ascontiguousarray(a[..., _bitrev(n)], dtype=np.complex128)
    m = 1
    sign = 1j if inverse else -1j
    while m < n:
        tw = np.exp(sign * np.pi * np.arange(m) / m)     # exp(sign*2*pi*i*k/(2m))
        blocks = a.reshape(a.shape[:-1] + (n // (2 * m), 2 * m))
        even = blocks[..., :m]
        odd = blocks[..., m:] * tw
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(a.shape)
        m *= 2
    return a


def _fft2(a: np.ndarray, inverse: bool) -> np.ndarray:
    a = _fft_last_axis(a, inverse)
    a = _fft_last_axis(a.swapaxes(-1, -2), inverse).swapaxes(-1, -2)
    return a


@dataclass
class SpectrumTensor:
    """Half-spectrum of a real batch of maps: (B, C, H, W/2+1) complex bins."""

    values: np.ndarray   # complex128
    height: int          # H of the originating real signal
    width: int           # W of the originating real signal

    @property
    def shape(self):
        return self.values.shape

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.shape[-1] != self.width // 2 + 1:
            raise ValueError(
                f"half-spectrum width {self.values.shape[-1]} != {self.width // 2 + 1}")
        if self.values.shape[-2] != self.height:
            raise ValueError(
                f"half-spectrum height {self.values.shape[-2]} != {self.height}")


def rfft2(x: np.ndarray) -> SpectrumTensor:
    """Unnormalized forward transform over the two trailing (spatial) axes."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2], x.shape[-1]
    _require_pow2(h, "height")
    _require_pow2(w, "width")
    full = _fft_last_axis(x.astype(np.complex128), inverse=False)
    half = full[..., : w // 2 + 1]
    half = _fft_last_axis(half.swapaxes(-1, -2), inverse=False).swapaxes(-1, -2)
    return SpectrumTensor(np.ascontiguousarray(half), h, w)


def _hermitian_extend(s: SpectrumTensor) -> np.ndarray:
    """Rebuild the full (..., H, W) spectrum from the stored half."""
    h, w = s.height, s.width
    half = s.values
    full = np.empty(half.shape[:-1] + (w,), dtype=np.complex128)
    full[..., : w // 2 + 1] = half
    if w > 2:
        rows = (-np.arange(h)) % h
        cols = np.arange(w // 2 - 1, 0, -1)
        full[..., w // 2 + 1:] = np.conj(half[..., rows, :][..., :, cols])
    return full


def irfft2(s: SpectrumTensor, out_h: int, out_w: int) -> np.ndarray:
    """Normalized inverse of rfft2; irfft2(rfft2(x), H, W) reproduces x."""
    if out_h != s.height or out_w != s.width:
        raise ValueError(
            f"requested {out_h}x{out_w} but spectrum came from {s.height}x{s.width}")
    _require_pow2(out_h, "height")
    _require_pow2(out_w, "width")
    full = _hermitian_extend(s)
    x = _fft2(full, inverse=True) / (out_h * out_w)
    return np.ascontiguousarray(x.real)


def _fold_weights(w: int) -> np.ndarray:
    """Per-column multiplicity of half-spectrum bins in the full spectrum."""
    c = np.full(w // 2 + 1, 2.0)
    c[0] = 1.0
    c[-1] = 1.0          # k_w = W/2 (W is even for powers of two >= 2)
    if w == 1:
        c[:] = 1.0
    return c


def rfft2_backward(cotangent: SpectrumTensor) -> np.ndarray:
    """Adjoint of rfft2: half-spectrum cotangent -> gradient on the real input."""
    h, w = cotangent.height, cotangent.width
    weighted = cotangent.values / _fold_weights(w)
    folded = SpectrumTensor(weighted, h, w)
    return irfft2(folded, h, w) * (h * w)


def irfft2_backward(cotangent: np.ndarray, out_h: int, out_w: int) -> SpectrumTensor:
    """Adjoint of irfft2: real-image cotangent -> half-spectrum gradient."""
    spec = rfft2(np.asarray(cotangent, dtype=np.float64))
    if spec.height != out_h or spec.width != out_w:
        raise ValueError("cotangent spatial size does not match the transform size")
    vals = spec.values * (_fold_weights(out_w) / (out_h * out_w))
    return SpectrumTensor(vals, out_h, out_w)


# -- tape-recorded wrappers used by the Fourier Unit -------------------------

def rfft2_as_channels(x: Tensor) -> Tensor:
    """Differentiable rfft2 that returns (B, 2C, H, W/2+1): real parts then imag."""
    b, c = x.shape[0], x.shape[1]
    s = rfft2(x.data)
    out = np.concatenate([s.values.real, s.values.imag], axis=1)

    def back(g):
        cot = SpectrumTensor(g[:, :c] + 1j * g[:, c:], s.height, s.width)
        return (rfft2_backward(cot),)

    return make_op(out, (x,), back)


def irfft2_from_channels(y: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable irfft2 of a stacked-(real, imag) channel tensor."""
    c2 = y.shape[1]
    if c2 % 2:
        raise ValueError(f"stacked spectrum needs an even channel count, got {c2}")
    c = c2 // 2
    s = SpectrumTensor(y.data[:, :c] + 1j * y.data[:, c:], out_h, out_w)
    out = irfft2(s, out_h, out_w)

    def back(g):
        gs = irfft2_backward(g, out_h, out_w)
        return (np.concatenate([gs.values.real, gs.values.imag], axis=1),)

    return make_op(out, (y,), back)
