"""3-D discrete Fourier transforms.

Mixed-radix decimation-in-time FFT vectorised over all lines of an axis, with
Bluestein's chirp-z for lengths carrying a large prime factor. Forward
transforms are unnormalised, the inverse carries the full ``1/N``; the DC term
sits at index ``(0, 0, 0)``.

``dft3_naive`` evaluates the DFT sum directly and exists only as a test
oracle.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .volume import ComplexVolume, Volume

MAX_VOXELS = 2 ** 31 - 1
NAIVE_MAX_VOXELS = 4096
# primes up to this size are transformed with a dense DFT matrix
_DIRECT_MAX = 16


class FftError(ValueError):
    pass


@lru_cache(maxsize=None)
def _smallest_factor(n):
    if n % 4 == 0 and n > 4:
        return 4
    f = 2
    while f * f <= n:
        if n % f == 0:
            return f
        f += 1
    return n


@lru_cache(maxsize=None)
def _dft_matrix(n, sign):
    j = np.arange(n)
    return np.exp(sign * 2j * np.pi * np.outer(j, j) / n)


@lru_cache(maxsize=None)
def _twiddles(n, p, sign):
    m = n // p
    return np.exp(sign * 2j * np.pi * np.outer(np.arange(p), np.arange(m)) / n)


@lru_cache(maxsize=None)
def _chirp(n, sign):
    k = np.arange(n, dtype=np.int64)
    # reduce k^2 mod 2n before scaling to keep the phase accurate
    return np.exp(sign * 1j * np.pi * ((k * k) % (2 * n)) / n)


@lru_cache(maxsize=None)
def _bluestein_kernel(n, sign, m):
    c = _chirp(n, sign)
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(c)
    b[m - n + 1:] = np.conj(c[1:])[::-1]
    return _fft_last(b, -1)


def _bluestein(x, sign):
    n = x.shape[-1]
    m = 1
    while m < 2 * n - 1:
        m *= 2
    c = _chirp(n, sign)
    a = np.zeros(x.shape[:-1] + (m,), dtype=np.complex128)
    a[..., :n] = x * c
    conv = _fft_last(_fft_last(a, -1) * _bluestein_kernel(n, sign, m), 1) / m
    return conv[..., :n] * c


def _fft_last(x, sign):
    """Unnormalised DFT along the last axis with kernel ``exp(sign*2*pi*i*jk/n)``."""
    n = x.shape[-1]
    if n == 1:
        return np.array(x, dtype=np.complex128, copy=True)
    p = _smallest_factor(n)
    if p == n:
        if n <= _DIRECT_MAX:
            return np.asarray(x, dtype=np.complex128) @ _dft_matrix(n, sign)
        return _bluestein(x, sign)
    m = n // p
    lead = x.shape[:-1]
    # x[..., j*p + r] -> sub[..., r, j]
    sub = np.asarray(x, dtype=np.complex128).reshape(lead + (m, p))
    sub = np.swapaxes(sub, -1, -2)
    y = _fft_last(sub, sign) * _twiddles(n, p, sign)
    # X[q*m + k] = sum_r W_p^{rq} y[r, k]
    return (_dft_matrix(p, sign) @ y).reshape(lead + (n,))


def _transform(arr, sign):
    out = np.asarray(arr, dtype=np.complex128)
    for axis in range(out.ndim):
        moved = np.moveaxis(out, axis, -1)
        out = np.moveaxis(_fft_last(moved, sign), -1, axis)
    return out


def _validate(shape):
    if len(shape) != 3 or any(n < 1 for n in shape):
        raise FftError(f"expected three positive dimensions, got {shape}")
    if int(np.prod(shape, dtype=object)) > MAX_VOXELS:
        raise FftError(f"volume of shape {shape} exceeds the {MAX_VOXELS}-voxel limit")


def fftn_array(a):
    """Forward unnormalised 3-D DFT of an array."""
    _validate(np.shape(a))
    return _transform(a, -1)


def ifftn_array(a):
    """Inverse 3-D DFT of an array, normalised by ``1/N``."""
    shape = np.shape(a)
    _validate(shape)
    return _transform(a, 1) / float(np.prod(shape))


@dataclass(frozen=True)
class FftPlan:
    """A direction and shape; plans are stateless and shareable.

    Twiddle tables live in module-level caches keyed by length, so building a
    plan is free and reuse across threads is safe.
    """

    dims: tuple
    direction: str = "forward"

    def __post_init__(self):
        _validate(tuple(self.dims))
        if self.direction not in ("forward", "inverse"):
            raise FftError(f"direction must be 'forward' or 'inverse', got {self.direction!r}")

    @property
    def scale(self):
        return 1.0 if self.direction == "forward" else 1.0 / float(np.prod(self.dims))

    def __call__(self, a):
        if tuple(np.shape(a)) != tuple(self.dims):
            raise FftError(f"plan built for {tuple(self.dims)} applied to {np.shape(a)}")
        if self.direction == "forward":
            return _transform(a, -1)
        return _transform(a, 1) * self.scale


def fft3(v: Volume | ComplexVolume) -> ComplexVolume:
    """Forward unnormalised 3-D DFT."""
    return ComplexVolume(FftPlan(v.dims, "forward")(v.data), v.spacing)


def ifft3(k: ComplexVolume) -> ComplexVolume:
    """Inverse 3-D DFT with ``1/N`` normalisation."""
    return ComplexVolume(FftPlan(k.dims, "inverse")(k.data), k.spacing)


def dft3_naive(v: Volume | ComplexVolume, inverse=False) -> ComplexVolume:
    """Direct evaluation of the triple DFT sum (test oracle, O(N^2)).

    Refuses volumes above 4096 voxels.
    """
    data = np.asarray(v.data, dtype=np.complex128)
    nx, ny, nz = data.shape
    N = nx * ny * nz
    if N > NAIVE_MAX_VOXELS:
        raise FftError(f"naive DFT limited to {NAIVE_MAX_VOXELS} voxels, got {N}")
    sign = 1.0 if inverse else -1.0
    gx, gy, gz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    pos = np.stack([gx.ravel() / nx, gy.ravel() / ny, gz.ravel() / nz])
    freq = np.stack([gx.ravel(), gy.ravel(), gz.ravel()]).astype(np.float64)
    flat = data.ravel()
    out = np.empty(N, dtype=np.complex128)
    step = 256
    for start in range(0, N, step):
        f = freq[:, start:start + step]
        phase = f.T @ pos  # (chunk, N) in cycles
        out[start:start + step] = np.exp(sign * 2j * np.pi * phase) @ flat
    if inverse:
        out /= N
    return ComplexVolume(out.reshape(nx, ny, nz), v.spacing)
