"""Hot loops for the discrete Fourier transform, in two interchangeable flavours.

Every public kernel works on a batch of rows: inputs are ``(m, n)`` float64
arrays holding the real and imaginary parts, and the transform runs along the
last axis. ``*_nb`` functions are the numba loops; ``*_np`` functions are the
vectorised numpy fallbacks. The unsuffixed names are bound to whichever
backend :mod:`ftimexer._accel` selected.
"""
import numpy as np

from ._accel import HAS_NUMBA, njit

__all__ = [
    "is_power_of_two",
    "dft_direct_rows",
    "fft_radix2_rows",
    "dft_rows",
]


# Largest length for which the automatic choice uses the compiled direct DFT.
DIRECT_NUMBA_MAX_N = 8


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


# ---------------------------------------------------------------- numba loops


@njit(cache=True, nogil=True)
def _dft_direct_nb(re, im, sign):
    m, n = re.shape
    out_re = np.empty((m, n))
    out_im = np.empty((m, n))
    cos_kt = np.empty((n, n))
    sin_kt = np.empty((n, n))
    for k in range(n):
        for t in range(n):
            ang = 2.0 * np.pi * ((k * t) % n) / n
            cos_kt[k, t] = np.cos(ang)
            sin_kt[k, t] = sign * np.sin(ang)
    for r in range(m):
        for k in range(n):
            acc_re = 0.0
            acc_im = 0.0
            for t in range(n):
                c = cos_kt[k, t]
                s = sin_kt[k, t]
                acc_re += re[r, t] * c - im[r, t] * s
                acc_im += re[r, t] * s + im[r, t] * c
            out_re[r, k] = acc_re
            out_im[r, k] = acc_im
    return out_re, out_im


@njit(cache=True, nogil=True)
def _fft_radix2_nb(re, im, sign):
    m, n = re.shape
    out_re = np.empty((m, n))
    out_im = np.empty((m, n))
    bits = 0
    while (1 << bits) < n:
        bits += 1
    rev = np.zeros(n, dtype=np.int64)
    for i in range(n):
        x = i
        y = 0
        for _ in range(bits):
            y = (y << 1) | (x & 1)
            x >>= 1
        rev[i] = y
    for r in range(m):
        for i in range(n):
            out_re[r, rev[i]] = re[r, i]
            out_im[r, rev[i]] = im[r, i]
        size = 2
        while size <= n:
            half = size // 2
            for j in range(half):
                ang = 2.0 * np.pi * j / size
                wr = np.cos(ang)
                wi = sign * np.sin(ang)
                for start in range(0, n, size):
                    a = start + j
                    b = a + half
                    tr = out_re[r, b] * wr - out_im[r, b] * wi
                    ti = out_re[r, b] * wi + out_im[r, b] * wr
                    out_re[r, b] = out_re[r, a] - tr
                    out_im[r, b] = out_im[r, a] - ti
                    out_re[r, a] += tr
                    out_im[r, a] += ti
            size *= 2
    return out_re, out_im


# ------------------------------------------------------------ numpy fallbacks


def _twiddles(n: int, sign: float):
    idx = np.arange(n)
    ang = 2.0 * np.pi * ((np.outer(idx, idx) % n) / n)
    return np.cos(ang), sign * np.sin(ang)


def _dft_direct_np(re, im, sign):
    c, s = _twiddles(re.shape[1], sign)
    # c and s are symmetric, so row @ W equals the sum over t of x_t * W[t, k].
    return re @ c - im @ s, re @ s + im @ c


def _fft_radix2_np(re, im, sign):
    m, n = re.shape
    bits = n.bit_length() - 1
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((np.arange(n) >> b) & 1) << (bits - 1 - b)
    xr = re[:, rev].copy()
    xi = im[:, rev].copy()
    size = 2
    while size <= n:
        half = size // 2
        ang = 2.0 * np.pi * np.arange(half) / size
        wr, wi = np.cos(ang), sign * np.sin(ang)
        xr = xr.reshape(m, n // size, size)
        xi = xi.reshape(m, n // size, size)
        ar, ai = xr[:, :, :half].copy(), xi[:, :, :half].copy()
        br, bi = xr[:, :, half:], xi[:, :, half:]
        tr = br * wr - bi * wi
        ti = br * wi + bi * wr
        xr = np.concatenate([ar + tr, ar - tr], axis=2).reshape(m, n)
        xi = np.concatenate([ai + ti, ai - ti], axis=2).reshape(m, n)
        size *= 2
    return xr, xi


# ------------------------------------------------------------------- dispatch


def _prep(re, im):
    re = np.ascontiguousarray(re, dtype=np.float64)
    if im is None:
        im = np.zeros_like(re)
    else:
        im = np.ascontiguousarray(im, dtype=np.float64)
    if re.ndim != 2 or re.shape != im.shape:
        raise ValueError(f"expected matching 2-D arrays, got {re.shape} and {im.shape}")
    if re.shape[1] == 0:
        raise ValueError("transform length must be at least 1")
    return re, im


def dft_direct_rows(re, im=None, inverse=False, backend=None):
    """Direct O(n^2) DFT of every row. ``inverse`` flips the exponent sign only."""
    re, im = _prep(re, im)
    sign = 1.0 if inverse else -1.0
    # Past a handful of points the twiddle matmul (BLAS) beats the scalar loop.
    if _use_numba(backend) and (backend == "numba" or re.shape[1] <= DIRECT_NUMBA_MAX_N):
        return _dft_direct_nb(re, im, sign)
    return _dft_direct_np(re, im, sign)


def fft_radix2_rows(re, im=None, inverse=False, backend=None):
    """Iterative decimation-in-time radix-2 FFT of every row."""
    re, im = _prep(re, im)
    if not is_power_of_two(re.shape[1]):
        raise ValueError(f"radix-2 FFT needs a power-of-two length, got {re.shape[1]}")
    sign = 1.0 if inverse else -1.0
    if _use_numba(backend):
        return _fft_radix2_nb(re, im, sign)
    return _fft_radix2_np(re, im, sign)


def dft_rows(re, im=None, inverse=False, backend=None):
    """Unnormalised DFT along the last axis, radix-2 when the length allows."""
    re, im = _prep(re, im)
    if is_power_of_two(re.shape[1]):
        return fft_radix2_rows(re, im, inverse, backend)
    return dft_direct_rows(re, im, inverse, backend)


def _use_numba(backend) -> bool:
    if backend is None:
        return HAS_NUMBA
    if backend == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("numba backend requested but unavailable")
        return True
    if backend == "numpy":
        return False
    raise ValueError(f"unknown backend {backend!r}")
