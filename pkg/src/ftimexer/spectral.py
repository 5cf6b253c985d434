"""Discrete Fourier analysis used by the frequency branch.

Bin ``k`` of a spectrum holds ``sum_t x_t * exp(-2j*pi*k*t/n)``. The inverse
carries the ``1/n`` factor.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels

__all__ = [
    "ComplexSpectrum",
    "dft_forward",
    "dft_direct",
    "amplitude_phase",
    "reconstruct",
    "reconstruct_rows",
    "dft_rows",
    "AMPLITUDE_FLOOR",
]

# Below this modulus the amplitude gradient is taken to be zero.
AMPLITUDE_FLOOR = 1e-12


@dataclass(frozen=True)
class ComplexSpectrum:
    real: np.ndarray
    imag: np.ndarray

    def __post_init__(self):
        if self.real.shape != self.imag.shape or self.real.ndim != 1:
            raise ValueError("real and imaginary parts must be 1-D arrays of equal length")

    def __len__(self):
        return self.real.shape[0]

    def as_complex(self) -> np.ndarray:
        return self.real + 1j * self.imag


def _as_row(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-D sequence, got shape {x.shape}")
    if x.shape[0] == 0:
        raise ValueError("cannot transform an empty sequence")
    return x[None, :]


def dft_forward(x, backend=None) -> ComplexSpectrum:
    """DFT of a real sequence; radix-2 for power-of-two lengths, direct otherwise."""
    re, im = kernels.dft_rows(_as_row(x), backend=backend)
    return ComplexSpectrum(re[0], im[0])


def dft_direct(x, backend=None) -> ComplexSpectrum:
    """Direct-summation DFT, kept as the reference for the fast path."""
    re, im = kernels.dft_direct_rows(_as_row(x), backend=backend)
    return ComplexSpectrum(re[0], im[0])


def amplitude_phase(s: ComplexSpectrum):
    """Per-bin modulus and argument; the argument lies in (-pi, pi]."""
    amp = np.hypot(s.real, s.imag)
    # atan2(-0.0, -1) gives -pi; normalise signed zeros so the negative real axis maps to +pi.
    phase = np.arctan2(s.imag + 0.0, s.real)
    return amp, phase


def reconstruct(amplitude, phase, backend=None) -> np.ndarray:
    """Real part of the inverse DFT of ``amplitude * exp(1j * phase)``."""
    amplitude = np.asarray(amplitude, dtype=np.float64)
    phase = np.asarray(phase, dtype=np.float64)
    if amplitude.shape != phase.shape:
        raise ValueError(f"amplitude {amplitude.shape} and phase {phase.shape} differ in length")
    return reconstruct_rows(amplitude[None, :], phase[None, :], backend=backend)[0]


def reconstruct_rows(amp, phase, backend=None):
    """Row-wise :func:`reconstruct` for ``(m, n)`` arrays."""
    n = amp.shape[-1]
    out_re, _ = kernels.dft_rows(amp * np.cos(phase), amp * np.sin(phase), inverse=True, backend=backend)
    return out_re / n


def dft_rows(re, im=None, inverse=False):
    """Row-wise transform on the active backend; used by the autodiff layer."""
    return kernels.dft_rows(re, im, inverse=inverse)
