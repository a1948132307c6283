"""Dipole kernel and the susceptibility -> field forward model.

k-space is sampled in cycles/mm (``fftfreq`` with the voxel size as spacing);
the same convention is used by the Laplacian in :mod:`chisep_atlas.phase`.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft as sfft

from .volume import GYROMAGNETIC_HZ_PER_T, ScalarVolume, Unit, VolumeError, first_nonfinite

__all__ = [
    "DipoleKernel",
    "make_dipole_kernel",
    "padded_dims",
    "forward_field",
    "kspace_grid",
    "larmor_hz",
    "PPB",
]

PPB = 1e-9


def larmor_hz(b0_tesla: float) -> float:
    return GYROMAGNETIC_HZ_PER_T * b0_tesla


def kspace_grid(dims, voxel_size_mm) -> list[np.ndarray]:
    """Broadcastable k-axes (cycles/mm) for an FFT grid of ``dims``."""
    axes = []
    for i, (n, d) in enumerate(zip(dims, voxel_size_mm)):
        shape = [1, 1, 1]
        shape[i] = n
        axes.append(np.fft.fftfreq(n, d).reshape(shape))
    return axes


def padded_dims(dims, factor: float = 1.0) -> tuple[int, int, int]:
    """Per-axis size >= ``factor * n``, rounded up to an even number."""
    out = []
    for n in dims:
        m = int(np.ceil(n * factor))
        out.append(m + (m % 2))
    return tuple(out)


@dataclass(frozen=True, eq=False)
class DipoleKernel:
    dims: tuple[int, int, int]
    voxel_size_mm: tuple[float, float, float]
    b0_dir: tuple[float, float, float]
    spectrum: np.ndarray

    @cached_property
    def half_spectrum(self) -> np.ndarray:
        """Kernel on the ``rfftn`` grid (last axis k >= 0, Nyquist taken as +0.5)."""
        return _dipole_spectrum(self.dims, self.voxel_size_mm, self.b0_dir, half=True)


def _dipole_spectrum(dims, vox, b, half=False) -> np.ndarray:
    kx, ky, kz = kspace_grid(dims, vox)
    if half:
        kz = np.fft.rfftfreq(dims[2], vox[2]).reshape(1, 1, -1)
    k2 = kx**2 + ky**2 + kz**2
    kb = kx * b[0] + ky * b[1] + kz * b[2]
    with np.errstate(invalid="ignore", divide="ignore"):
        spec = 1.0 / 3.0 - kb**2 / k2
    spec[0, 0, 0] = 0.0
    return spec


def make_dipole_kernel(dims, voxel_size_mm, b0_dir=(0.0, 0.0, 1.0)) -> DipoleKernel:
    """D(k) = 1/3 - (k.b0)^2 / |k|^2 with D(0) = 0."""
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 2:
        raise VolumeError(f"dipole kernel needs >= 2 samples per axis, got {dims}")
    vox = tuple(float(v) for v in voxel_size_mm)
    if any(v <= 0 for v in vox):
        raise VolumeError(f"zero or negative voxel size {vox}")
    b = np.asarray(b0_dir, dtype=float)
    b = b / np.linalg.norm(b)
    spec = _dipole_spectrum(dims, vox, b)
    spec.setflags(write=False)
    return DipoleKernel(dims, vox, tuple(b), spec)


def _embed(x: np.ndarray, dims) -> tuple[np.ndarray, tuple[slice, ...]]:
    if x.shape == tuple(dims):
        return x, (slice(None),) * 3
    if any(m < n for m, n in zip(dims, x.shape)):
        raise VolumeError(f"kernel dims {dims} smaller than volume dims {x.shape}")
    sl = tuple(slice((m - n) // 2, (m - n) // 2 + n) for m, n in zip(dims, x.shape))
    out = np.zeros(dims, dtype=x.dtype)
    out[sl] = x
    return out, sl


def convolve_dipole(x: np.ndarray, kernel: DipoleKernel) -> np.ndarray:
    """Apply D in k-space; pads (centred, zeros) to the kernel grid and crops back.

    The operator is self-adjoint: crop and zero-pad are adjoint to each other and
    D is real and even.
    """
    buf, sl = _embed(np.asarray(x, dtype=np.float64), kernel.dims)
    spec = sfft.rfftn(buf, workers=-1)
    spec *= kernel.half_spectrum
    return sfft.irfftn(spec, s=kernel.dims, workers=-1)[sl]


def forward_field(chi_total: ScalarVolume, kernel: DipoleKernel, b0_tesla: float) -> ScalarVolume:
    """Field perturbation (Hz) of a susceptibility map (ppb)."""
    if not chi_total.is_finite():
        raise VolumeError(f"susceptibility map is non-finite at voxel {first_nonfinite(chi_total.data)}")
    scale = larmor_hz(b0_tesla) * PPB
    return chi_total.with_data(scale * convolve_dipole(chi_total.data, kernel), Unit.HZ)

