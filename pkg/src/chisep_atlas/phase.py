"""Wrapped phase -> background-free tissue field.

Steps: Laplacian unwrapping of each echo, SNR-weighted combination into a
frequency map (Hz), then V-SHARP background removal.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from .volume import BinaryMask, MultiEchoGre, ScalarVolume, Unit, VolumeError, distance_to_outside, first_nonfinite

logger = logging.getLogger(__name__)

__all__ = [
    "FieldMap",
    "laplacian_unwrap",
    "unwrap_echoes",
    "combine_echoes",
    "weighted_frequency",
    "vsharp",
    "VsharpResult",
    "sphere_kernel",
]

_DIST_EPS = 1e-9
_MIN_UNWRAP_DIM = 8


@dataclass(frozen=True)
class FieldMap:
    """Frequency map (Hz), zero outside its validity mask."""

    volume: ScalarVolume
    mask: BinaryMask

    def __post_init__(self):
        if self.volume.unit is not Unit.HZ:
            raise VolumeError(f"field map must be in Hz, got {self.volume.unit.value}")
        self.mask.check_matches(self.volume)
        data = np.where(self.mask.data, self.volume.data, 0.0)
        if not np.isfinite(data).all():
            raise VolumeError(f"field map is non-finite inside its mask at voxel {first_nonfinite(data)}")
        object.__setattr__(self, "volume", self.volume.with_data(data))


# ---------------------------------------------------------------------------
# unwrapping


def _neg_k2_dct(dims, voxel_size_mm) -> np.ndarray:
    """-(2 pi k)^2 on the DCT-II grid; index j on an n-axis is k = j / (2 n d)."""
    total = np.zeros(dims)
    for i, (n, d) in enumerate(zip(dims, voxel_size_mm)):
        shape = [1, 1, 1]
        shape[i] = n
        k = (np.arange(n) / (2.0 * n * d)).reshape(shape)
        total = total + k**2
    return -((2 * np.pi) ** 2) * total


def laplacian_unwrap(phase: ScalarVolume) -> ScalarVolume:
    """Unwrap via  lap(phi) = cos(phi) lap(sin phi) - sin(phi) lap(cos phi).

    The Laplacian and its inverse are diagonal in the cosine basis, which is the
    Fourier basis of the half-sample mirror extension of the volume. That
    extension keeps sin/cos continuous across the box faces, so non-periodic
    phase (ramps) does not ring. The k=0 term is dropped: the result has zero
    mean and is defined up to a constant.
    """
    if min(phase.dims) < _MIN_UNWRAP_DIM:
        raise VolumeError(f"degenerate dims {phase.dims}: need >= {_MIN_UNWRAP_DIM} per axis")
    if not phase.is_finite():
        raise VolumeError(f"phase is non-finite at voxel {first_nonfinite(phase.data)}")
    phi = phase.data.astype(np.float64)
    lap = _neg_k2_dct(phase.dims, phase.voxel_size_mm)

    def laplacian(x):
        return sfft.idctn(lap * sfft.dctn(x, type=2, norm="ortho", workers=-1), type=2, norm="ortho", workers=-1)

    s, c = np.sin(phi), np.cos(phi)
    rhs = c * laplacian(s) - s * laplacian(c)
    inv = np.zeros_like(lap)
    nz = lap != 0
    inv[nz] = 1.0 / lap[nz]
    out = sfft.idctn(inv * sfft.dctn(rhs, type=2, norm="ortho", workers=-1), type=2, norm="ortho", workers=-1)
    return phase.with_data(out, Unit.RADIANS)


def unwrap_echoes(gre: MultiEchoGre, mask: BinaryMask | None = None) -> list[ScalarVolume]:
    """Laplacian-unwrap every echo and fix each echo's free constant.

    The constant is chosen so the unwrapped phase agrees with the wrapped data
    modulo 2 pi (circular mean of the difference, magnitude-weighted inside
    ``mask``); the remaining 2 pi multiple of echo i is chosen so its masked mean
    is closest to echo 1 scaled by TE_i / TE_1.
    """
    sel = np.ones(gre.dims, bool) if mask is None else mask.data
    out = []
    ref_mean = None
    for i, (ph, mag) in enumerate(zip(gre.phase, gre.magnitude)):
        u = laplacian_unwrap(ph).data
        w = mag.data[sel]
        if not np.any(w > 0):
            w = np.ones_like(w)
        c = np.angle(np.sum(w * np.exp(1j * (ph.data[sel] - u[sel]))))
        u = u + c
        mean = np.average(u[sel], weights=w)
        if ref_mean is None:
            ref_mean = mean
        else:
            target = ref_mean * gre.te_s[i] / gre.te_s[0]
            u = u + 2 * np.pi * np.round((target - mean) / (2 * np.pi))
        out.append(ph.with_data(u, Unit.RADIANS))
    return out


def weighted_frequency(te_s, magnitudes, phases) -> tuple[np.ndarray, np.ndarray]:
    """Per-voxel frequency (Hz) and total weight from unwrapped echo phases.

    f = sum_i w_i phi_i / (2 pi TE_i) / sum_i w_i  with  w_i = (|M_i| TE_i)^2,
    and f = 0 wherever the total weight vanishes.
    """
    num = np.zeros(np.shape(magnitudes[0]))
    den = np.zeros_like(num)
    for te, mag, ph in zip(te_s, magnitudes, phases):
        w = (np.asarray(mag, dtype=np.float64) * te) ** 2
        num += w * np.asarray(ph) / (2 * np.pi * te)
        den += w
    f = np.zeros_like(num)
    valid = den > 0
    f[valid] = num[valid] / den[valid]
    return f, den


def combine_echoes(gre: MultiEchoGre, unwrapped) -> FieldMap:
    """SNR-weighted mean of per-echo frequencies; validity mask = nonzero total weight."""
    if len(unwrapped) != gre.n_echoes:
        raise VolumeError(f"echo count mismatch: {gre.n_echoes} echoes, {len(unwrapped)} unwrapped phases")
    for ph in unwrapped:
        if ph.dims != gre.dims:
            raise VolumeError("unwrapped phase dims do not match the acquisition")
    f, den = weighted_frequency(gre.te_s, [m.data for m in gre.magnitude], [p.data for p in unwrapped])
    vox = gre.voxel_size_mm
    return FieldMap(ScalarVolume(f, vox, Unit.HZ), BinaryMask(den > 0, vox))


# ---------------------------------------------------------------------------
# V-SHARP


def sphere_kernel(dims, voxel_size_mm, radius_mm: float) -> np.ndarray:
    """Normalised spherical mean kernel centred on voxel (0, 0, 0) of a periodic grid."""
    axes = []
    for i, (n, d) in enumerate(zip(dims, voxel_size_mm)):
        shape = [1, 1, 1]
        shape[i] = n
        idx = np.arange(n)
        idx = np.where(idx > n // 2, idx - n, idx)
        axes.append((idx * d).reshape(shape))
    r2 = axes[0] ** 2 + axes[1] ** 2 + axes[2] ** 2
    ker = (r2 <= (radius_mm + _DIST_EPS) ** 2).astype(np.float64)
    return ker / ker.sum()


@dataclass(frozen=True)
class VsharpResult:
    field: FieldMap
    mask: BinaryMask
    radii_mm: tuple[float, ...]


def _radii(r_max: float, r_min: float) -> list[float]:
    radii = list(np.arange(r_max, r_min - _DIST_EPS, -1.0))
    if abs(radii[-1] - r_min) > _DIST_EPS:
        radii.append(r_min)
    return [float(r) for r in radii]


def vsharp(
    field: FieldMap,
    mask: BinaryMask,
    r_max_mm: float = 12.0,
    r_min_mm: float | None = None,
    tsvd_threshold: float = 0.05,
) -> VsharpResult:
    """Variable-radius SHARP background removal.

    Each voxel keeps the high-pass residual ``(delta - s_r) * f`` of the largest
    radius whose sphere fits inside ``mask``; the assembled map is deconvolved by
    the ``r_max`` kernel with truncated inversion (``|1 - S| > tsvd_threshold``).
    """
    vox = field.volume.voxel_size_mm
    if r_min_mm is None:
        r_min_mm = max(vox)
    if not r_max_mm >= r_min_mm >= min(vox) - _DIST_EPS:
        raise ValueError(f"need r_max >= r_min >= one voxel, got r_max={r_max_mm}, r_min={r_min_mm}")
    if not 0 < tsvd_threshold < 1:
        raise ValueError(f"tsvd_threshold must lie in (0, 1), got {tsvd_threshold}")
    mask.check_matches(field.volume)
    m = mask.data

    dims = field.volume.dims
    # pad by r_max on every side to keep the circular deconvolution from wrapping
    pad = [int(np.ceil(r_max_mm / d)) for d in vox]
    pdims = tuple(n + 2 * p + ((n + 2 * p) % 2) for n, p in zip(dims, pad))
    sl = tuple(slice(p, p + n) for p, n in zip(pad, dims))

    buf = np.zeros(pdims)
    buf[sl] = np.where(m, field.volume.data, 0.0)
    fspec = sfft.rfftn(buf, workers=-1)

    dist = distance_to_outside(mask)
    out = np.zeros(dims)
    assigned = np.zeros(dims, bool)
    radii = _radii(r_max_mm, r_min_mm)
    hp_rmax = None
    for r in radii:
        valid = (dist > r + _DIST_EPS) & ~assigned
        hp = 1.0 - sfft.rfftn(sphere_kernel(pdims, vox, r), workers=-1).real
        if hp_rmax is None:
            hp_rmax = hp
        if not valid.any():
            continue
        h = sfft.irfftn(hp * fspec, s=pdims, workers=-1)[sl]
        out[valid] = h[valid]
        assigned |= valid
        logger.debug("vsharp r=%.2f mm: %d voxels", r, int(valid.sum()))

    final = BinaryMask(dist > r_min_mm + _DIST_EPS, vox)
    if not final.data.any():
        raise VolumeError(f"mask too small for r_min={r_min_mm} mm: eroded mask is empty")

    buf[...] = 0.0
    buf[sl] = out
    keep = np.abs(hp_rmax) > tsvd_threshold
    inv = np.zeros_like(hp_rmax)
    inv[keep] = 1.0 / hp_rmax[keep]
    tissue = sfft.irfftn(inv * sfft.rfftn(buf, workers=-1), s=pdims, workers=-1)[sl]
    tissue = np.where(final.data, tissue, 0.0)
    vol = ScalarVolume(tissue, vox, Unit.HZ)
    return VsharpResult(FieldMap(vol, final), final, tuple(radii))
