"""Intensity standardisation, hybrid images and population atlases."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import BinaryMask, ScalarVolume, Unit, VolumeError

__all__ = [
    "AtlasBundle",
    "DECILE_LEVELS",
    "HYBRID_QSM_WEIGHT",
    "image_deciles",
    "cohort_target_deciles",
    "normalize_deciles",
    "scale_to_range",
    "hybrid_image",
    "aggregate",
    "RSD_MEAN_EPS",
]

DECILE_LEVELS = np.linspace(0.0, 1.0, 11)
# T1 intensity units per ppb of QSM
HYBRID_QSM_WEIGHT = 0.8
RSD_MEAN_EPS = 1e-6


def _values(image: ScalarVolume, mask: BinaryMask | None) -> np.ndarray:
    if mask is None:
        return image.data.ravel()
    mask.check_matches(image)
    return image.data[mask.data]


def image_deciles(image: ScalarVolume, mask: BinaryMask | None = None) -> np.ndarray:
    """0 %, 10 %, ..., 100 % quantiles of the (masked) intensities.

    Uses the inverted-CDF definition so every decile is an actual sample; a
    monotone value map then moves deciles exactly onto its knots.
    """
    vals = _values(image, mask)
    if vals.size == 0:
        raise VolumeError("no voxels to compute deciles from")
    return np.quantile(vals, DECILE_LEVELS, method="inverted_cdf")


def cohort_target_deciles(images, masks=None) -> np.ndarray:
    """Average decile landmarks over a cohort."""
    masks = masks if masks is not None else [None] * len(images)
    return np.mean([image_deciles(im, mk) for im, mk in zip(images, masks)], axis=0)


def normalize_deciles(image: ScalarVolume, target_deciles, mask: BinaryMask | None = None) -> ScalarVolume:
    """Piecewise-linear map taking the image's deciles onto ``target_deciles``.

    Values outside the masked range are extrapolated along the end segments.
    """
    target = np.asarray(target_deciles, dtype=np.float64)
    if target.shape != (11,):
        raise ValueError(f"need 11 target deciles, got shape {target.shape}")
    if not np.all(np.diff(target) > 0):
        raise ValueError("target deciles must be strictly ascending")
    knots = image_deciles(image, mask)
    if not np.all(np.diff(knots) > 0):
        raise VolumeError("degenerate histogram: image deciles are not strictly increasing")
    x = image.data
    out = np.interp(x, knots, target)
    lo_slope = (target[1] - target[0]) / (knots[1] - knots[0])
    hi_slope = (target[-1] - target[-2]) / (knots[-1] - knots[-2])
    out = np.where(x < knots[0], target[0] + (x - knots[0]) * lo_slope, out)
    out = np.where(x > knots[-1], target[-1] + (x - knots[-1]) * hi_slope, out)
    return image.with_data(out)


def scale_to_range(image: ScalarVolume, lo: float = 0.0, hi: float = 255.0, mask: BinaryMask | None = None) -> ScalarVolume:
    vals = _values(image, mask)
    vmin, vmax = float(vals.min()), float(vals.max())
    if vmax == vmin:
        raise VolumeError("cannot rescale a constant image")
    if vmin == lo and vmax == hi:
        return image
    return image.with_data(lo + (image.data - vmin) * ((hi - lo) / (vmax - vmin)))


def hybrid_image(t1_norm: ScalarVolume, qsm: ScalarVolume, weight: float = HYBRID_QSM_WEIGHT) -> ScalarVolume:
    """T1 (0-255 scale) minus ``weight`` x QSM (ppb)."""
    if t1_norm.dims != qsm.dims:
        raise VolumeError(f"dim mismatch: T1 {t1_norm.dims} vs QSM {qsm.dims}")
    return t1_norm.with_data(t1_norm.data - weight * qsm.data, Unit.DIMENSIONLESS)


@dataclass(frozen=True)
class AtlasBundle:
    mean: ScalarVolume
    per_voxel_sd: ScalarVolume
    rsd: ScalarVolume  # percent; 0 where undefined
    rsd_defined: BinaryMask
    n_subjects: int


def aggregate(maps, mask: BinaryMask | None = None) -> AtlasBundle:
    """Voxelwise mean, sample SD (N-1) and relative SD (%) across subjects.

    Values are summed in sorted order per voxel, so the mean does not depend on
    subject order. rSD is left at 0 and flagged undefined where
    ``|mean| < 1e-6``.
    """
    maps = list(maps)
    n = len(maps)
    if n < 2:
        raise ValueError(f"need at least 2 subject maps, got {n}")
    ref = maps[0]
    for mp in maps[1:]:
        if mp.dims != ref.dims:
            raise VolumeError(f"dim mismatch: {mp.dims} vs {ref.dims}")
    stack = np.sort(np.stack([mp.data.astype(np.float64) for mp in maps]), axis=0)
    total = np.zeros(ref.dims)
    for layer in stack:
        total += layer
    mean = total / n
    sq = np.zeros(ref.dims)
    for layer in stack:
        sq += (layer - mean) ** 2
    sd = np.sqrt(sq / (n - 1))

    inside = np.ones(ref.dims, bool) if mask is None else mask.data
    defined = inside & (np.abs(mean) >= RSD_MEAN_EPS)
    rsd = np.zeros(ref.dims)
    rsd[defined] = sd[defined] / np.abs(mean[defined]) * 100.0
    mean = np.where(inside, mean, 0.0)
    sd = np.where(inside, sd, 0.0)
    vox = ref.voxel_size_mm
    return AtlasBundle(
        mean=ScalarVolume(mean, vox, ref.unit),
        per_voxel_sd=ScalarVolume(sd, vox, ref.unit),
        rsd=ScalarVolume(rsd, vox, Unit.DIMENSIONLESS),
        rsd_defined=BinaryMask(defined, vox),
        n_subjects=n,
    )
