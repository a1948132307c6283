"""Digital phantoms and multi-echo GRE forward simulation.

A phantom is a list of spheres and boxes with ground-truth paramagnetic and
diamagnetic susceptibility, embedded in an ellipsoidal "head" mask. The
simulator pushes it through the field and R2' forward models and adds an
optional background field and Gaussian noise.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dipole import forward_field, make_dipole_kernel, padded_dims
from .separation import SolverConfig, forward_r2prime
from .volume import BinaryMask, MultiEchoGre, ScalarVolume, Unit

__all__ = [
    "PhantomError",
    "Shape",
    "Background",
    "PhantomSpec",
    "render_phantom",
    "background_field",
    "simulate_gre",
    "PROTOCOL_TE_S",
    "PROTOCOL_TR_S",
]

# 3 T multi-echo GRE protocol used for the atlas cohort
PROTOCOL_TE_S = (5.25e-3, 11.08e-3, 16.91e-3, 22.74e-3, 28.57e-3)
PROTOCOL_TR_S = 33e-3


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class Shape:
    """A sphere (``size`` = radius) or axis-aligned box (``size`` = edge lengths), in mm."""

    geometry: str
    center: tuple[float, float, float]
    size: float | tuple[float, float, float]
    chi_para: float = 0.0
    chi_dia: float = 0.0

    def __post_init__(self):
        if self.geometry not in ("sphere", "box"):
            raise PhantomError(f"unknown geometry {self.geometry!r}")
        if self.chi_para < 0 or self.chi_dia > 0:
            raise PhantomError(f"need chi_para >= 0 and chi_dia <= 0, got {self.chi_para}, {self.chi_dia}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if self.geometry == "box":
            size = self.size
            size = (size,) * 3 if np.isscalar(size) else tuple(float(s) for s in size)
            object.__setattr__(self, "size", size)
        else:
            object.__setattr__(self, "size", float(self.size))

    def half_extent(self) -> np.ndarray:
        if self.geometry == "sphere":
            return np.full(3, self.size)
        return np.asarray(self.size) / 2

    def inside(self, x, y, z) -> np.ndarray:
        cx, cy, cz = self.center
        if self.geometry == "sphere":
            return (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 <= self.size**2
        hx, hy, hz = self.half_extent()
        return (np.abs(x - cx) <= hx) & (np.abs(y - cy) <= hy) & (np.abs(z - cz) <= hz)


@dataclass(frozen=True)
class Background:
    """``none``, ``external_dipole`` (position mm, moment Hz*mm^3) or ``polynomial``.

    Polynomial coefficients map monomials over (x, y, z), in mm relative to the
    volume centre, to Hz per mm^degree, e.g. ``{"1": 3.0, "z": 0.05, "xy": 1e-3}``.
    """

    kind: str = "none"
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    moment: float = 0.0
    coeffs: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("none", "external_dipole", "polynomial"):
            raise PhantomError(f"unknown background kind {self.kind!r}")
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        object.__setattr__(self, "coeffs", {str(k): float(v) for k, v in self.coeffs.items()})
        for mono in self.coeffs:
            if mono != "1" and set(mono) - set("xyz"):
                raise PhantomError(f"bad polynomial monomial {mono!r}")


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    shapes: tuple[Shape, ...] = ()
    s0: float = 100.0
    r2_baseline: float = 10.0
    background: Background = field(default_factory=Background)
    noise_sigma: float = 0.0
    seed: int = 0
    # ellipsoid semi-axes as a fraction of the field of view
    mask_fraction: tuple[float, float, float] = (0.42, 0.42, 0.42)
    # if set, mask = union of shapes dilated by this margin instead of the ellipsoid
    mask_margin_mm: float | None = None
    supersample: int = 1
    te_s: tuple[float, ...] = PROTOCOL_TE_S
    tr_s: float = PROTOCOL_TR_S
    b0_tesla: float = 3.0
    b0_dir: tuple[float, float, float] = (0.0, 0.0, 1.0)
    dr_para: float = 100.0
    dr_dia: float = 100.0
    field_pad_factor: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "voxel_size_mm", tuple(float(v) for v in self.voxel_size_mm))
        object.__setattr__(self, "shapes", tuple(s if isinstance(s, Shape) else Shape(**s) for s in self.shapes))
        if not isinstance(self.background, Background):
            object.__setattr__(self, "background", Background(**self.background))
        object.__setattr__(self, "te_s", tuple(float(t) for t in self.te_s))
        if self.noise_sigma < 0:
            raise PhantomError("noise_sigma must be >= 0")
        if self.supersample < 1:
            raise PhantomError("supersample must be >= 1")
        fov = np.asarray(self.dims) * np.asarray(self.voxel_size_mm)
        for s in self.shapes:
            c = np.asarray(s.center)
            h = s.half_extent()
            if (c - h < -0.5 * np.asarray(self.voxel_size_mm)).any() or (c + h > fov).any():
                raise PhantomError(f"shape out of bounds: {s}")

    @property
    def fov_mm(self) -> np.ndarray:
        return np.asarray(self.dims) * np.asarray(self.voxel_size_mm)

    @property
    def center_mm(self) -> np.ndarray:
        return (np.asarray(self.dims) - 1) / 2 * np.asarray(self.voxel_size_mm)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes"] = [asdict(s) for s in self.shapes]
        d["background"] = asdict(self.background)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        for key in ("dims", "voxel_size_mm", "mask_fraction", "te_s", "b0_dir"):
            if key in d:
                d[key] = tuple(d[key])
        d["shapes"] = tuple(Shape(**s) for s in d.get("shapes", ()))
        d["background"] = Background(**d.get("background", {}))
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "PhantomSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def _coords(spec: PhantomSpec, offset=(0.0, 0.0, 0.0)):
    axes = []
    for i, (n, d) in enumerate(zip(spec.dims, spec.voxel_size_mm)):
        shape = [1, 1, 1]
        shape[i] = n
        axes.append(((np.arange(n) + offset[i]) * d).reshape(shape))
    return axes


def render_phantom(spec: PhantomSpec) -> tuple[ScalarVolume, ScalarVolume, BinaryMask]:
    """Rasterise ground-truth maps; later shapes overwrite earlier ones.

    With ``supersample > 1`` each voxel holds the partial-volume average over
    ``supersample**3`` sub-samples.
    """
    para = np.zeros(spec.dims)
    dia = np.zeros(spec.dims)
    ss = spec.supersample
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    for shape in spec.shapes:
        frac = np.zeros(spec.dims)
        for ox in offs:
            for oy in offs:
                for oz in offs:
                    x, y, z = _coords(spec, (ox, oy, oz))
                    frac += shape.inside(x, y, z)
        frac /= ss**3
        para = (1 - frac) * para + frac * shape.chi_para
        dia = (1 - frac) * dia + frac * shape.chi_dia

    x, y, z = _coords(spec)
    if spec.mask_margin_mm is None:
        c = spec.center_mm
        ax = np.asarray(spec.mask_fraction) * spec.fov_mm
        mask = ((x - c[0]) / ax[0]) ** 2 + ((y - c[1]) / ax[1]) ** 2 + ((z - c[2]) / ax[2]) ** 2 <= 1.0
    else:
        mask = np.zeros(spec.dims, bool)
        for shape in spec.shapes:
            grown = Shape(
                shape.geometry,
                shape.center,
                shape.size + spec.mask_margin_mm if shape.geometry == "sphere"
                else tuple(s + 2 * spec.mask_margin_mm for s in shape.size),
            )
            mask |= grown.inside(x, y, z)
    vox = spec.voxel_size_mm
    return ScalarVolume(para, vox, Unit.PPB), ScalarVolume(dia, vox, Unit.PPB), BinaryMask(mask, vox)


def background_field(spec: PhantomSpec) -> np.ndarray:
    bg = spec.background
    if bg.kind == "none":
        return np.zeros(spec.dims)
    x, y, z = _coords(spec)
    c = spec.center_mm
    if bg.kind == "external_dipole":
        b = np.asarray(spec.b0_dir, float)
        dx, dy, dz = x - bg.position[0], y - bg.position[1], z - bg.position[2]
        r2 = dx**2 + dy**2 + dz**2
        if (r2 == 0).any():
            raise PhantomError("external dipole sits on a grid point")
        cos2 = (dx * b[0] + dy * b[1] + dz * b[2]) ** 2 / r2
        return bg.moment * (3 * cos2 - 1) / r2**1.5
    rel = {"x": x - c[0], "y": y - c[1], "z": z - c[2]}
    out = np.zeros(spec.dims)
    for mono, coef in bg.coeffs.items():
        term = np.ones(spec.dims) * coef
        if mono != "1":
            for ch in mono:
                term = term * rel[ch]
        out = out + term
    return out


def simulate_gre(
    chi_para: ScalarVolume,
    chi_dia: ScalarVolume,
    spec: PhantomSpec,
    te_s=None,
    b0_tesla: float | None = None,
    mask: BinaryMask | None = None,
) -> tuple[MultiEchoGre, dict[str, ScalarVolume]]:
    """Forward-simulate magnitude and wrapped phase for every echo.

    Returns the acquisition plus the noise-free truth volumes (total field,
    tissue field, background, R2*). Magnitude is ``s0 exp(-R2* TE)`` inside the
    head mask and zero outside; magnitude noise is Gaussian with SD
    ``noise_sigma * s0`` and phase noise has SD ``sigma / magnitude`` (capped
    at 1 rad). Negative noisy magnitudes are reflected to keep them >= 0.
    """
    te = tuple(spec.te_s if te_s is None else te_s)
    b0 = spec.b0_tesla if b0_tesla is None else b0_tesla
    if mask is None:
        mask = render_phantom(spec)[2]
    vox = spec.voxel_size_mm
    kernel = make_dipole_kernel(padded_dims(spec.dims, spec.field_pad_factor), vox, spec.b0_dir)
    total = ScalarVolume(chi_para.data + chi_dia.data, vox, Unit.PPB)
    tissue = forward_field(total, kernel, b0).data
    bg = background_field(spec)
    df = tissue + bg
    cfg = SolverConfig(dr_para=spec.dr_para, dr_dia=spec.dr_dia, b0_tesla=b0)
    r2s = spec.r2_baseline + forward_r2prime(chi_para, chi_dia, cfg).data

    rng = np.random.default_rng(spec.seed)
    sigma = spec.noise_sigma * spec.s0
    mags, phases = [], []
    for t in te:
        mag = np.where(mask.data, spec.s0 * np.exp(-r2s * t), 0.0)
        ph = 2 * np.pi * df * t
        if sigma > 0:
            ph_sd = np.minimum(sigma / np.maximum(mag, 1e-12), 1.0)
            ph = ph + rng.standard_normal(spec.dims) * ph_sd
            mag = np.abs(mag + rng.standard_normal(spec.dims) * sigma)
        ph = (ph + np.pi) % (2 * np.pi) - np.pi
        mags.append(ScalarVolume(mag, vox, Unit.DIMENSIONLESS))
        phases.append(ScalarVolume(ph, vox, Unit.RADIANS))
    gre = MultiEchoGre(te, spec.tr_s, b0, tuple(mags), tuple(phases), spec.b0_dir)
    truth = {
        "field": ScalarVolume(df, vox, Unit.HZ),
        "tissue_field": ScalarVolume(tissue, vox, Unit.HZ),
        "background_field": ScalarVolume(bg, vox, Unit.HZ),
        "r2star": ScalarVolume(r2s, vox, Unit.PER_SECOND),
    }
    return gre, truth
