"""Volumetric containers, NIfTI / raw file I/O and mask erosion.

Every volume is a 3D grid indexed ``[x, y, z]`` with an anisotropic voxel
size in millimetres. Containers are frozen; their arrays are marked
read-only on construction so they can be shared freely between stages.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import nibabel as nib
import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

__all__ = [
    "Unit",
    "VolumeError",
    "first_nonfinite",
    "ScalarVolume",
    "BinaryMask",
    "LabelVolume",
    "MultiEchoGre",
    "load_volume",
    "save_volume",
    "load_mask",
    "save_mask",
    "load_labels",
    "save_labels",
    "load_phase",
    "erode_mask",
    "save_gre",
    "load_gre",
    "distance_to_outside",
    "GYROMAGNETIC_HZ_PER_T",
]

# proton gyromagnetic ratio / 2pi
GYROMAGNETIC_HZ_PER_T = 42.577e6

# distance comparisons in mm; absorbs EDT round-off at exact radii
_DIST_EPS = 1e-9


class VolumeError(ValueError):
    """Malformed or inconsistent volume data."""


class Unit(str, Enum):
    HZ = "Hz"
    PPB = "ppb"
    PER_SECOND = "per_second"
    RADIANS = "radians"
    DIMENSIONLESS = "dimensionless"


def first_nonfinite(data: np.ndarray) -> tuple[int, ...] | None:
    """Index of the first NaN/Inf voxel, or None."""
    bad = np.argwhere(~np.isfinite(data))
    return tuple(int(i) for i in bad[0]) if bad.size else None


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


def _check_voxel_size(voxel_size_mm) -> tuple[float, float, float]:
    vs = tuple(float(v) for v in voxel_size_mm)
    if len(vs) != 3:
        raise VolumeError(f"voxel_size_mm must have 3 components, got {vs}")
    if not all(np.isfinite(v) and v > 0 for v in vs):
        raise VolumeError(f"voxel_size_mm components must be > 0, got {vs}")
    return vs


@dataclass(frozen=True)
class ScalarVolume:
    data: np.ndarray
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    unit: Unit = Unit.DIMENSIONLESS

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise VolumeError(f"non-3D image: got {data.ndim} dimensions")
        if any(n < 1 for n in data.shape):
            raise VolumeError(f"dims must be positive, got {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "voxel_size_mm", _check_voxel_size(self.voxel_size_mm))
        object.__setattr__(self, "unit", Unit(self.unit))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def with_data(self, data, unit: Unit | str | None = None) -> "ScalarVolume":
        return ScalarVolume(data, self.voxel_size_mm, self.unit if unit is None else unit)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())


@dataclass(frozen=True)
class BinaryMask:
    data: np.ndarray
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise VolumeError(f"non-3D mask: got {data.ndim} dimensions")
        object.__setattr__(self, "data", _frozen(data.astype(bool)))
        object.__setattr__(self, "voxel_size_mm", _check_voxel_size(self.voxel_size_mm))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def count(self) -> int:
        return int(self.data.sum())

    def check_matches(self, vol: ScalarVolume) -> None:
        if self.dims != vol.dims:
            raise VolumeError(f"mask dims {self.dims} do not match volume dims {vol.dims}")


@dataclass(frozen=True)
class LabelVolume:
    """Integer ROI labels; 0 is background."""

    data: np.ndarray
    names: dict[int, str] = field(default_factory=dict)
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise VolumeError(f"non-3D label image: got {data.ndim} dimensions")
        if not np.issubdtype(data.dtype, np.integer):
            if not np.array_equal(data, np.round(data)):
                raise VolumeError("label volume contains non-integer values")
            data = data.astype(np.int64)
        if (data < 0).any():
            raise VolumeError("label volume contains negative labels")
        names = {int(k): str(v) for k, v in self.names.items()}
        missing = sorted(set(np.unique(data).tolist()) - {0} - set(names))
        if missing:
            raise VolumeError(f"labels without a name: {missing}")
        object.__setattr__(self, "data", _frozen(data.astype(np.int64)))
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "voxel_size_mm", _check_voxel_size(self.voxel_size_mm))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def label_of(self, name: str) -> int:
        for k, v in self.names.items():
            if v == name:
                return k
        raise KeyError(name)


@dataclass(frozen=True)
class MultiEchoGre:
    """Multi-echo gradient-echo acquisition: magnitude and phase per echo."""

    te_s: tuple[float, ...]
    tr_s: float
    b0_tesla: float
    magnitude: tuple[ScalarVolume, ...]
    phase: tuple[ScalarVolume, ...]
    b0_dir: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        te = tuple(float(t) for t in self.te_s)
        n = len(te)
        if n < 2:
            raise VolumeError(f"need at least 2 echoes, got {n}")
        if len(self.magnitude) != n or len(self.phase) != n:
            raise VolumeError(
                f"echo count mismatch: {n} TEs, {len(self.magnitude)} magnitudes, "
                f"{len(self.phase)} phases"
            )
        if te[0] <= 0 or any(b <= a for a, b in zip(te, te[1:])):
            raise VolumeError(f"echo times must be positive and strictly increasing: {te}")
        if not te[-1] < self.tr_s:
            raise VolumeError(f"last TE {te[-1]} must be shorter than TR {self.tr_s}")
        if self.b0_tesla <= 0:
            raise VolumeError("b0_tesla must be positive")
        b = np.asarray(self.b0_dir, dtype=float)
        if b.shape != (3,) or not np.isclose(np.linalg.norm(b), 1.0, atol=1e-6):
            raise VolumeError(f"b0_dir must be a unit 3-vector, got {self.b0_dir}")
        ref = self.magnitude[0]
        for vol in (*self.magnitude, *self.phase):
            if vol.dims != ref.dims or not np.allclose(vol.voxel_size_mm, ref.voxel_size_mm):
                raise VolumeError("all echo volumes must share dims and voxel size")
        for vol in self.phase:
            if np.abs(vol.data).max() > np.pi + 1e-6:
                raise VolumeError("phase values must lie in [-pi, pi]")
        object.__setattr__(self, "te_s", te)
        object.__setattr__(self, "tr_s", float(self.tr_s))
        object.__setattr__(self, "b0_tesla", float(self.b0_tesla))
        object.__setattr__(self, "b0_dir", tuple(float(v) for v in b))
        object.__setattr__(self, "magnitude", tuple(self.magnitude))
        object.__setattr__(self, "phase", tuple(self.phase))

    @property
    def n_echoes(self) -> int:
        return len(self.te_s)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.magnitude[0].dims

    @property
    def voxel_size_mm(self) -> tuple[float, float, float]:
        return self.magnitude[0].voxel_size_mm

    @property
    def larmor_hz(self) -> float:
        return GYROMAGNETIC_HZ_PER_T * self.b0_tesla


# ---------------------------------------------------------------------------
# file I/O


def _is_nifti(path: Path) -> bool:
    name = path.name.lower()
    return name.endswith((".nii", ".nii.gz", ".hdr", ".img"))


def _raw_paths(path: Path) -> tuple[Path, Path]:
    """Resolve ``(payload, sidecar)`` for any of ``name``, ``name.json``, ``name.f32``."""
    if path.suffix in (".json", ".f32", ".f64"):
        stem = path.with_suffix("")
    else:
        stem = path
    sidecar = stem.with_suffix(".json")
    if path.suffix in (".f32", ".f64"):
        return path, sidecar
    return stem.with_suffix(".f32"), sidecar


def _read_nifti(path: Path) -> tuple[np.ndarray, tuple[float, float, float], str | None]:
    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises a zoo of types for bad headers
        raise VolumeError(f"malformed NIfTI header in {path}: {exc}") from exc
    if not isinstance(img, (nib.Nifti1Image, nib.Nifti1Pair)):
        raise VolumeError(f"{path} is not a NIfTI-1 image")
    hdr = img.header
    magic = bytes(hdr["magic"]).rstrip(b"\x00")
    if magic not in (b"n+1", b"ni1"):
        raise VolumeError(f"bad NIfTI magic {magic!r} in {path}")
    ndim = int(hdr["dim"][0])
    shape = img.shape
    # trailing singleton dims are tolerated (e.g. dim[0]=4 with dim[4]=1 is still 4D)
    if ndim != 3 or len(shape) != 3:
        raise VolumeError(f"non-3D image: {path} has dim[0]={ndim}")
    try:
        data = np.asarray(img.get_fdata(dtype=np.float64))
    except Exception as exc:
        raise VolumeError(f"dimension mismatch between header and payload in {path}: {exc}") from exc
    vox = tuple(float(v) for v in hdr.get_zooms()[:3])
    descrip = bytes(hdr["descrip"]).rstrip(b"\x00").decode("ascii", "ignore")
    unit = None
    if descrip.startswith("unit="):
        unit = descrip[5:].strip()
    return data, vox, unit


def _read_raw(path: Path) -> tuple[np.ndarray, tuple[float, float, float], str | None]:
    payload, sidecar = _raw_paths(path)
    if not sidecar.exists():
        raise FileNotFoundError(f"missing raw sidecar header: {sidecar}")
    try:
        meta = json.loads(sidecar.read_text())
        dims = [int(d) for d in meta["dims"]]
        vox = tuple(float(v) for v in meta["voxel_size_mm"])
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeError(f"malformed raw header {sidecar}: {exc}") from exc
    if len(dims) != 3:
        raise VolumeError(f"non-3D image: {sidecar} declares dims {dims}")
    dtype = np.dtype(meta.get("dtype", "float32")).newbyteorder("<")
    if dtype.kind != "f":
        raise VolumeError(f"unsupported raw dtype {dtype}")
    if dtype.itemsize == 8:
        payload = payload.with_suffix(".f64")
    if not payload.exists():
        raise FileNotFoundError(f"missing raw payload: {payload}")
    flat = np.fromfile(payload, dtype=dtype)
    if flat.size != int(np.prod(dims)):
        raise VolumeError(
            f"dimension mismatch between header and payload in {payload}: "
            f"header {dims} ({int(np.prod(dims))} voxels), payload {flat.size} values"
        )
    data = flat.reshape(dims, order="F").astype(dtype.newbyteorder("="))
    return data, vox, meta.get("unit")


def _read_any(path) -> tuple[np.ndarray, tuple[float, float, float], str | None]:
    path = Path(path)
    if _is_nifti(path):
        if not path.exists():
            raise FileNotFoundError(f"no such file: {path}")
        return _read_nifti(path)
    return _read_raw(path)


def load_volume(path, unit: Unit | str | None = None) -> ScalarVolume:
    """Read a NIfTI-1 file or a raw ``.f32`` + ``.json`` pair.

    ``unit`` overrides whatever unit tag the file carries; if neither is
    given the volume is dimensionless.
    """
    data, vox, file_unit = _read_any(path)
    tag = unit if unit is not None else (file_unit or Unit.DIMENSIONLESS)
    return ScalarVolume(data, vox, Unit(tag))


def _write_nifti(path: Path, data: np.ndarray, vox, descrip: str) -> None:
    img = nib.Nifti1Image(data, np.diag([*vox, 1.0]))
    img.header.set_zooms(vox)
    img.header["descrip"] = descrip.encode("ascii")[:79]
    img.header.set_xyzt_units("mm", "sec")
    nib.save(img, str(path))


def _write_raw(path: Path, data: np.ndarray, vox, extra: dict) -> None:
    payload, sidecar = _raw_paths(path)
    as32 = data.astype("<f4")
    # lossless float32 when possible, float64 payload otherwise
    if np.array_equal(as32.astype(data.dtype), data, equal_nan=True):
        dtype, buf = "float32", as32
    else:
        dtype, buf = "float64", data.astype("<f8")
        payload = payload.with_suffix(".f64")
    meta = {"dims": list(data.shape), "voxel_size_mm": list(vox), "dtype": dtype, **extra}
    buf.ravel(order="F").tofile(payload)
    sidecar.write_text(json.dumps(meta, indent=1))


def save_volume(vol: ScalarVolume, path) -> None:
    path = Path(path)
    if _is_nifti(path):
        _write_nifti(path, vol.data, vol.voxel_size_mm, f"unit={vol.unit.value}")
    else:
        _write_raw(path, vol.data, vol.voxel_size_mm, {"unit": vol.unit.value})


def load_mask(path) -> BinaryMask:
    data, vox, _ = _read_any(path)
    return BinaryMask(data > 0.5, vox)


def save_mask(mask: BinaryMask, path) -> None:
    path = Path(path)
    data = mask.data.astype(np.float32)
    if _is_nifti(path):
        _write_nifti(path, data.astype(np.uint8), mask.voxel_size_mm, "mask")
    else:
        _write_raw(path, data, mask.voxel_size_mm, {"unit": "dimensionless"})


def _names_path(path: Path) -> Path:
    name = path.name
    for ext in (".nii.gz", ".nii", ".json", ".f32", ".f64"):
        if name.endswith(ext):
            name = name[: -len(ext)]
            break
    return path.with_name(name + ".labels.json")


def load_labels(path, names: dict[int, str] | None = None) -> LabelVolume:
    """Load an integer label image; names come from ``<stem>.labels.json`` unless given."""
    path = Path(path)
    data, vox, _ = _read_any(path)
    if names is None:
        npath = _names_path(path)
        if npath.exists():
            names = {int(k): v for k, v in json.loads(npath.read_text()).items()}
        else:
            names = {int(k): f"label_{int(k)}" for k in np.unique(data) if k != 0}
    return LabelVolume(np.round(data).astype(np.int64), names, vox)


def save_labels(labels: LabelVolume, path) -> None:
    path = Path(path)
    data = labels.data.astype(np.int16 if labels.data.max(initial=0) < 2**15 else np.int32)
    if _is_nifti(path):
        _write_nifti(path, data, labels.voxel_size_mm, "labels")
    else:
        _write_raw(path, data.astype(np.float32), labels.voxel_size_mm, {"unit": "dimensionless"})
    _names_path(path).write_text(json.dumps({str(k): v for k, v in labels.names.items()}, indent=1))


def load_phase(path, sign: int = 1) -> ScalarVolume:
    """Load a phase image in radians.

    Header scale/intercept is applied by the reader. If the scaled values still
    fall outside [-pi, pi] the image is treated as vendor integer-encoded phase
    and its full value range is mapped linearly onto [-pi, pi].
    """
    if sign not in (1, -1):
        raise ValueError("phase sign must be +1 or -1")
    data, vox, _ = _read_any(path)
    if np.abs(data).max() > np.pi + 1e-3:
        lo, hi = data.min(), data.max()
        logger.info("rescaling integer-encoded phase range [%g, %g] to [-pi, pi]", lo, hi)
        data = (data - lo) / (hi - lo) * 2 * np.pi - np.pi
    return ScalarVolume(np.clip(sign * data, -np.pi, np.pi), vox, Unit.RADIANS)


# ---------------------------------------------------------------------------
# morphology


def distance_to_outside(mask: BinaryMask) -> np.ndarray:
    """Euclidean distance (mm) from each voxel to the nearest false voxel.

    Voxels beyond the grid boundary count as false.
    """
    padded = np.pad(mask.data, 1, constant_values=False)
    dist = ndimage.distance_transform_edt(padded, sampling=mask.voxel_size_mm)
    return dist[1:-1, 1:-1, 1:-1]


def erode_mask(mask: BinaryMask, radius_mm: float) -> BinaryMask:
    """Keep a voxel iff every voxel within ``radius_mm`` (Euclidean, in mm) is set."""
    if radius_mm < 0:
        raise ValueError(f"radius_mm must be >= 0, got {radius_mm}")
    if radius_mm == 0 or not mask.data.any():
        return mask
    keep = distance_to_outside(mask) > radius_mm + _DIST_EPS
    return BinaryMask(keep, mask.voxel_size_mm)


# ---------------------------------------------------------------------------
# multi-echo datasets on disk


def save_gre(gre: MultiEchoGre, directory, ext: str = ".nii") -> Path:
    """Write per-echo volumes plus a ``gre.json`` descriptor; returns the descriptor path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mags, phases = [], []
    for i, (mag, ph) in enumerate(zip(gre.magnitude, gre.phase), start=1):
        mname, pname = f"mag_e{i}{ext}", f"phase_e{i}{ext}"
        save_volume(mag, directory / mname)
        save_volume(ph, directory / pname)
        mags.append(mname)
        phases.append(pname)
    desc = {
        "te_s": list(gre.te_s),
        "tr_s": gre.tr_s,
        "b0_tesla": gre.b0_tesla,
        "b0_dir": list(gre.b0_dir),
        "magnitude": mags,
        "phase": phases,
    }
    path = directory / "gre.json"
    path.write_text(json.dumps(desc, indent=1))
    return path


def load_gre(path, phase_sign: int = 1) -> MultiEchoGre:
    """Read a ``gre.json`` descriptor; echo paths are relative to its directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    desc = json.loads(path.read_text())
    root = path.parent
    mags = tuple(load_volume(root / p, Unit.DIMENSIONLESS) for p in desc["magnitude"])
    phases = tuple(load_phase(root / p, phase_sign) for p in desc["phase"])
    return MultiEchoGre(
        te_s=tuple(desc["te_s"]),
        tr_s=desc["tr_s"],
        b0_tesla=desc["b0_tesla"],
        magnitude=mags,
        phase=phases,
        b0_dir=tuple(desc.get("b0_dir", (0.0, 0.0, 1.0))),
    )
