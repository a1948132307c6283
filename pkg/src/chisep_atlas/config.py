"""Pipeline configuration (INI file with per-stage sections) and provenance records."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from .separation import SolverConfig

__all__ = ["PipelineConfig", "VsharpConfig", "R2StarConfig", "IoConfig", "AtlasConfig", "Provenance", "sha256_file"]

__version__ = "0.1.0"


@dataclass(frozen=True)
class IoConfig:
    phase_sign: int = 1
    output_format: str = ".nii"

    def __post_init__(self):
        if self.phase_sign not in (1, -1):
            raise ValueError("phase_sign must be +1 or -1")
        if self.output_format not in (".nii", ".nii.gz", ".json"):
            raise ValueError(f"unsupported output format {self.output_format!r}")


@dataclass(frozen=True)
class VsharpConfig:
    r_max_mm: float = 12.0
    r_min_mm: float | None = None  # one voxel
    tsvd_threshold: float = 0.05


@dataclass(frozen=True)
class R2StarConfig:
    r2_baseline: float = 10.0
    max_iter: int = 50
    tol: float = 1e-8

    def __post_init__(self):
        if self.r2_baseline < 0:
            raise ValueError("r2_baseline must be >= 0")


@dataclass(frozen=True)
class AtlasConfig:
    # "cohort" averages the subjects' own deciles; anything else is a JSON file of 11 values
    decile_targets: str = "cohort"
    hybrid_weight: float = 0.8


@dataclass(frozen=True)
class PipelineConfig:
    io: IoConfig = field(default_factory=IoConfig)
    vsharp: VsharpConfig = field(default_factory=VsharpConfig)
    r2star: R2StarConfig = field(default_factory=R2StarConfig)
    chisep: SolverConfig = field(default_factory=SolverConfig)
    atlas: AtlasConfig = field(default_factory=AtlasConfig)
    manifest: str | None = None
    output_dir: str | None = None

    _SECTIONS = ("io", "vsharp", "r2star", "chisep", "atlas")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def override(self, section: str, **values) -> "PipelineConfig":
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        sub = dataclasses.replace(getattr(self, section), **values)
        return dataclasses.replace(self, **{section: sub})

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        kw = {}
        for name in cls._SECTIONS:
            sub_cls = {f.name: f for f in dataclasses.fields(cls)}[name].default_factory
            kw[name] = sub_cls(**d.get(name, {}))
        return cls(**kw, manifest=d.get("manifest"), output_dir=d.get("output_dir"))

    @classmethod
    def from_ini(cls, path) -> "PipelineConfig":
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise FileNotFoundError(f"no such config file: {path}")
        base = cls()
        d: dict = {}
        for name in cls._SECTIONS:
            if not parser.has_section(name):
                continue
            defaults = asdict(getattr(base, name))
            sec = {}
            for key, raw in parser.items(name):
                if key not in defaults:
                    raise ValueError(f"unknown key [{name}] {key}")
                sec[key] = _coerce(raw, defaults[key])
            d[name] = sec
        if parser.has_section("pipeline"):
            d["manifest"] = parser.get("pipeline", "manifest", fallback=None)
            d["output_dir"] = parser.get("pipeline", "output_dir", fallback=None)
        return cls.from_dict(d)

    def to_ini(self, path) -> None:
        parser = configparser.ConfigParser()
        for name in self._SECTIONS:
            parser[name] = {k: "none" if v is None else str(v) for k, v in asdict(getattr(self, name)).items()}
        pipe = {k: v for k, v in (("manifest", self.manifest), ("output_dir", self.output_dir)) if v}
        if pipe:
            parser["pipeline"] = pipe
        with open(path, "w") as fh:
            parser.write(fh)


def _coerce(raw: str, default):
    raw = raw.strip()
    if raw.lower() == "none":
        return None
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float) or default is None:
        try:
            return float(raw)
        except ValueError:
            return raw
    return raw


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Provenance:
    stage: str
    config: PipelineConfig
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)
    started: float = field(default_factory=time.perf_counter)

    def record(self) -> dict:
        return {
            "stage": self.stage,
            "config": self.config.to_dict(),
            "config_sha256": self.config.digest(),
            "inputs": {str(p): sha256_file(p) for p in self.inputs},
            "outputs": {str(p): sha256_file(p) for p in self.outputs},
            "versions": {
                "chisep_atlas": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
            "notes": self.notes,
            "elapsed_s": round(time.perf_counter() - self.started, 3),
        }

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.record(), indent=1, default=_json_default))
        return path


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")
