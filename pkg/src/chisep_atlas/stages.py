"""Pipeline stages that read and write on-disk intermediates.

Every stage takes a :class:`PipelineConfig`, explicit input paths and an output
directory, writes its volumes there together with ``<stage>.provenance.json``,
and returns the written paths. Stages share nothing in memory, so any one of
them can be rerun from the files of the previous one.
"""
from __future__ import annotations

import csv
import json
import logging
import warnings
from importlib import resources
from pathlib import Path

import numpy as np

from .atlas import aggregate, cohort_target_deciles, hybrid_image, normalize_deciles, scale_to_range
from .config import PipelineConfig, Provenance
from .dipole import make_dipole_kernel, padded_dims
from .phase import FieldMap, combine_echoes, unwrap_echoes, vsharp
from .relaxometry import fit_r2star, r2prime_from_r2star
from .roi import IRON_NUCLEI, fit_regression, population_stats, reference_iron_points, subject_medians
from .separation import ConvergenceWarning, separate
from .simulator import PhantomSpec, render_phantom, simulate_gre
from .volume import (
    BinaryMask,
    ScalarVolume,
    Unit,
    load_gre,
    load_labels,
    load_mask,
    load_volume,
    save_gre,
    save_mask,
    save_volume,
)

logger = logging.getLogger(__name__)

__all__ = ["StageError", "STAGES", "run_stage", "bundled_phantom", "bundled_config"]

MANIFEST_DEMOGRAPHICS = ("id", "age", "sex", "site")
MAP_COLUMNS = ("chi_para", "chi_dia", "qsm", "hybrid")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage

    def __str__(self) -> str:
        return f"[{self.stage}] {self.args[0]}"


def bundled_phantom() -> Path:
    return Path(str(resources.files("chisep_atlas") / "data" / "phantom_64.json"))


def bundled_config() -> Path:
    return Path(str(resources.files("chisep_atlas") / "data" / "pipeline.ini"))


def _require(stage: str, *paths) -> None:
    for p in paths:
        if p is None:
            continue
        if not Path(p).exists():
            raise StageError(stage, f"missing input file: {p}")


def _out(cfg: PipelineConfig, out_dir: Path, stem: str) -> Path:
    return out_dir / f"{stem}{cfg.io.output_format}"


def _finish(prov: Provenance, out_dir: Path) -> Path:
    return prov.write(out_dir / f"{prov.stage}.provenance.json")


# ---------------------------------------------------------------------------
# single-subject chain


def simulate(cfg: PipelineConfig, out_dir, spec_path=None, seed: int | None = None) -> dict[str, Path]:
    spec_path = Path(spec_path) if spec_path is not None else bundled_phantom()
    _require("simulate", spec_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = PhantomSpec.from_json(spec_path)
    if seed is not None:
        spec = PhantomSpec.from_dict({**spec.to_dict(), "seed": seed})
    para, dia, mask = render_phantom(spec)
    gre, truth = simulate_gre(para, dia, spec, mask=mask)

    outs = {"gre": save_gre(gre, out_dir / "gre", cfg.io.output_format)}
    outs["mask"] = _out(cfg, out_dir, "mask")
    save_mask(mask, outs["mask"])
    truth["chi_para"] = para
    truth["chi_dia"] = dia
    truth["qsm"] = para.with_data(para.data + dia.data)
    for name, vol in truth.items():
        outs[f"truth_{name}"] = _out(cfg, out_dir, f"truth_{name}")
        save_volume(vol, outs[f"truth_{name}"])
    outs["phantom"] = out_dir / "phantom.json"
    spec.to_json(outs["phantom"])

    prov = Provenance("simulate", cfg, inputs=[spec_path], outputs=list(outs.values()), notes={"seed": spec.seed})
    outs["provenance"] = _finish(prov, out_dir)
    return outs


def unwrap_combine(cfg: PipelineConfig, out_dir, gre_path, mask_path) -> dict[str, Path]:
    _require("unwrap-combine", gre_path, mask_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gre = load_gre(gre_path, cfg.io.phase_sign)
    mask = load_mask(mask_path)
    unwrapped = unwrap_echoes(gre, mask)
    fm = combine_echoes(gre, unwrapped)
    keep = mask.data & fm.mask.data
    field = FieldMap(fm.volume, BinaryMask(keep, mask.voxel_size_mm))
    outs = {"field": _out(cfg, out_dir, "field")}
    save_volume(field.volume, outs["field"])
    prov = Provenance("unwrap-combine", cfg, inputs=[gre_path, mask_path], outputs=list(outs.values()))
    outs["provenance"] = _finish(prov, out_dir)
    return outs


def background_removal(cfg: PipelineConfig, out_dir, field_path, mask_path) -> dict[str, Path]:
    _require("vsharp", field_path, mask_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mask = load_mask(mask_path)
    vol = load_volume(field_path, Unit.HZ)
    v = cfg.vsharp
    res = vsharp(FieldMap(vol, mask), mask, v.r_max_mm, v.r_min_mm, v.tsvd_threshold)
    outs = {"tissue_field": _out(cfg, out_dir, "tissue_field"), "tissue_mask": _out(cfg, out_dir, "tissue_mask")}
    save_volume(res.field.volume, outs["tissue_field"])
    save_mask(res.mask, outs["tissue_mask"])
    prov = Provenance(
        "vsharp", cfg, inputs=[field_path, mask_path], outputs=list(outs.values()), notes={"radii_mm": list(res.radii_mm)}
    )
    outs["provenance"] = _finish(prov, out_dir)
    return outs


def r2star(cfg: PipelineConfig, out_dir, gre_path, mask_path) -> dict[str, Path]:
    _require("r2star", gre_path, mask_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gre = load_gre(gre_path, cfg.io.phase_sign)
    mask = load_mask(mask_path)
    fit = fit_r2star(gre, mask, cfg.r2star.max_iter, cfg.r2star.tol)
    outs = {"r2star": _out(cfg, out_dir, "r2star"), "s0": _out(cfg, out_dir, "s0")}
    save_volume(fit.r2star, outs["r2star"])
    save_volume(fit.s0, outs["s0"])
    n_bad = int((mask.data & ~fit.valid.data).sum())
    prov = Provenance(
        "r2star", cfg, inputs=[gre_path, mask_path], outputs=list(outs.values()), notes={"invalid_voxels": n_bad}
    )
    outs["provenance"] = _finish(prov, out_dir)
    return outs


def chisep(cfg: PipelineConfig, out_dir, field_path, r2star_path, mask_path, gre_path=None) -> dict[str, Path]:
    """Separate; B0 strength and direction come from ``gre_path`` when given."""
    _require("chisep", field_path, r2star_path, mask_path, gre_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mask = load_mask(mask_path)
    b0_dir = (0.0, 0.0, 1.0)
    if gre_path is not None:
        desc = json.loads(Path(gre_path).read_text())
        b0_dir = tuple(desc.get("b0_dir", b0_dir))
        cfg = cfg.override("chisep", b0_tesla=float(desc["b0_tesla"]))
    field = FieldMap(load_volume(field_path, Unit.HZ), mask)
    r2p = r2prime_from_r2star(load_volume(r2star_path, Unit.PER_SECOND), cfg.r2star.r2_baseline)
    vox = mask.voxel_size_mm
    kernel = make_dipole_kernel(padded_dims(mask.dims, cfg.chisep.kernel_pad_factor), vox, b0_dir)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        res = separate(field, r2p, mask, kernel, cfg.chisep)
    for w in caught:
        logger.warning("%s", w.message)

    outs = {k: _out(cfg, out_dir, k) for k in ("chi_para", "chi_dia", "qsm", "r2prime")}
    save_volume(res.chi_para, outs["chi_para"])
    save_volume(res.chi_dia, outs["chi_dia"])
    save_volume(res.qsm, outs["qsm"])
    save_volume(r2p, outs["r2prime"])
    notes = res.summary()
    notes.pop("config")
    notes["b0_dir"] = list(b0_dir)
    # R2 is not measured: a constant baseline stands in for it
    notes["assumed_r2_baseline"] = cfg.r2star.r2_baseline
    inputs = [p for p in (field_path, r2star_path, mask_path, gre_path) if p is not None]
    prov = Provenance("chisep", cfg, inputs=inputs, outputs=list(outs.values()), notes=notes)
    outs["provenance"] = _finish(prov, out_dir)
    return outs


def run_all(cfg: PipelineConfig, out_dir, spec_path=None, seed: int | None = None) -> dict[str, Path]:
    out_dir = Path(out_dir)
    sim = simulate(cfg, out_dir, spec_path, seed)
    uc = unwrap_combine(cfg, out_dir, sim["gre"], sim["mask"])
    vs = background_removal(cfg, out_dir, uc["field"], sim["mask"])
    rs = r2star(cfg, out_dir, sim["gre"], sim["mask"])
    cs = chisep(cfg, out_dir, vs["tissue_field"], rs["r2star"], vs["tissue_mask"], sim["gre"])
    outs = {}
    for stage, d in (("simulate", sim), ("unwrap-combine", uc), ("vsharp", vs), ("r2star", rs), ("chisep", cs)):
        outs.update({f"{stage}:{k}": v for k, v in d.items()})
    return outs


# ---------------------------------------------------------------------------
# cohort stages


def hybrid(cfg: PipelineConfig, out_dir, t1_path, qsm_path, mask_path=None) -> dict[str, Path]:
    """Decile-standardise T1 (targets from config), rescale to 0-255, subtract weighted QSM."""
    targets_src = cfg.atlas.decile_targets
    _require("hybrid", t1_path, qsm_path, mask_path, None if targets_src == "cohort" else targets_src)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mask = load_mask(mask_path) if mask_path is not None else None
    t1 = load_volume(t1_path)
    qsm = load_volume(qsm_path, Unit.PPB)
    t1n = _standardise_t1(t1, mask, None if targets_src == "cohort" else _read_targets(targets_src))
    out = {"hybrid": _out(cfg, out_dir, "hybrid")}
    save_volume(hybrid_image(t1n, qsm, cfg.atlas.hybrid_weight), out["hybrid"])
    inputs = [p for p in (t1_path, qsm_path, mask_path) if p is not None]
    out["provenance"] = _finish(Provenance("hybrid", cfg, inputs=inputs, outputs=[out["hybrid"]]), out_dir)
    return out


def _read_targets(path) -> np.ndarray:
    vals = json.loads(Path(path).read_text())
    return np.asarray(vals["deciles"] if isinstance(vals, dict) else vals, dtype=np.float64)


def _standardise_t1(t1: ScalarVolume, mask, targets) -> ScalarVolume:
    if targets is not None:
        t1 = normalize_deciles(t1, targets, mask)
    return scale_to_range(t1, 0.0, 255.0, mask)


def read_manifest(path) -> list[dict[str, str]]:
    """Subject rows; map paths are resolved relative to the manifest's directory."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"manifest {path} has no subjects")
    missing = [c for c in MANIFEST_DEMOGRAPHICS if c not in rows[0]]
    if missing:
        raise ValueError(f"manifest {path} lacks columns {missing}")
    for row in rows:
        for key, val in row.items():
            if key not in MANIFEST_DEMOGRAPHICS and val:
                p = Path(val)
                row[key] = str(p if p.is_absolute() else path.parent / p)
    return rows


def atlas(cfg: PipelineConfig, out_dir, manifest_path, mask_path=None) -> dict[str, Path]:
    """Mean / SD / rSD volumes for every map column in the manifest.

    If the manifest has ``t1`` and ``qsm`` columns, per-subject hybrid images are
    built first using cohort-average decile targets (or the configured file).
    """
    stage = "atlas"
    _require(stage, manifest_path, mask_path)
    try:
        rows = read_manifest(manifest_path)
    except ValueError as exc:
        raise StageError(stage, str(exc)) from exc
    for row in rows:
        _require(stage, *(v for k, v in row.items() if k not in MANIFEST_DEMOGRAPHICS and v))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mask = load_mask(mask_path) if mask_path is not None else None

    maps: dict[str, list[ScalarVolume]] = {}
    for col in MAP_COLUMNS:
        if col in rows[0] and col != "hybrid":
            maps[col] = [load_volume(r[col]) for r in rows]
    if "t1" in rows[0] and "qsm" in maps:
        t1s = [load_volume(r["t1"]) for r in rows]
        if cfg.atlas.decile_targets == "cohort":
            targets = cohort_target_deciles(t1s, [mask] * len(t1s) if mask is not None else None)
        else:
            targets = _read_targets(cfg.atlas.decile_targets)
        maps["hybrid"] = [
            hybrid_image(_standardise_t1(t1, mask, targets), q, cfg.atlas.hybrid_weight)
            for t1, q in zip(t1s, maps["qsm"])
        ]
    if not maps:
        raise StageError(stage, f"manifest {manifest_path} has none of the map columns {MAP_COLUMNS}")

    outs: dict[str, Path] = {}
    for col, vols in maps.items():
        bundle = aggregate(vols, mask)
        for suffix, vol in (("mean", bundle.mean), ("sd", bundle.per_voxel_sd), ("rsd", bundle.rsd)):
            outs[f"{col}_{suffix}"] = _out(cfg, out_dir, f"{col}_{suffix}")
            save_volume(vol, outs[f"{col}_{suffix}"])
    inputs = [manifest_path] + ([mask_path] if mask_path else [])
    prov = Provenance(stage, cfg, inputs=inputs, outputs=list(outs.values()), notes={"n_subjects": len(rows)})
    outs["provenance"] = _finish(prov, out_dir)
    return outs


def roi(cfg: PipelineConfig, out_dir, manifest_path, labels_path=None) -> dict[str, Path]:
    """Population ROI table from per-subject maps and label volumes.

    Labels come from a ``labels`` manifest column or, for all subjects, from
    ``labels_path``. A missing ``qsm`` column is filled with chi_para + chi_dia.
    """
    stage = "roi"
    _require(stage, manifest_path, labels_path)
    try:
        rows = read_manifest(manifest_path)
    except ValueError as exc:
        raise StageError(stage, str(exc)) from exc
    for col in ("chi_para", "chi_dia"):
        if col not in rows[0]:
            raise StageError(stage, f"manifest {manifest_path} lacks column {col!r}")
    if labels_path is None and "labels" not in rows[0]:
        raise StageError(stage, "no label volume: pass one or add a 'labels' manifest column")
    for row in rows:
        _require(stage, *(v for k, v in row.items() if k not in MANIFEST_DEMOGRAPHICS and v))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    shared = load_labels(labels_path) if labels_path is not None else None
    names = None
    mats = {"chi_para": [], "chi_dia": [], "qsm": []}
    for row in rows:
        labels = shared if shared is not None else load_labels(row["labels"])
        ids = sorted(labels.names)
        if names is None:
            names = [labels.names[i] for i in ids]
        elif [labels.names[i] for i in ids] != names:
            raise StageError(stage, f"subject {row['id']}: label names differ from the first subject")
        para = load_volume(row["chi_para"], Unit.PPB)
        dia = load_volume(row["chi_dia"], Unit.PPB)
        qsm = load_volume(row["qsm"], Unit.PPB) if row.get("qsm") else para.with_data(para.data + dia.data)
        for key, vol in (("chi_para", para), ("chi_dia", dia), ("qsm", qsm)):
            mats[key].append(subject_medians(vol, labels, ids))
    table = population_stats(mats["chi_para"], mats["chi_dia"], mats["qsm"], names)
    outs = {"table": out_dir / "roi_stats.csv"}
    table.to_csv(outs["table"])
    inputs = [manifest_path] + ([labels_path] if labels_path else [])
    outs["provenance"] = _finish(Provenance(stage, cfg, inputs=inputs, outputs=[outs["table"]]), out_dir)
    return outs


def read_xy_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Two numeric columns (iron, chi_para); a non-numeric first row is a header."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    try:
        float(rows[0][0])
    except (ValueError, IndexError):
        rows = rows[1:]
    data = np.asarray([[float(r[0]), float(r[1])] for r in rows])
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError(f"{path}: no data rows")
    return data[:, 0], data[:, 1]


def regress(cfg: PipelineConfig, out_dir, csv_path=None) -> dict[str, Path]:
    """Fit chi_para against iron; without a CSV, uses the built-in reference nuclei."""
    stage = "regress"
    _require(stage, csv_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if csv_path is None:
        x, y = reference_iron_points()
    else:
        try:
            x, y = read_xy_csv(csv_path)
        except (ValueError, IndexError) as exc:
            raise StageError(stage, f"bad regression CSV {csv_path}: {exc}") from exc
    res = fit_regression(x, y)
    outs = {"regression": out_dir / "regression.json"}
    outs["regression"].write_text(json.dumps(res.to_dict(), indent=1))
    inputs = [csv_path] if csv_path is not None else []
    notes = {"reference_data": csv_path is None}
    if csv_path is None:
        notes["assumed_nuclei"] = list(IRON_NUCLEI)
    prov = Provenance(stage, cfg, inputs=inputs, outputs=[outs["regression"]], notes=notes)
    outs["provenance"] = _finish(prov, out_dir)
    return outs


STAGES = {
    "simulate": simulate,
    "unwrap-combine": unwrap_combine,
    "vsharp": background_removal,
    "r2star": r2star,
    "chisep": chisep,
    "hybrid": hybrid,
    "atlas": atlas,
    "roi": roi,
    "regress": regress,
    "run-all": run_all,
}


def run_stage(name: str, config: PipelineConfig, out_dir, **inputs) -> dict[str, Path]:
    """Run one stage; module precondition failures are re-raised as :class:`StageError`."""
    if name not in STAGES:
        raise StageError(name, f"unknown stage; choose from {sorted(STAGES)}")
    try:
        return STAGES[name](config, out_dir, **inputs)
    except StageError:
        raise
    except (ValueError, FileNotFoundError, KeyError) as exc:
        raise StageError(name, str(exc)) from exc
