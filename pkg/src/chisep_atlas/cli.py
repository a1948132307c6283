"""Command-line entry point: ``chisep-atlas <stage> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PipelineConfig
from .stages import StageError, run_stage

logger = logging.getLogger("chisep_atlas")


def load_config(path) -> PipelineConfig:
    """An INI file, or a provenance JSON whose recorded config is reused verbatim."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such config file: {path}")
    if path.suffix == ".json":
        rec = json.loads(path.read_text())
        return PipelineConfig.from_dict(rec.get("config", rec))
    return PipelineConfig.from_ini(path)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config or a provenance JSON from an earlier run")
    p.add_argument("-o", "--out", default=".", help="output directory (default: current)")
    p.add_argument("--format", dest="output_format", choices=(".nii", ".nii.gz", ".json"), help="volume file format")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _phase_sign(p):
    p.add_argument("--phase-sign", type=int, choices=(1, -1), help="multiply stored phase by this sign")


def _vsharp_flags(p):
    p.add_argument("--r-max", dest="r_max_mm", type=float, help="largest V-SHARP radius (mm)")
    p.add_argument("--r-min", dest="r_min_mm", type=float, help="smallest V-SHARP radius (mm)")
    p.add_argument("--tsvd", dest="tsvd_threshold", type=float, help="TSVD threshold of the deconvolution")


def _r2_flags(p):
    p.add_argument("--r2-baseline", type=float, help="non-susceptibility R2 subtracted from R2* (1/s)")


def _chisep_flags(p):
    p.add_argument("--dr-para", type=float, help="paramagnetic relaxometric constant (Hz/ppm)")
    p.add_argument("--dr-dia", type=float, help="diamagnetic relaxometric constant (Hz/ppm)")
    p.add_argument("--lambda-r2p", type=float)
    p.add_argument("--lambda-grad", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--solver-seed", type=int, help="seed of the step-size power iteration")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chisep-atlas", description="Susceptibility source separation and atlas pipeline")
    sub = ap.add_subparsers(dest="stage", required=True)

    p = sub.add_parser("simulate", help="simulate multi-echo GRE data from a phantom spec")
    _common(p)
    p.add_argument("--spec", help="phantom JSON (default: bundled 64^3 phantom)")
    p.add_argument("--seed", type=int, help="noise seed (overrides the spec)")

    p = sub.add_parser("unwrap-combine", help="unwrap echoes and combine into a frequency map")
    _common(p)
    _phase_sign(p)
    p.add_argument("--gre", required=True, help="gre.json descriptor")
    p.add_argument("--mask", required=True)

    p = sub.add_parser("vsharp", help="remove the background field")
    _common(p)
    _vsharp_flags(p)
    p.add_argument("--field", required=True)
    p.add_argument("--mask", required=True)

    p = sub.add_parser("r2star", help="fit R2* and S0")
    _common(p)
    _phase_sign(p)
    p.add_argument("--gre", required=True)
    p.add_argument("--mask", required=True)

    p = sub.add_parser("chisep", help="separate paramagnetic and diamagnetic susceptibility")
    _common(p)
    _chisep_flags(p)
    _r2_flags(p)
    p.add_argument("--field", required=True, help="tissue field (Hz)")
    p.add_argument("--r2star", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--gre", help="gre.json to take B0 strength and direction from")

    p = sub.add_parser("hybrid", help="build a T1/QSM hybrid image")
    _common(p)
    p.add_argument("--t1", required=True)
    p.add_argument("--qsm", required=True)
    p.add_argument("--mask")
    p.add_argument("--targets", help="JSON list of 11 T1 decile targets")
    p.add_argument("--weight", type=float, help="QSM weight per ppb")

    p = sub.add_parser("atlas", help="mean, SD and rSD maps over a subject manifest")
    _common(p)
    p.add_argument("--manifest", required=True, help="CSV with id, age, sex, site and map-path columns")
    p.add_argument("--mask")
    p.add_argument("--targets", help="JSON list of 11 T1 decile targets (default: cohort average)")

    p = sub.add_parser("roi", help="population ROI table")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels", help="label volume shared by all subjects")

    p = sub.add_parser("regress", help="chi_para against iron regression")
    _common(p)
    p.add_argument("--csv", help="two columns: iron, chi_para (default: built-in reference nuclei)")

    p = sub.add_parser("run-all", help="simulate then run the single-subject chain")
    _common(p)
    _phase_sign(p)
    _vsharp_flags(p)
    _r2_flags(p)
    _chisep_flags(p)
    p.add_argument("--spec")
    p.add_argument("--seed", type=int)
    return ap


def _configure(args) -> PipelineConfig:
    cfg = load_config(args.config)
    get = lambda name: getattr(args, name, None)  # noqa: E731
    cfg = cfg.override("io", phase_sign=get("phase_sign"), output_format=get("output_format"))
    cfg = cfg.override("vsharp", r_max_mm=get("r_max_mm"), r_min_mm=get("r_min_mm"), tsvd_threshold=get("tsvd_threshold"))
    cfg = cfg.override("r2star", r2_baseline=get("r2_baseline"))
    cfg = cfg.override(
        "chisep",
        dr_para=get("dr_para"),
        dr_dia=get("dr_dia"),
        lambda_r2p=get("lambda_r2p"),
        lambda_grad=get("lambda_grad"),
        max_iter=get("max_iter"),
        tol=get("tol"),
        seed=get("solver_seed"),
    )
    cfg = cfg.override("atlas", decile_targets=get("targets"), hybrid_weight=get("weight"))
    return cfg


def _inputs(args) -> dict:
    s = args.stage
    if s == "simulate" or s == "run-all":
        return {"spec_path": args.spec, "seed": args.seed}
    if s in ("unwrap-combine", "r2star"):
        return {"gre_path": args.gre, "mask_path": args.mask}
    if s == "vsharp":
        return {"field_path": args.field, "mask_path": args.mask}
    if s == "chisep":
        return {"field_path": args.field, "r2star_path": args.r2star, "mask_path": args.mask, "gre_path": args.gre}
    if s == "hybrid":
        return {"t1_path": args.t1, "qsm_path": args.qsm, "mask_path": args.mask}
    if s == "atlas":
        return {"manifest_path": args.manifest, "mask_path": args.mask}
    if s == "roi":
        return {"manifest_path": args.manifest, "labels_path": args.labels}
    return {"csv_path": args.csv}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _configure(args)
    except (ValueError, FileNotFoundError, TypeError) as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return 2
    try:
        outs = run_stage(args.stage, cfg, args.out, **_inputs(args))
    except StageError as exc:
        print(f"error [{exc.stage}]: {exc.args[0]}", file=sys.stderr)
        return 1
    for key, path in outs.items():
        print(f"{key}\t{path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
