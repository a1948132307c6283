"""ROI medians, population tables and the susceptibility-iron regression."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy import stats

from .volume import LabelVolume, ScalarVolume, VolumeError

__all__ = [
    "TABLE_S1",
    "TABLE_S1_ROIS",
    "IRON_NUCLEI",
    "ADULT_IRON_MG_PER_100G",
    "RoiRow",
    "RoiTable",
    "RegressionResult",
    "make_exclusive",
    "roi_median",
    "subject_medians",
    "population_stats",
    "fit_regression",
    "reference_iron_points",
]

# (group, ROI, chi_para mean, chi_para SD, chi_dia mean, chi_dia SD), ppb, 106 subjects
TABLE_S1 = (
    ("subcortical", "Caudate", 47.7, 7.4, -8.2, 4.9),
    ("subcortical", "Putamen", 77.1, 20.6, -10.3, 5.9),
    ("subcortical", "Globus pallidus", 131.9, 10.4, -12.6, 7.3),
    ("subcortical", "Nucleus accumbens", 45.4, 13.2, -23.4, 5.6),
    ("subcortical", "Substantia nigra", 115.7, 14.4, -11.1, 4.5),
    ("subcortical", "Red nucleus", 112.0, 14.8, -10.1, 4.1),
    ("subcortical", "Ventral pallidum", 144.3, 27.0, -22.1, 13.1),
    ("subcortical", "Subthalamic nucleus", 112.1, 12.1, -15.3, 5.9),
    ("thalamus", "Medial thalamic nuclei", 31.2, 7.6, -11.8, 5.9),
    ("thalamus", "Lateral thalamic nuclei", 22.0, 5.2, -22.4, 4.7),
    ("thalamus", "Pulvinar", 52.1, 11.6, -4.4, 3.2),
    ("white matter", "Inferior cerebellar peduncle", 19.6, 2.5, -29.4, 2.5),
    ("white matter", "Middle cerebellar peduncle", 20.7, 1.7, -30.0, 2.0),
    ("white matter", "Superior cerebellar peduncle", 21.6, 3.2, -36.9, 3.4),
    ("white matter", "Pontine crossing tract", 24.7, 2.7, -34.2, 4.3),
    ("white matter", "Genu of corpus callosum", 17.3, 1.6, -29.4, 2.6),
    ("white matter", "Body of corpus callosum", 14.7, 1.8, -34.4, 2.5),
    ("white matter", "Splenium of corpus callosum", 16.7, 2.5, -40.8, 2.9),
    ("white matter", "Fornix", 28.7, 5.3, -38.1, 6.0),
    ("white matter", "Corticospinal tract", 24.4, 2.1, -25.3, 2.5),
    ("white matter", "Medial lemniscus", 23.9, 2.9, -26.4, 4.4),
    ("white matter", "Cerebral peduncle", 26.0, 2.5, -41.1, 3.5),
    ("white matter", "Anterior limb of internal capsule", 15.7, 2.1, -39.7, 3.5),
    ("white matter", "Posterior limb of internal capsule", 9.7, 2.5, -50.0, 2.9),
    ("white matter", "Retrolenticular part of internal capsule", 17.6, 2.6, -38.2, 3.2),
    ("white matter", "Anterior corona radiata", 13.9, 1.6, -26.7, 2.8),
    ("white matter", "Superior corona radiata", 14.0, 1.6, -31.4, 2.8),
    ("white matter", "Posterior corona radiata", 13.9, 2.2, -31.8, 2.4),
    ("white matter", "Posterior thalamic radiation", 13.2, 2.2, -38.3, 3.6),
    ("white matter", "Sagittal stratum", 17.4, 1.9, -34.9, 3.2),
    ("white matter", "External capsule", 9.3, 2.0, -32.8, 4.3),
    ("white matter", "Cingulum (cingulate gyrus)", 18.4, 2.7, -21.5, 2.5),
    ("white matter", "Cingulum (hippocampus)", 21.3, 2.2, -20.5, 2.1),
    ("white matter", "Fornix (cres) / Stria terminalis", 20.0, 2.0, -36.1, 3.5),
    ("white matter", "Superior longitudinal fasciculus", 21.3, 1.5, -31.7, 2.8),
    ("white matter", "Superior fronto-occipital fasciculus", 9.9, 2.0, -39.5, 4.7),
    ("white matter", "Inferior fronto-occipital fasciculus", 12.7, 2.0, -32.2, 4.3),
    ("white matter", "Uncinate fasciculus", 11.7, 2.8, -26.6, 3.5),
    ("white matter", "Tapetum", 18.3, 3.9, -21.1, 3.8),
    ("white matter", "Whole white matter", 16.8, 1.1, -28.8, 1.9),
)
TABLE_S1_ROIS = tuple(row[1] for row in TABLE_S1)

# Hallgren & Sourander (1958) non-haem iron, adults 30-100 y, mg / 100 g fresh weight
ADULT_IRON_MG_PER_100G = {
    "Caudate": 9.28,
    "Putamen": 13.32,
    "Globus pallidus": 21.30,
    "Substantia nigra": 18.46,
    "Red nucleus": 19.48,
}
IRON_NUCLEI = tuple(ADULT_IRON_MG_PER_100G)


def reference_iron_points() -> tuple[np.ndarray, np.ndarray]:
    """(iron mg/100 g, population chi_para ppb) for the five iron-rich nuclei."""
    chi = {row[1]: row[2] for row in TABLE_S1}
    x = np.array([ADULT_IRON_MG_PER_100G[n] for n in IRON_NUCLEI])
    y = np.array([chi[n] for n in IRON_NUCLEI])
    return x, y


# ---------------------------------------------------------------------------
# label handling


def make_exclusive(label_sets) -> LabelVolume:
    """Merge label sets, dropping every voxel claimed by more than one set.

    Label ids are kept when they are unambiguous across sets; a set whose ids
    collide with an earlier set (same id, different name) is shifted past the
    largest id seen so far.
    """
    label_sets = list(label_sets)
    if not label_sets:
        raise ValueError("no label sets given")
    dims = label_sets[0].dims
    for ls in label_sets[1:]:
        if ls.dims != dims:
            raise VolumeError(f"dim mismatch: {ls.dims} vs {dims}")

    claims = np.zeros(dims, np.int32)
    out = np.zeros(dims, np.int64)
    names: dict[int, str] = {}
    for ls in label_sets:
        data = ls.data
        offset = 0
        if any(k in names and names[k] != v for k, v in ls.names.items()):
            offset = max(names)
        claimed = data > 0
        claims += claimed
        out[claimed] = data[claimed] + offset
        for k, v in ls.names.items():
            names[k + offset] = v
    out[claims > 1] = 0
    return LabelVolume(out, names, label_sets[0].voxel_size_mm)


def roi_median(vol: ScalarVolume, labels: LabelVolume, roi: int) -> float:
    """Exact median of ``vol`` over voxels labelled ``roi``."""
    if vol.dims != labels.dims:
        raise VolumeError(f"dim mismatch: map {vol.dims} vs labels {labels.dims}")
    vals = vol.data[labels.data == roi]
    if vals.size == 0:
        raise VolumeError(f"empty ROI {roi} ({labels.names.get(roi, '?')})")
    return float(np.median(vals))


def subject_medians(vol: ScalarVolume, labels: LabelVolume, rois=None) -> np.ndarray:
    rois = sorted(labels.names) if rois is None else rois
    return np.array([roi_median(vol, labels, r) for r in rois])


# ---------------------------------------------------------------------------
# population table


@dataclass(frozen=True)
class RoiRow:
    roi_name: str
    n_subjects: int
    chi_para_mean: float
    chi_para_sd: float
    chi_dia_mean: float
    chi_dia_sd: float
    qsm_mean: float
    qsm_sd: float


@dataclass(frozen=True)
class RoiTable:
    rows: tuple[RoiRow, ...]

    @property
    def roi_names(self) -> list[str]:
        return [r.roi_name for r in self.rows]

    def row(self, name: str) -> RoiRow:
        for r in self.rows:
            if r.roi_name == name:
                return r
        raise KeyError(name)

    def to_csv(self, path) -> None:
        cols = [f.name for f in fields(RoiRow)]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in self.rows:
                w.writerow(asdict(r))

    @classmethod
    def from_csv(cls, path) -> "RoiTable":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append(
                    RoiRow(
                        rec["roi_name"],
                        int(rec["n_subjects"]),
                        *(float(rec[f.name]) for f in fields(RoiRow)[2:]),
                    )
                )
        return cls(tuple(rows))


def _mean_sd(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return mat.mean(axis=0), mat.std(axis=0, ddof=1)


def population_stats(chi_para, chi_dia, qsm, roi_names) -> RoiTable:
    """Mean and sample SD across subjects of per-subject ROI medians.

    Each input is a subjects x ROIs matrix.
    """
    mats = []
    for m in (chi_para, chi_dia, qsm):
        try:
            m = np.asarray(m, dtype=np.float64)
        except ValueError as exc:
            raise ValueError("ragged median matrix") from exc
        mats.append(m)
    shape = mats[0].shape
    if any(m.ndim != 2 or m.shape != shape for m in mats):
        raise ValueError(f"ragged median matrices: {[m.shape for m in mats]}")
    n_sub, n_roi = shape
    if n_sub < 2:
        raise ValueError(f"need at least 2 subjects, got {n_sub}")
    if len(roi_names) != n_roi:
        raise ValueError(f"{len(roi_names)} ROI names for {n_roi} columns")
    (pm, ps), (dm, ds), (qm, qs) = (_mean_sd(m) for m in mats)
    rows = tuple(
        RoiRow(name, n_sub, pm[i], ps[i], dm[i], ds[i], qm[i], qs[i]) for i, name in enumerate(roi_names)
    )
    return RoiTable(rows)


# ---------------------------------------------------------------------------
# regression


@dataclass(frozen=True)
class RegressionResult:
    slope: float
    intercept: float
    r_squared: float
    ci95_slope: tuple[float, float]
    ci95_intercept: tuple[float, float]
    p_slope: float
    p_intercept: float
    n: int
    stderr_slope: float
    stderr_intercept: float
    residual_sd: float
    x_mean: float
    sxx: float

    def predict(self, x):
        return self.intercept + self.slope * np.asarray(x, dtype=float)

    def confidence_band(self, x, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
        """Pointwise confidence interval of the fitted mean line."""
        x = np.asarray(x, dtype=float)
        tq = stats.t.ppf(0.5 + level / 2, self.n - 2)
        half = tq * self.residual_sd * np.sqrt(1.0 / self.n + (x - self.x_mean) ** 2 / self.sxx)
        y = self.predict(x)
        return y - half, y + half

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci95_slope"] = list(self.ci95_slope)
        d["ci95_intercept"] = list(self.ci95_intercept)
        return d


def fit_regression(x, y) -> RegressionResult:
    """Ordinary least squares y = slope x + intercept with t-based inference (n-2 dof)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and of equal length")
    n = x.size
    if n < 3:
        raise ValueError(f"need at least 3 points, got {n}")
    xm, ym = x.mean(), y.mean()
    sxx = float(((x - xm) ** 2).sum())
    if sxx <= 1e-12 * max(1.0, float((x**2).sum())):
        raise ValueError("degenerate regressor: x values are all equal")
    slope = float(((x - xm) * (y - ym)).sum() / sxx)
    intercept = float(ym - slope * xm)
    resid = y - (intercept + slope * x)
    ss_res = float((resid**2).sum())
    ss_tot = float(((y - ym) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    dof = n - 2
    s = np.sqrt(ss_res / dof)
    se_b = s / np.sqrt(sxx)
    se_a = s * np.sqrt(1.0 / n + xm**2 / sxx)
    tq = stats.t.ppf(0.975, dof)

    def pval(est, se):
        if se == 0:
            return 0.0 if est != 0 else 1.0
        return float(2 * stats.t.sf(abs(est / se), dof))

    return RegressionResult(
        slope=slope,
        intercept=intercept,
        r_squared=float(min(max(r2, 0.0), 1.0)),
        ci95_slope=(slope - tq * se_b, slope + tq * se_b),
        ci95_intercept=(intercept - tq * se_a, intercept + tq * se_a),
        p_slope=pval(slope, se_b),
        p_intercept=pval(intercept, se_a),
        n=n,
        stderr_slope=float(se_b),
        stderr_intercept=float(se_a),
        residual_sd=float(s),
        x_mean=float(xm),
        sxx=sxx,
    )
