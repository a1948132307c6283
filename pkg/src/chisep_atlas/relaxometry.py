"""Mono-exponential R2* fitting and the R2' surrogate."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .volume import BinaryMask, MultiEchoGre, ScalarVolume, Unit

logger = logging.getLogger(__name__)

__all__ = ["R2StarFit", "fit_r2star", "r2prime_from_r2star", "R2STAR_MAX"]

R2STAR_MAX = 2000.0
_EPS_MAG = 1e-6


@dataclass(frozen=True)
class R2StarFit:
    r2star: ScalarVolume
    s0: ScalarVolume
    residual_rms: ScalarVolume
    valid: BinaryMask
    iterations: int


def _loglinear(te: np.ndarray, mags: np.ndarray):
    """Closed-form fit of ln M = ln S0 - R2* TE for every column of ``mags``."""
    logm = np.log(np.maximum(mags, _EPS_MAG))
    tm = te.mean()
    dt = te - tm
    slope = (dt[:, None] * (logm - logm.mean(axis=0))).sum(axis=0) / (dt**2).sum()
    r2 = -slope
    s0 = np.exp(logm.mean(axis=0) + r2 * tm)
    return s0, r2


def _sse(te, mags, s0, r2):
    res = mags - s0[None, :] * np.exp(-np.outer(te, r2))
    return (res**2).sum(axis=0)


def _gauss_newton(te, mags, s0, r2, max_iter=50, tol=1e-8):
    """Damped Gauss-Newton on (S0, R2*); a step is halved until the SSE does not grow."""
    cost = _sse(te, mags, s0, r2)
    active = np.ones(s0.shape, bool)
    it = 0
    for it in range(1, max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        a, b = s0[idx], r2[idx]
        e = np.exp(-np.outer(te, b))
        res = mags[:, idx] - a * e
        ja = e  # d model / d S0
        jb = -a * te[:, None] * e  # d model / d R2*
        h11 = (ja * ja).sum(0)
        h12 = (ja * jb).sum(0)
        h22 = (jb * jb).sum(0)
        g1 = (ja * res).sum(0)
        g2 = (jb * res).sum(0)
        det = h11 * h22 - h12**2
        ok = np.abs(det) > 1e-300
        da = np.where(ok, (h22 * g1 - h12 * g2) / np.where(ok, det, 1.0), 0.0)
        db = np.where(ok, (h11 * g2 - h12 * g1) / np.where(ok, det, 1.0), 0.0)

        step = np.ones_like(a)
        new_a, new_b = a + da, np.clip(b + db, 0.0, R2STAR_MAX)
        new_cost = _sse(te, mags[:, idx], new_a, new_b)
        worse = new_cost > cost[idx]
        for _ in range(30):
            if not worse.any():
                break
            step[worse] *= 0.5
            new_a = np.where(worse, a + step * da, new_a)
            new_b = np.where(worse, np.clip(b + step * db, 0.0, R2STAR_MAX), new_b)
            new_cost = np.where(worse, _sse(te, mags[:, idx], new_a, new_b), new_cost)
            worse = new_cost > cost[idx]
        # reject steps that still increase the cost
        new_a = np.where(worse, a, new_a)
        new_b = np.where(worse, b, new_b)
        new_cost = np.where(worse, cost[idx], new_cost)

        rel = np.maximum(
            np.abs(new_a - a) / np.maximum(np.abs(a), 1e-12),
            np.abs(new_b - b) / np.maximum(np.abs(b), 1e-12),
        )
        s0[idx], r2[idx], cost[idx] = new_a, new_b, new_cost
        converged = (rel < tol) | worse | (new_cost == 0)
        active[idx[converged]] = False
    return s0, r2, cost, it


def fit_r2star(gre: MultiEchoGre, mask: BinaryMask | None = None, max_iter: int = 50, tol: float = 1e-8) -> R2StarFit:
    """Per-voxel least-squares fit of M_i = S0 exp(-R2* TE_i).

    Voxels with fewer than two positive echoes are flagged invalid (R2* = 0).
    """
    dims = gre.dims
    sel = np.ones(dims, bool) if mask is None else mask.data.copy()
    te = np.asarray(gre.te_s, dtype=np.float64)
    mags = np.stack([m.data[sel] for m in gre.magnitude]).astype(np.float64)
    if (mags < 0).any():
        raise ValueError("magnitudes must be non-negative")
    enough = (mags > 0).sum(axis=0) >= 2

    n = mags.shape[1]
    s0 = np.zeros(n)
    r2 = np.zeros(n)
    sse = np.zeros(n)
    iters = 0
    if enough.any():
        y = mags[:, enough]
        a, b = _loglinear(te, y)
        b = np.clip(b, 0.0, R2STAR_MAX)
        # optimal S0 for the clipped R2*: keeps the init consistent with the bounds
        e = np.exp(-np.outer(te, b))
        a = (e * y).sum(0) / (e * e).sum(0)
        a, b, c, iters = _gauss_newton(te, y, a, b, max_iter=max_iter, tol=tol)
        s0[enough], r2[enough], sse[enough] = a, b, c
    if (~enough).any():
        logger.info("fit_r2star: %d voxels with < 2 positive echoes flagged invalid", int((~enough).sum()))

    def put(vals, unit):
        full = np.zeros(dims)
        full[sel] = vals
        return ScalarVolume(full, gre.voxel_size_mm, unit)

    valid = np.zeros(dims, bool)
    valid[sel] = enough
    return R2StarFit(
        r2star=put(r2, Unit.PER_SECOND),
        s0=put(np.maximum(s0, 0.0), Unit.DIMENSIONLESS),
        residual_rms=put(np.sqrt(sse / len(te)), Unit.DIMENSIONLESS),
        valid=BinaryMask(valid, gre.voxel_size_mm),
        iterations=iters,
    )


def r2prime_from_r2star(r2star: ScalarVolume, r2_baseline: float = 10.0) -> ScalarVolume:
    """R2' = max(R2* - R2, 0) with a constant R2 baseline (1/s)."""
    if r2_baseline < 0:
        raise ValueError(f"r2_baseline must be >= 0, got {r2_baseline}")
    return r2star.with_data(np.maximum(r2star.data - r2_baseline, 0.0), Unit.PER_SECOND)
