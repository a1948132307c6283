import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chisep_atlas.dipole import convolve_dipole, forward_field, larmor_hz, make_dipole_kernel, padded_dims
from chisep_atlas.phase import FieldMap
from chisep_atlas.separation import (
    ConvergenceWarning,
    FieldOperator,
    SolverConfig,
    forward_r2prime,
    gradient,
    gradient_adjoint,
    separate,
    tkd_qsm,
)
from chisep_atlas.simulator import PhantomSpec, Shape, render_phantom
from chisep_atlas.volume import BinaryMask, Unit, VolumeError

from conftest import vol

VOX = (1.0, 1.0, 1.0)


# ---------------------------------------------------------------------------
# dipole kernel


def test_kernel_limits():
    k = make_dipole_kernel((8, 8, 8), VOX)
    assert k.spectrum[0, 0, 1] == pytest.approx(-2 / 3, abs=1e-15)  # k along b0
    assert k.spectrum[1, 0, 0] == pytest.approx(1 / 3, abs=1e-15)  # k perpendicular
    assert k.spectrum[0, 0, 0] == 0.0


def test_kernel_magic_angle():
    b = np.ones(3) / np.sqrt(3)
    k = make_dipole_kernel((8, 8, 8), VOX, tuple(b))
    assert abs(k.spectrum[1, 0, 0]) < 1e-12


@settings(max_examples=20, deadline=None)
@given(
    b=st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: np.linalg.norm(v) > 0.1),
    vox=st.tuples(*[st.floats(0.3, 3.0)] * 3),
)
def test_kernel_range(b, vox):
    b = tuple(np.asarray(b) / np.linalg.norm(b))
    k = make_dipole_kernel((6, 7, 8), vox, b)
    assert k.spectrum.min() >= -2 / 3 - 1e-12
    assert k.spectrum.max() <= 1 / 3 + 1e-12
    assert k.spectrum[0, 0, 0] == 0.0


def test_kernel_rejects_bad_input():
    with pytest.raises(ValueError):
        make_dipole_kernel((1, 8, 8), VOX)
    with pytest.raises(ValueError):
        make_dipole_kernel((8, 8, 8), (1.0, 0.0, 1.0))


def test_half_spectrum_matches_full_for_oblique_field(rng):
    # odd sizes: no Nyquist plane, so the full spectrum is exactly Hermitian
    b = (0.3, -0.5, np.sqrt(1 - 0.34))
    k = make_dipole_kernel((9, 11, 13), (1.0, 0.8, 1.2), b)
    x = rng.normal(size=(9, 11, 13))
    full = np.fft.ifftn(k.spectrum * np.fft.fftn(x)).real
    np.testing.assert_allclose(convolve_dipole(x, k), full, atol=1e-12)


def test_larmor_at_3t():
    assert larmor_hz(3.0) == pytest.approx(127.731e6)


def test_zero_chi_zero_field():
    k = make_dipole_kernel((8, 8, 8), VOX)
    out = forward_field(vol(np.zeros((8, 8, 8)), Unit.PPB), k, 3.0)
    assert out.unit is Unit.HZ
    assert not out.data.any()


def test_forward_field_linear(rng):
    k = make_dipole_kernel(padded_dims((12, 12, 12), 1.5), VOX)
    a, b = rng.normal(size=(2, 12, 12, 12))
    fa = forward_field(vol(a, Unit.PPB), k, 3.0).data
    fb = forward_field(vol(b, Unit.PPB), k, 3.0).data
    fab = forward_field(vol(3 * a - 2 * b, Unit.PPB), k, 3.0).data
    np.testing.assert_allclose(fab, 3 * fa - 2 * fb, atol=1e-9)


@pytest.mark.parametrize("pad", [1.0, 2.0])
def test_field_operator_adjoint(rng, pad):
    k = make_dipole_kernel(padded_dims((16, 16, 16), pad), VOX, (0.0, 0.6, 0.8))
    op = FieldOperator(k, 3.0)
    x, y = rng.normal(size=(2, 16, 16, 16))
    lhs = np.vdot(op.forward(x), y)
    rhs = np.vdot(x, op.adjoint(y))
    assert abs(lhs - rhs) <= 1e-6 * abs(lhs)


def test_gradient_adjoint(rng):
    vox = (0.5, 1.0, 2.0)
    x = rng.normal(size=(9, 10, 11))
    gs = [rng.normal(size=(9, 10, 11)) for _ in range(3)]
    lhs = sum(np.vdot(g, h) for g, h in zip(gradient(x, vox), gs))
    rhs = np.vdot(x, gradient_adjoint(gs, vox))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_tkd_recovers_kept_components():
    n = 32
    c = (n - 1) / 2
    x, y, z = np.meshgrid(*[np.arange(n) - c] * 3, indexing="ij")
    chi = 50 * np.exp(-(x**2 + y**2 + z**2) / 8)
    k = make_dipole_kernel((n,) * 3, VOX)
    f = forward_field(vol(chi, Unit.PPB), k, 3.0).data
    back = tkd_qsm(f, k, 3.0, threshold=0.05)
    keep = np.abs(k.spectrum) > 0.05
    expect = np.fft.ifftn(np.fft.fftn(chi) * keep).real
    np.testing.assert_allclose(back, expect, atol=1e-9)


# ---------------------------------------------------------------------------
# R2' model


@pytest.mark.parametrize("p, d, expect", [(100, 0, 10.0), (0, -50, 5.0), (0, 0, 0.0)])
def test_forward_r2prime(p, d, expect):
    out = forward_r2prime(vol(np.full((2, 2, 2), p), Unit.PPB), vol(np.full((2, 2, 2), d), Unit.PPB))
    np.testing.assert_allclose(out.data, expect)
    assert out.unit is Unit.PER_SECOND


def test_forward_r2prime_uses_config():
    cfg = SolverConfig(dr_para=120.0, dr_dia=80.0)
    out = forward_r2prime(vol(np.full((2, 2, 2), 10.0), Unit.PPB), vol(np.full((2, 2, 2), -10.0), Unit.PPB), cfg)
    np.testing.assert_allclose(out.data, 1e-3 * (120 * 10 + 80 * 10))


def test_forward_r2prime_sign_violation():
    with pytest.raises(ValueError, match="sign"):
        forward_r2prime(vol(np.full((2, 2, 2), -1.0), Unit.PPB), vol(np.zeros((2, 2, 2)), Unit.PPB))


@pytest.mark.parametrize(
    "kw", [{"dr_para": 0}, {"lambda_grad": -1}, {"max_iter": 0}, {"tol": 0}, {"step_safety": 1.5}, {"kernel_pad_factor": 0.5}]
)
def test_solver_config_validation(kw):
    with pytest.raises(ValueError):
        SolverConfig(**kw)


# ---------------------------------------------------------------------------
# solver


N = 48
C = (N - 1) / 2
SHAPES = (
    Shape("sphere", (C - 10, C - 6, C), 5.0, 100.0, 0.0),
    Shape("box", (C + 9, C - 6, C), (6.0, 14.0, 12.0), 0.0, -40.0),
    Shape("box", (C, C + 11, C), (9.0, 9.0, 9.0), 100.0, -40.0),
)


def _core(shape: Shape) -> np.ndarray:
    """Shape voxels at least 2 mm from its boundary."""
    x, y, z = np.meshgrid(*[np.arange(N, dtype=float)] * 3, indexing="ij")
    h = shape.half_extent() - 2
    c = shape.center
    inside = shape.inside(x, y, z)
    return inside & (np.abs(x - c[0]) <= h[0]) & (np.abs(y - c[1]) <= h[1]) & (np.abs(z - c[2]) <= h[2])


@pytest.fixture(scope="module")
def problem():
    spec = PhantomSpec(dims=(N,) * 3, shapes=SHAPES, mask_fraction=(0.45,) * 3)
    p, d, m = render_phantom(spec)
    k = make_dipole_kernel((N,) * 3, VOX)
    f = forward_field(vol(p.data + d.data, Unit.PPB), k, 3.0)
    r = forward_r2prime(p, d)
    return FieldMap(f, m), r, m, k


@pytest.fixture(scope="module")
def solved(problem):
    field, r2p, mask, k = problem
    iterates = []

    def cb(it, p, d, obj):
        iterates.append((it, float(p[mask.data].min()), float(d[mask.data].max()), obj))

    res = separate(field, r2p, mask, k, callback=cb)
    return res, iterates


def test_round_trip_pure_and_mixed(solved):
    res, _ = solved
    sphere, slab, mixed = (_core(s) for s in SHAPES)
    p, d, q = res.chi_para.data, res.chi_dia.data, res.qsm.data
    assert p[sphere].mean() == pytest.approx(100, rel=0.15)
    assert abs(d[sphere].mean()) < 10
    assert d[slab].mean() == pytest.approx(-40, rel=0.15)
    assert abs(p[slab].mean()) < 10
    assert p[mixed].mean() == pytest.approx(100, rel=0.25)
    assert d[mixed].mean() == pytest.approx(-40, rel=0.25)
    assert q[mixed].mean() == pytest.approx(60, rel=0.15)
    assert res.converged


def test_signs_hold_at_every_iterate(solved):
    res, iterates = solved
    assert iterates
    assert all(pmin >= 0 and dmax <= 0 for _, pmin, dmax, _ in iterates)
    assert res.chi_para.data.min() >= 0 and res.chi_dia.data.max() <= 0


def test_outside_mask_is_zero(solved, problem):
    res, _ = solved
    out = ~problem[2].data
    assert not res.chi_para.data[out].any() and not res.chi_dia.data[out].any()


def test_qsm_is_exact_sum(solved):
    res, _ = solved
    assert np.array_equal(res.qsm.data, res.chi_para.data + res.chi_dia.data)
    assert res.qsm.unit is Unit.PPB


def test_objective_monotone(solved):
    res, _ = solved
    h = np.asarray(res.objective_history)
    assert (np.diff(h) <= 0).all()
    assert res.final_objective == h[-1]
    assert res.iterations == len(h) - 1


def test_more_iterations_reduce_data_residual(problem):
    field, r2p, mask, k = problem
    op = FieldOperator(k, 3.0)
    m = mask.data
    resid = []
    for it in (5, 20, 80):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            res = separate(field, r2p, mask, k, SolverConfig(max_iter=it))
        rf = op.forward(res.qsm.data)[m] - field.volume.data[m]
        rr = 0.1 * (res.chi_para.data - res.chi_dia.data)[m] - r2p.data[m]
        resid.append(np.sum(rf**2) / np.mean(field.volume.data[m] ** 2) + np.sum(rr**2) / np.mean(r2p.data[m] ** 2))
    assert resid[0] > resid[1] > resid[2]


def test_nonconvergence_warns(problem):
    field, r2p, mask, k = problem
    with pytest.warns(ConvergenceWarning):
        res = separate(field, r2p, mask, k, SolverConfig(max_iter=2))
    assert not res.converged
    assert res.iterations == 2


def test_empty_mask_rejected(problem):
    field, r2p, mask, k = problem
    empty = BinaryMask(np.zeros(mask.dims, bool))
    with pytest.raises(VolumeError, match="empty mask"):
        separate(FieldMap(field.volume, empty), r2p, empty, k)


def test_deterministic(problem):
    field, r2p, mask, k = problem
    cfg = SolverConfig(max_iter=10)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        a = separate(field, r2p, mask, k, cfg)
        b = separate(field, r2p, mask, k, cfg)
    assert np.array_equal(a.chi_para.data, b.chi_para.data)
    assert a.summary()["config"]["dr_para"] == 100.0
