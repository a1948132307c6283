import numpy as np
import pytest

from chisep_atlas.phase import combine_echoes, unwrap_echoes
from chisep_atlas.relaxometry import fit_r2star
from chisep_atlas.simulator import (
    PROTOCOL_TE_S,
    Background,
    PhantomError,
    PhantomSpec,
    Shape,
    background_field,
    render_phantom,
    simulate_gre,
)

from conftest import interior

C = 15.5  # centre of a 32^3 grid at 1 mm


def test_sphere_volume():
    # odd grid: the centre of the volume is a voxel centre
    spec = PhantomSpec(dims=(33,) * 3, shapes=(Shape("sphere", (16.0, 16.0, 16.0), 5.0, 100.0),))
    p, d, _ = render_phantom(spec)
    expect = 4 / 3 * np.pi * 5**3
    assert abs((p.data == 100).sum() / expect - 1) < 0.05
    assert not d.data.any()


def test_supersampled_sphere_volume_is_partial():
    spec = PhantomSpec(dims=(32,) * 3, shapes=(Shape("sphere", (C, C, C), 5.0, 100.0),), supersample=4)
    p, _, _ = render_phantom(spec)
    assert p.data.sum() / 100 == pytest.approx(4 / 3 * np.pi * 125, rel=0.02)
    assert ((p.data > 0) & (p.data < 100)).any()


def test_empty_phantom():
    p, d, m = render_phantom(PhantomSpec(dims=(16,) * 3))
    assert not p.data.any() and not d.data.any()
    assert m.count > 0


def test_last_writer_wins():
    a = Shape("box", (C, C, C), 8.0, 100.0, 0.0)
    b = Shape("box", (C + 3, C, C), 8.0, 0.0, -40.0)
    p, d, _ = render_phantom(PhantomSpec(dims=(32,) * 3, shapes=(a, b)))
    x, y, z = np.meshgrid(*[np.arange(32.0)] * 3, indexing="ij")
    both = a.inside(x, y, z) & b.inside(x, y, z)
    assert both.any()
    assert (p.data[both] == 0).all() and (d.data[both] == -40).all()
    only_a = a.inside(x, y, z) & ~b.inside(x, y, z)
    assert (p.data[only_a] == 100).all()


def test_mask_from_shapes():
    spec = PhantomSpec(dims=(32,) * 3, shapes=(Shape("sphere", (C, C, C), 4.0, 10.0),), mask_margin_mm=2.0)
    _, _, m = render_phantom(spec)
    assert m.count == pytest.approx(4 / 3 * np.pi * 6**3, rel=0.05)


@pytest.mark.parametrize(
    "shape",
    [
        Shape("sphere", (2.0, C, C), 5.0, 1.0),
        Shape("box", (C, C, 30.0), (4.0, 4.0, 8.0), 1.0),
    ],
)
def test_shape_out_of_bounds(shape):
    with pytest.raises(PhantomError, match="out of bounds"):
        PhantomSpec(dims=(32,) * 3, shapes=(shape,))


def test_bad_signs_rejected():
    with pytest.raises(PhantomError):
        Shape("sphere", (C, C, C), 3.0, chi_para=-1.0)
    with pytest.raises(PhantomError):
        Shape("sphere", (C, C, C), 3.0, chi_dia=5.0)


def test_spec_json_round_trip(tmp_path):
    spec = PhantomSpec(
        dims=(16,) * 3,
        shapes=(Shape("box", (7.5, 7.5, 7.5), (2.0, 3.0, 4.0), 5.0, -2.0),),
        background=Background("polynomial", coeffs={"1": 2.0, "xz": 0.01}),
        noise_sigma=0.01,
    )
    spec.to_json(tmp_path / "s.json")
    assert PhantomSpec.from_json(tmp_path / "s.json") == spec


def test_null_source():
    spec = PhantomSpec(dims=(16,) * 3, r2_baseline=12.0)
    p, d, m = render_phantom(spec)
    gre, truth = simulate_gre(p, d, spec, mask=m)
    for t, mag, ph in zip(spec.te_s, gre.magnitude, gre.phase):
        assert not ph.data.any()
        np.testing.assert_allclose(mag.data[m.data], 100 * np.exp(-12.0 * t), rtol=1e-14)
        assert not mag.data[~m.data].any()
    assert not truth["field"].data.any()


def test_wrap_threshold_arithmetic():
    # phase at the last echo reaches pi at f = 1 / (2 TE)
    assert 1 / (2 * PROTOCOL_TE_S[-1]) == pytest.approx(17.5, abs=0.01)


def test_sphere_field_wraps_at_last_echo():
    # a 100 ppb sphere peaks near 8.5 Hz at 3 T, below the threshold; 300 ppb crosses it
    spec = PhantomSpec(dims=(48,) * 3, shapes=(Shape("sphere", (23.5,) * 3, 8.0, 300.0),), mask_fraction=(0.45,) * 3)
    p, d, m = render_phantom(spec)
    gre, truth = simulate_gre(p, d, spec, mask=m)
    f = truth["field"].data
    assert f.max() > 17.5
    hot = f > 17.6
    true_phase = 2 * np.pi * f[hot] * spec.te_s[-1]
    assert (np.abs(true_phase) > np.pi).all()
    assert (np.abs(gre.phase[-1].data) <= np.pi).all()
    assert not np.allclose(gre.phase[-1].data[hot], true_phase)


def test_seeded_noise_deterministic():
    spec = PhantomSpec(dims=(16,) * 3, shapes=(Shape("sphere", (7.5,) * 3, 3.0, 50.0),), noise_sigma=0.02, seed=5)
    p, d, m = render_phantom(spec)
    a, _ = simulate_gre(p, d, spec, mask=m)
    b, _ = simulate_gre(p, d, spec, mask=m)
    for x, y in zip(a.magnitude + a.phase, b.magnitude + b.phase):
        assert np.array_equal(x.data, y.data)
    other = PhantomSpec.from_dict({**spec.to_dict(), "seed": 6})
    c, _ = simulate_gre(p, d, other, mask=m)
    assert not np.array_equal(a.magnitude[0].data, c.magnitude[0].data)


def test_external_dipole_background():
    spec = PhantomSpec(dims=(16,) * 3, background=Background("external_dipole", (7.5, 7.5, 40.0), 1000.0))
    bg = background_field(spec)
    # on the axis below the source: 2 m / r^3
    assert bg[7, 7, 0] == pytest.approx(2000 / np.linalg.norm([0.5, 0.5, 40]) ** 3, rel=0.01)


@pytest.fixture(scope="module")
def noiseless_64():
    C = 31.5
    spec = PhantomSpec(
        dims=(64,) * 3,
        shapes=(Shape("sphere", (C - 8, C, C), 6.0, 100.0), Shape("box", (C + 8, C, C), 8.0, 0.0, -40.0)),
        background=Background("external_dipole", (C, C + 10, C + 50), 5e5),
        supersample=2,
    )
    p, d, m = render_phantom(spec)
    gre, truth = simulate_gre(p, d, spec, mask=m)
    return spec, gre, truth, m


def test_simulate_then_r2star_exact(noiseless_64):
    _, gre, truth, m = noiseless_64
    fit = fit_r2star(gre, m)
    np.testing.assert_allclose(fit.r2star.data[m.data], truth["r2star"].data[m.data], rtol=1e-6)


def test_simulate_then_unwrap_combine(noiseless_64):
    _, gre, truth, m = noiseless_64
    fm = combine_echoes(gre, unwrap_echoes(gre, m))
    core = interior(m, 3)
    err = fm.volume.data[core] - truth["field"].data[core]
    assert np.sqrt(np.mean(err**2)) < 0.05
