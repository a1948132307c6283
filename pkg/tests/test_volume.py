import itertools
import json
import os

import nibabel as nib
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chisep_atlas.volume import (
    BinaryMask,
    LabelVolume,
    MultiEchoGre,
    ScalarVolume,
    Unit,
    VolumeError,
    erode_mask,
    load_gre,
    load_labels,
    load_mask,
    load_phase,
    load_volume,
    save_gre,
    save_labels,
    save_mask,
    save_volume,
)

from conftest import vol


def test_raw_ones_2x2x2(tmp_path):
    np.ones(8, dtype="<f4").tofile(tmp_path / "ones.f32")
    (tmp_path / "ones.json").write_text(json.dumps({"dims": [2, 2, 2], "voxel_size_mm": [1, 1, 1], "unit": "ppb"}))
    v = load_volume(tmp_path / "ones.f32")
    assert v.dims == (2, 2, 2)
    assert v.unit is Unit.PPB
    np.testing.assert_array_equal(v.data, np.ones((2, 2, 2)))


def test_raw_is_x_fastest(tmp_path):
    np.arange(24, dtype="<f4").tofile(tmp_path / "a.f32")
    (tmp_path / "a.json").write_text(json.dumps({"dims": [2, 3, 4], "voxel_size_mm": [1, 1, 1]}))
    v = load_volume(tmp_path / "a")
    assert v.data[1, 0, 0] == 1.0
    assert v.data[0, 1, 0] == 2.0
    assert v.data[0, 0, 1] == 6.0


def test_raw_payload_size_mismatch(tmp_path):
    np.ones(7, dtype="<f4").tofile(tmp_path / "bad.f32")
    (tmp_path / "bad.json").write_text(json.dumps({"dims": [2, 2, 2], "voxel_size_mm": [1, 1, 1]}))
    with pytest.raises(VolumeError, match="dimension mismatch"):
        load_volume(tmp_path / "bad.f32")


def test_nifti_header_dims(tmp_path):
    img = nib.Nifti1Image(np.zeros((64, 64, 64), np.float32), np.eye(4))
    nib.save(img, str(tmp_path / "z.nii"))
    v = load_volume(tmp_path / "z.nii")
    assert v.dims == (64, 64, 64)
    assert v.voxel_size_mm == (1.0, 1.0, 1.0)


def test_nifti_4d_rejected(tmp_path):
    nib.save(nib.Nifti1Image(np.zeros((4, 4, 4, 2), np.float32), np.eye(4)), str(tmp_path / "t.nii"))
    with pytest.raises(VolumeError, match="non-3D image"):
        load_volume(tmp_path / "t.nii")


def test_in_memory_non_3d_rejected():
    with pytest.raises(VolumeError, match="non-3D"):
        ScalarVolume(np.zeros((4, 4)), (1, 1, 1), Unit.HZ)


def test_bad_voxel_size_rejected():
    with pytest.raises(VolumeError):
        ScalarVolume(np.zeros((2, 2, 2)), (1, 0, 1), Unit.HZ)


def test_nifti_int16_scaling(tmp_path):
    raw = np.arange(27, dtype=np.int16).reshape(3, 3, 3)
    img = nib.Nifti1Image(raw, np.eye(4))
    img.header.set_slope_inter(0.5, -2.0)
    nib.save(img, str(tmp_path / "s.nii"))
    v = load_volume(tmp_path / "s.nii")
    np.testing.assert_allclose(v.data, raw * 0.5 - 2.0)


@pytest.mark.parametrize("ext", [".nii", ".nii.gz", ".f32"])
def test_round_trip_random_8cube(tmp_path, rng, ext):
    v = vol(rng.normal(size=(8, 8, 8)), Unit.HZ)
    save_volume(v, tmp_path / f"r{ext}")
    back = load_volume(tmp_path / f"r{ext}")
    np.testing.assert_array_equal(back.data, v.data)
    assert back.unit is Unit.HZ


@pytest.mark.parametrize("ext", [".nii", ".f32"])
def test_round_trip_anisotropic_voxels(tmp_path, ext):
    v = vol(np.ones((4, 5, 6)), vox=(0.5, 0.5, 2.0))
    save_volume(v, tmp_path / f"a{ext}")
    assert load_volume(tmp_path / f"a{ext}").voxel_size_mm == (0.5, 0.5, 2.0)


def test_float32_exact_data_uses_f32_payload(tmp_path):
    save_volume(vol(np.full((2, 2, 2), 0.5)), tmp_path / "h")
    assert (tmp_path / "h.f32").exists()
    assert not (tmp_path / "h.f64").exists()


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores file permissions")
def test_write_to_read_only_dir(tmp_path):
    ro = tmp_path / "ro"
    ro.mkdir()
    ro.chmod(0o500)
    with pytest.raises(OSError):
        save_volume(vol(np.zeros((2, 2, 2))), ro / "x.nii")


def test_write_to_missing_dir_is_io_error(tmp_path):
    with pytest.raises(OSError):
        save_volume(vol(np.zeros((2, 2, 2))), tmp_path / "nope" / "x.f32")


def test_volumes_are_read_only():
    v = vol(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1.0


def test_mask_and_labels_round_trip(tmp_path, rng):
    m = BinaryMask(rng.random((5, 6, 7)) > 0.5, (1, 1, 2))
    save_mask(m, tmp_path / "m.nii")
    back = load_mask(tmp_path / "m.nii")
    np.testing.assert_array_equal(back.data, m.data)
    lab = LabelVolume(rng.integers(0, 3, (5, 6, 7)), {1: "Caudate", 2: "Putamen"})
    save_labels(lab, tmp_path / "lab.nii")
    back = load_labels(tmp_path / "lab.nii")
    np.testing.assert_array_equal(back.data, lab.data)
    assert back.names == {1: "Caudate", 2: "Putamen"}


def test_label_names_required():
    with pytest.raises(VolumeError, match="without a name"):
        LabelVolume(np.ones((2, 2, 2), int), {})


def test_phase_sign_and_integer_rescale(tmp_path):
    raw = np.linspace(-4096, 4095, 64).reshape(4, 4, 4).astype(np.int16)
    nib.save(nib.Nifti1Image(raw, np.eye(4)), str(tmp_path / "p.nii"))
    ph = load_phase(tmp_path / "p.nii")
    assert ph.data.min() == pytest.approx(-np.pi)
    assert ph.data.max() == pytest.approx(np.pi)
    flipped = load_phase(tmp_path / "p.nii", sign=-1)
    np.testing.assert_allclose(flipped.data, -ph.data)


def _gre(n=8, te=(0.005, 0.010)):
    mags = tuple(vol(np.full((n,) * 3, 100.0 - i)) for i in range(len(te)))
    phs = tuple(vol(np.full((n,) * 3, 0.1 * (i + 1)), Unit.RADIANS) for i in range(len(te)))
    return MultiEchoGre(te, 0.033, 3.0, mags, phs)


def test_gre_round_trip(tmp_path):
    g = _gre()
    path = save_gre(g, tmp_path / "gre")
    back = load_gre(path)
    assert back.te_s == g.te_s and back.b0_tesla == 3.0
    np.testing.assert_array_equal(back.phase[1].data, g.phase[1].data)


@pytest.mark.parametrize(
    "kwargs, msg",
    [
        ({"te": (0.005,)}, "at least 2 echoes"),
        ({"te": (0.010, 0.005)}, "strictly increasing"),
        ({"te": (0.005, 0.040)}, "shorter than TR"),
    ],
)
def test_gre_invariants(kwargs, msg):
    with pytest.raises(VolumeError, match=msg):
        _gre(**kwargs)


def test_gre_phase_range_checked():
    g = _gre()
    bad = (vol(np.full((8,) * 3, 4.0), Unit.RADIANS),) * 2
    with pytest.raises(VolumeError, match="phase values"):
        MultiEchoGre(g.te_s, g.tr_s, 3.0, g.magnitude, bad)


# ---------------------------------------------------------------------------
# erosion


def _erode_brute(m: np.ndarray, vox, r: float) -> np.ndarray:
    """A voxel survives iff every grid point within r (outside the grid = false) is set."""
    reach = [int(np.floor(r / v)) for v in vox]
    offs = [
        o
        for o in itertools.product(*(range(-k, k + 1) for k in reach))
        if sum((oi * v) ** 2 for oi, v in zip(o, vox)) <= r**2 + 1e-9
    ]
    out = np.zeros_like(m)
    for idx in zip(*np.nonzero(m)):
        ok = True
        for o in offs:
            j = tuple(i + d for i, d in zip(idx, o))
            if any(a < 0 or a >= n for a, n in zip(j, m.shape)) or not m[j]:
                ok = False
                break
        out[idx] = ok
    return out


def test_erode_radius_zero_identity(rng):
    m = BinaryMask(rng.random((6, 6, 6)) > 0.3)
    np.testing.assert_array_equal(erode_mask(m, 0).data, m.data)


def test_erode_9_cube_radius_1():
    m = np.zeros((13, 13, 13), bool)
    m[2:11, 2:11, 2:11] = True
    out = erode_mask(BinaryMask(m), 1.0).data
    expect = np.zeros_like(m)
    expect[3:10, 3:10, 3:10] = True
    np.testing.assert_array_equal(out, expect)
    assert out.sum() == 7**3


def test_erode_empty():
    assert not erode_mask(BinaryMask(np.zeros((4, 4, 4), bool)), 2.0).data.any()


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    r=st.floats(0.5, 3.0),
    vox=st.tuples(*[st.sampled_from([0.5, 1.0, 1.5])] * 3),
)
def test_erode_matches_brute_force(seed, r, vox):
    m = np.random.default_rng(seed).random((7, 7, 7)) > 0.15
    np.testing.assert_array_equal(erode_mask(BinaryMask(m, vox), r).data, _erode_brute(m, vox, r))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), r1=st.floats(0, 3), r2=st.floats(0, 3))
def test_erode_monotone(seed, r1, r2):
    m = BinaryMask(np.random.default_rng(seed).random((9, 9, 9)) > 0.1)
    e1 = erode_mask(m, r1).data
    e12 = erode_mask(m, r1 + r2).data
    assert not (e1 & ~m.data).any()
    assert not (e12 & ~e1).any()
