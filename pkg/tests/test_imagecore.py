import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from sccgan.imagecore import (
    CT_RANGE, MR_RANGE, Image2D, Mask2D, Modality, Volume3D, VolumeFormatError,
    augment_crop, background_value, from_unit_range, load_volume, resize_pad,
    save_volume, to_unit_range,
)


def _write_pair(tmp_path, shape, data_bytes, name="v"):
    (tmp_path / f"{name}.json").write_text(json.dumps({"dtype": "f32le", "shape": shape}))
    (tmp_path / f"{name}.raw").write_bytes(data_bytes)
    return tmp_path / name


# ---------------------------------------------------------------- containers

def test_image_is_read_only_float32_copy():
    src = np.arange(6.0).reshape(2, 3)
    img = Image2D(src, Modality.MR)
    assert img.data.dtype == np.float32
    src[0, 0] = 99
    assert img.data[0, 0] == 0
    with pytest.raises(ValueError):
        img.data[0, 0] = 1


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_image_rejects_non_finite(bad):
    a = np.zeros((3, 3))
    a[1, 2] = bad
    with pytest.raises(ValueError):
        Image2D(a)


def test_range_must_be_increasing():
    with pytest.raises(ValueError):
        Image2D(np.zeros((2, 2)), Modality.CT, (5.0, 5.0))


def test_volume_needs_a_slice():
    with pytest.raises(ValueError):
        Volume3D(np.zeros((0, 4, 4)))


def test_volume_slice_and_from_slices_roundtrip():
    rng = np.random.default_rng(0)
    v = Volume3D(rng.normal(size=(3, 4, 5)), Modality.CT, CT_RANGE, (2.0, 1.0, 1.0))
    back = Volume3D.from_slices([v.slice(k) for k in range(3)], spacing=v.spacing)
    assert back == v
    assert v.slice(1).modality is Modality.CT


def test_mask_shape_check():
    m = Mask2D(np.ones((4, 5), bool))
    assert m.count == 20
    m.check_matches(Image2D(np.zeros((4, 5))))
    with pytest.raises(ValueError):
        m.check_matches(Image2D(np.zeros((5, 4))))


def test_background_values():
    assert background_value(Modality.CT) == -1000.0
    assert background_value(Modality.MR) == 0.0


# ---------------------------------------------------------------- file I/O

def test_load_zero_volume(tmp_path):
    stem = _write_pair(tmp_path, [2, 2, 2], bytes(32))
    v = load_volume(stem)
    assert v.shape == (2, 2, 2)
    np.testing.assert_array_equal(v.data, np.zeros((2, 2, 2), np.float32))


def test_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    v = Volume3D(rng.normal(size=(4, 7, 5)) * 1e3, Modality.CT, CT_RANGE, (3.0, 0.5, 0.5))
    save_volume(v, tmp_path / "a" / "b" / "vol")
    w = load_volume(tmp_path / "a" / "b" / "vol.json")
    assert w == v
    assert w.data.tobytes() == v.data.tobytes()
    # either file name or the stem works
    assert load_volume(tmp_path / "a" / "b" / "vol.raw") == v


def test_overwrite_replaces_content(tmp_path):
    save_volume(Volume3D(np.ones((1, 2, 2))), tmp_path / "v")
    save_volume(Volume3D(np.full((2, 3, 3), 2.0)), tmp_path / "v")
    assert load_volume(tmp_path / "v").shape == (2, 3, 3)


def test_byte_count_mismatch(tmp_path):
    stem = _write_pair(tmp_path, [10, 2, 2], bytes(9 * 4 * 4))
    with pytest.raises(VolumeFormatError, match="bytes"):
        load_volume(stem)


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "nothing")
    (tmp_path / "half.json").write_text('{"shape": [1, 1, 1]}')
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "half")


def test_non_finite_reports_location(tmp_path):
    a = np.zeros((2, 3, 4), "<f4")
    a[1, 2, 3] = np.nan
    stem = _write_pair(tmp_path, [2, 3, 4], a.tobytes())
    with pytest.raises(VolumeFormatError, match="slice 1, row 2, col 3"):
        load_volume(stem)


def test_bad_header(tmp_path):
    (tmp_path / "v.json").write_text("{not json")
    (tmp_path / "v.raw").write_bytes(bytes(4))
    with pytest.raises(VolumeFormatError):
        load_volume(tmp_path / "v")
    (tmp_path / "v.json").write_text('{"dtype": "f64le", "shape": [1, 1, 1]}')
    with pytest.raises(VolumeFormatError, match="dtype"):
        load_volume(tmp_path / "v")


@pytest.mark.skipif(hasattr(os, "geteuid") and os.geteuid() == 0, reason="root ignores permissions")
def test_read_only_directory(tmp_path):
    d = tmp_path / "ro"
    d.mkdir()
    d.chmod(0o500)
    try:
        with pytest.raises(OSError):
            save_volume(Volume3D(np.zeros((1, 2, 2))), d / "v")
    finally:
        d.chmod(0o700)


def test_write_into_file_path_fails(tmp_path):
    # a regular file where a directory is required
    (tmp_path / "blocker").write_text("x")
    with pytest.raises(OSError):
        save_volume(Volume3D(np.zeros((1, 2, 2))), tmp_path / "blocker" / "v")


# ---------------------------------------------------------------- geometry

def test_resize_pad_paper_geometry():
    img = Image2D(np.random.default_rng(0).uniform(0, 3000, (270, 180)), Modality.MR, MR_RANGE)
    out = resize_pad(img, 384, 256)
    assert out.shape == (384, 256)
    assert out.modality is Modality.MR


def test_resize_pad_identity():
    img = Image2D(np.random.default_rng(0).normal(size=(8, 6)), Modality.CT, CT_RANGE)
    assert resize_pad(img, 8, 6) is img


def test_resize_pad_ct_hand_case():
    a = np.random.default_rng(2).uniform(-500, 1500, (100, 100))
    out = resize_pad(Image2D(a, Modality.CT, CT_RANGE), 200, 100)
    assert out.shape == (200, 100)
    np.testing.assert_array_equal(out.data[:50], -1000.0)
    np.testing.assert_array_equal(out.data[150:], -1000.0)
    np.testing.assert_array_equal(out.data[50:150], a.astype(np.float32))


def test_resize_pad_scale_factor():
    # 10x20 into 40x40: factor 2 (width bound) -> 20x40 content, 10 rows of zero each side
    a = np.ones((10, 20)) * 7.0
    out = resize_pad(Image2D(a, Modality.MR), 40, 40)
    np.testing.assert_array_equal(out.data[:10], 0.0)
    np.testing.assert_array_equal(out.data[30:], 0.0)
    np.testing.assert_allclose(out.data[10:30], 7.0)


def test_resize_pad_rejects_bad_target():
    with pytest.raises(ValueError):
        resize_pad(Image2D(np.zeros((4, 4))), 0, 4)


def test_augment_crop_determinism_and_shape():
    img = Image2D(np.random.default_rng(0).uniform(0, 3500, (384, 256)), Modality.MR)
    a = augment_crop(img, np.random.default_rng(5))
    b = augment_crop(img, np.random.default_rng(5))
    assert a == b
    assert a.shape == (384, 256)


def test_augment_crop_wrong_shape():
    with pytest.raises(ValueError):
        augment_crop(Image2D(np.zeros((10, 10))), np.random.default_rng(0))


def test_augment_crop_constant_background():
    img = Image2D(np.full((384, 256), -1000.0), Modality.CT, CT_RANGE)
    out = augment_crop(img, np.random.default_rng(3))
    np.testing.assert_array_equal(out.data, -1000.0)


def test_augment_crop_offsets_uniform():
    """Recover the offset from a marker pixel and chi-square the counts."""
    a = np.zeros((384, 256))
    a[200, 128] = 1.0
    img = Image2D(a, Modality.MR)
    rng = np.random.default_rng(11)
    dys, dxs = [], []
    for _ in range(10_000):
        out = augment_crop(img, rng).data
        r, c = np.argwhere(out == 1.0)[0]
        # marker sits at padded (208, 142)
        dys.append(208 - r)
        dxs.append(142 - c)
    cy = np.bincount(dys, minlength=17)
    cx = np.bincount(dxs, minlength=29)
    assert len(cy) == 17 and len(cx) == 29
    assert stats.chisquare(cy).pvalue > 0.01
    assert stats.chisquare(cx).pvalue > 0.01
    # every count within 3 sigma of the uniform expectation
    for counts, k in ((cy, 17), (cx, 29)):
        p = 1.0 / k
        mu, sd = 10_000 * p, np.sqrt(10_000 * p * (1 - p))
        assert np.all(np.abs(counts - mu) <= 3 * sd)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([Modality.MR, Modality.CT]))
def test_unit_range_roundtrip(seed, modality):
    lo, hi = CT_RANGE if modality is Modality.CT else MR_RANGE
    a = np.random.default_rng(seed).uniform(lo, hi, (6, 5))
    img = Image2D(a, modality, (lo, hi))
    u = to_unit_range(img)
    assert u.data.min() >= -1 - 1e-6 and u.data.max() <= 1 + 1e-6
    back = from_unit_range(u)
    np.testing.assert_allclose(back.data, img.data, rtol=1e-5, atol=1e-5 * (hi - lo))


def test_unit_range_endpoints():
    img = Image2D(np.array([[-1000.0, 3500.0]]), Modality.CT, CT_RANGE)
    np.testing.assert_array_equal(to_unit_range(img).data, [[-1.0, 1.0]])
    vol = Volume3D(np.full((2, 2, 2), 1750.0), Modality.MR, MR_RANGE)
    np.testing.assert_allclose(to_unit_range(vol).data, 0.0)
