import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sccgan.imagecore import CT_RANGE, MR_RANGE, Modality
from sccgan.mind import mind_l1
from sccgan.phantom import CT_VALUES, MR_VALUES, PhantomSpec, corrupt, generate


def test_same_seed_bit_identical():
    a = generate(PhantomSpec(seed=4, slices=5, noise=20.0))
    b = generate(PhantomSpec(seed=4, slices=5, noise=20.0))
    for x, y in zip((a.mr, a.ct, a.labels), (b.mr, b.ct, b.labels)):
        assert x.data.tobytes() == y.data.tobytes()
    c = generate(PhantomSpec(seed=5, slices=5))
    assert c.ct.data.tobytes() != a.ct.data.tobytes()


def test_shapes_modalities_and_ranges():
    ph = generate(PhantomSpec(seed=0, slices=6, height=40, width=48))
    assert ph.mr.shape == ph.ct.shape == ph.labels.shape == (6, 40, 48)
    assert ph.mr.modality is Modality.MR and ph.ct.modality is Modality.CT
    assert MR_RANGE[0] <= ph.mr.data.min() and ph.mr.data.max() <= MR_RANGE[1]
    assert CT_RANGE[0] <= ph.ct.data.min() and ph.ct.data.max() <= CT_RANGE[1]
    assert len(ph.masks) == 6


def test_unblurred_intensities_follow_labels():
    ph = generate(PhantomSpec(seed=1, slices=5, blur=0.0))
    lab = ph.labels.data.astype(int)
    for k, v in MR_VALUES.items():
        np.testing.assert_array_equal(ph.mr.data[lab == k], v)
    for k, v in CT_VALUES.items():
        np.testing.assert_array_equal(ph.ct.data[lab == k], v)
    np.testing.assert_array_equal(np.stack([m.data for m in ph.masks]), lab > 0)


def test_medial_slices_carry_more_tissue():
    ph = generate(PhantomSpec(seed=2, slices=11))
    counts = [m.count for m in ph.masks]
    assert counts[5] == max(counts)
    assert counts[0] < counts[5] and counts[-1] < counts[5]


def test_no_skull_option():
    ph = generate(PhantomSpec(seed=0, slices=3, skull=False))
    assert not np.any(ph.labels.data == 2)


def test_paired_structure_is_closer_than_unpaired():
    a = generate(PhantomSpec(seed=0, slices=5, height=48, width=48))
    b = generate(PhantomSpec(seed=1, slices=5, height=48, width=48))
    k = 2
    paired = mind_l1(a.mr.slice(k), a.ct.slice(k))
    unpaired = mind_l1(a.mr.slice(k), b.ct.slice(k))
    assert unpaired >= 5 * paired


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(slices=0)
    with pytest.raises(ValueError):
        PhantomSpec(height=4)
    with pytest.raises(ValueError):
        PhantomSpec(noise=-1.0)
    assert PhantomSpec().to_dict()["slices"] == 24


def test_affine_corruption_is_affine():
    ph = generate(PhantomSpec(seed=3, slices=2))
    out = corrupt(ph.ct, "affine_intensity", np.random.default_rng(0))
    x, y = ph.ct.data.ravel().astype(np.float64), out.data.ravel().astype(np.float64)
    slope, icpt = np.polyfit(x, y, 1)
    np.testing.assert_allclose(slope * x + icpt, y, atol=1e-2)
    assert 0.6 <= slope <= 1.4


def test_permute_blocks_preserves_histogram():
    ph = generate(PhantomSpec(seed=3, slices=2))
    out = corrupt(ph.ct, "permute_blocks", np.random.default_rng(1))
    for k in range(2):
        np.testing.assert_array_equal(np.sort(out.data[k].ravel()), np.sort(ph.ct.data[k].ravel()))
    assert not np.array_equal(out.data, ph.ct.data)


def test_local_deform_zero_strength_is_identity():
    ph = generate(PhantomSpec(seed=3, slices=2))
    assert corrupt(ph.ct, "local_deform", np.random.default_rng(2), strength=0.0) is ph.ct


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.floats(0.25, 2.0))
def test_local_deform_stays_within_range(seed, strength):
    ph = generate(PhantomSpec(seed=seed % 7, slices=1, height=32, width=32))
    out = corrupt(ph.ct, "local_deform", np.random.default_rng(seed), strength=strength)
    # linear interpolation cannot leave the convex hull of the input
    assert out.data.min() >= ph.ct.data.min() and out.data.max() <= ph.ct.data.max()


def test_unknown_corruption():
    ph = generate(PhantomSpec(seed=0, slices=1))
    with pytest.raises(ValueError):
        corrupt(ph.ct, "smudge", np.random.default_rng(0))
