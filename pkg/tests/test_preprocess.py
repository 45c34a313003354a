import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from past import data as D
from past.errors import ValidationError
from past.preprocess import (
    RoiBox,
    crop_labels,
    crop_roi_2d,
    crop_roi_3d,
    normalize_intensity,
    roi_2d,
)


def coords(shape):
    """A volume whose voxel value encodes its own (x, y, z) index."""
    w, h, d = shape
    x, y, z = np.meshgrid(np.arange(w), np.arange(h), np.arange(d), indexing="ij")
    return (x * 1_000_000 + y * 1000 + z).astype(np.float64)


# frozen oracle values: the ROI formulas evaluated by hand for each size
CROP_2D = {
    (448, 448): ((112, 336), (112, 336), (224, 224)),
    (384, 384): ((96, 288), (96, 288), (192, 192)),
    (8, 8): ((2, 6), (2, 6), (4, 4)),
}
CROP_3D = {
    (448, 448, 80): (112, 336, 168, 336, 0, 80),
    (384, 384, 40): (96, 288, 144, 288, 0, 40),
}


@pytest.mark.parametrize("wh", list(CROP_2D))
def test_crop_2d_indices(wh):
    (x0, x1), (y0, y1), out_shape = CROP_2D[wh]
    a = coords(wh + (1,))[:, :, 0]
    out, box = crop_roi_2d(a)
    assert out.shape == out_shape
    assert box.as_tuple()[:4] == (x0, x1, y0, y1)
    np.testing.assert_array_equal(out, a[x0:x1, y0:y1])


def test_crop_3d_indices():
    # the coordinate encoding needs float64; Volume stores float32, so check index ranges
    for shape, expected in CROP_3D.items():
        v = D.Volume(np.zeros(shape, np.float32))
        out, box = crop_roi_3d(v)
        assert box.as_tuple() == expected
        assert out.shape == (expected[1] - expected[0], expected[3] - expected[2], expected[5])
        assert out.roi == expected


def test_crop_3d_values_on_small_volume():
    shape = (16, 32, 3)
    v = D.Volume(np.arange(np.prod(shape), dtype=np.float32).reshape(shape))
    out, box = crop_roi_3d(v)
    assert box.as_tuple() == (4, 12, 12, 24, 0, 3)
    np.testing.assert_array_equal(out.voxels, v.voxels[4:12, 12:24, 0:3])


def test_depth_one_volume_keeps_depth():
    v = D.Volume(np.ones((16, 32, 1)))
    out, box = crop_roi_3d(v)
    assert (box.z0, box.z1) == (0, 1) and out.shape[2] == 1


def test_degenerate_crop_rejected():
    with pytest.raises(ValidationError):
        crop_roi_2d(np.zeros((4, 8)))
    with pytest.raises(ValidationError):
        RoiBox(3, 3, 0, 1)


@settings(max_examples=60, deadline=None)
@given(w=st.integers(8, 64), h=st.integers(8, 64))
def test_recorded_box_reproduces_crop(w, h):
    a = coords((w, h, 1))[:, :, 0]
    out, box = crop_roi_2d(a)
    np.testing.assert_array_equal(out, a[box.slices[:2]])
    if w % 2 == 0 and h % 2 == 0:
        assert out.shape == (w // 2, h // 2)


def test_crop_labels_matches_volume_and_keeps_counts(small_phantom):
    for vol, lab in small_phantom.source_cases:
        cv, box = crop_roi_3d(vol)
        cl = crop_labels(lab, box)
        assert cl.shape == cv.shape
        assert [cl.counts()[c] for c in (1, 2)] == [lab.counts()[c] for c in (1, 2)]


def test_crop_labels_full_extent_identity():
    lab = D.LabelMap(np.random.default_rng(0).integers(0, 3, (8, 9, 2)))
    assert crop_labels(lab, RoiBox(0, 8, 0, 9, 0, 2)) == lab
    with pytest.raises(ValidationError):
        crop_labels(lab, RoiBox(0, 9, 0, 9, 0, 2))


def test_normalize_examples():
    v = D.Volume(np.array([0.0, 0.5, 1.0] + [0.0] * 61).reshape(8, 8, 1))
    out = normalize_intensity(v).voxels.ravel()
    np.testing.assert_allclose(out[:3], [0.0, 127.5, 255.0])
    full = D.Volume(np.arange(256, dtype=np.float32).reshape(16, 16, 1))
    np.testing.assert_array_equal(normalize_intensity(full).voxels, full.voxels)
    const = D.Volume(np.full((8, 8, 2), 3.7))
    assert not normalize_intensity(const).voxels.any()


finite = st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False, width=32)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float32, (8, 8, 2), elements=finite))
def test_normalize_properties(arr):
    v = D.Volume(arr)
    n1 = normalize_intensity(v)
    if arr.max() == arr.min():
        assert not n1.voxels.any()
        return
    assert n1.voxels.min() == pytest.approx(0.0, abs=1e-4)
    assert n1.voxels.max() == pytest.approx(255.0, abs=1e-4)
    n2 = normalize_intensity(n1)
    np.testing.assert_allclose(n2.voxels, n1.voxels, atol=1e-4)
    # extreme locations survive the affine rescale
    assert n1.voxels.ravel()[np.argmax(arr)] == n1.voxels.max()
    assert n1.voxels.ravel()[np.argmin(arr)] == n1.voxels.min()


def test_roi_2d_floor_on_odd_sizes():
    assert roi_2d(9, 11).as_tuple()[:4] == (2, 6, 2, 8)
