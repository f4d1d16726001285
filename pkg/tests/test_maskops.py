import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from instada.maskops import (
    DimensionMismatchError,
    EmptyMaskError,
    MaskFormatError,
    RleMask,
    box_mask,
    box_to_pixel_bounds,
    decode_png,
    encode_png,
    extract_instance_patch,
    fuse_edge_maps,
    gray_to_png,
    mask_iou,
    mask_to_bbox,
    png_shapes,
    png_size,
    png_to_gray,
    polygons_to_mask,
    resize_nearest,
    rle_decode,
    rle_encode,
    rle_from_string,
    rle_to_string,
    subtract_mask,
    union_masks,
)
from oracles import ref_bbox, ref_counts_string, ref_decode_string, ref_mask_from_runs, ref_resize_nearest, ref_runs

masks = st.tuples(st.integers(1, 24), st.integers(1, 24)).flatmap(
    lambda hw: arrays(np.bool_, hw, elements=st.booleans())
)


@settings(max_examples=300, deadline=None)
@given(masks)
def test_rle_matches_reference_encoder(mask):
    rle = rle_encode(mask)
    assert list(rle.counts) == ref_runs(mask)
    assert rle.to_coco()["counts"] == ref_counts_string(ref_runs(mask))
    assert rle.area == int(mask.sum())


@settings(max_examples=300, deadline=None)
@given(masks)
def test_rle_roundtrip_through_string(mask):
    coco = rle_encode(mask).to_coco()
    back = RleMask.from_coco(coco)
    assert np.array_equal(rle_decode(back), mask)
    assert ref_decode_string(coco["counts"]) == rle_from_string(coco["counts"])
    assert np.array_equal(ref_mask_from_runs(list(back.counts), *mask.shape), mask)


def test_known_counts_strings():
    assert rle_to_string([0, 4]) == "04"
    full = np.ones((2, 2), dtype=bool)
    assert rle_encode(full).to_coco() == {"size": [2, 2], "counts": "04"}
    # negative deltas exercise the sign-extension branch
    counts = [5, 30, 2, 3, 60]
    assert rle_from_string(rle_to_string(counts)) == counts


def test_column_major_order():
    m = np.zeros((2, 3), dtype=bool)
    m[0, 1] = True  # flattened column-major index 2
    assert rle_encode(m).counts == (2, 1, 3)


def test_from_coco_accepts_uncompressed_and_bytes():
    m = np.array([[0, 1], [1, 1]], dtype=bool)
    rle = rle_encode(m)
    assert RleMask.from_coco({"size": [2, 2], "counts": list(rle.counts)}) == rle
    assert RleMask.from_coco({"size": [2, 2], "counts": rle.to_coco()["counts"].encode()}) == rle
    # zero-length interior runs from other tools are merged away
    assert RleMask.from_coco({"size": [2, 2], "counts": [1, 0, 2, 1]}).counts == (3, 1)


@pytest.mark.parametrize(
    "obj",
    [
        {"size": [2, 2], "counts": [1, 2]},
        {"size": [2, 2], "counts": [-1, 5]},
        {"size": [0, 2], "counts": []},
        {"counts": "04"},
        {"size": [2, 2], "counts": "0\x7f"},
    ],
)
def test_from_coco_rejects_malformed(obj):
    with pytest.raises(MaskFormatError):
        RleMask.from_coco(obj)


def test_truncated_string_rejected():
    with pytest.raises(MaskFormatError):
        rle_from_string("0" + chr(48 + 0x20))


@settings(max_examples=200, deadline=None)
@given(masks)
def test_bbox_matches_brute_force(mask):
    if not mask.any():
        with pytest.raises(EmptyMaskError):
            mask_to_bbox(mask)
    else:
        assert mask_to_bbox(mask) == ref_bbox(mask)


def test_iou_and_boolean_ops():
    a = np.zeros((4, 4), dtype=bool)
    b = np.zeros((4, 4), dtype=bool)
    assert mask_iou(a, b) == 0.0
    a[:2] = True
    b[1:3] = True
    assert mask_iou(a, b) == pytest.approx(4 / 12)
    assert subtract_mask(a, b).sum() == 4
    assert union_masks([a, b], (4, 4)).sum() == 12
    with pytest.raises(DimensionMismatchError):
        mask_iou(a, np.zeros((3, 4), dtype=bool))


def test_box_mask_rounds_outward_and_clips():
    assert box_to_pixel_bounds((1.2, 0.5, 2.0, 1.0)) == (1, 0, 4, 2)
    m = box_mask((1.2, 0.5, 2.0, 1.0), (5, 5), margin=1)
    ys, xs = np.nonzero(m)
    assert (xs.min(), xs.max(), ys.min(), ys.max()) == (0, 4, 0, 2)


def test_fuse_edge_maps_formula_and_boundaries():
    rng = np.random.default_rng(1)
    a, b = rng.random((8, 9)), rng.random((8, 9))
    out = fuse_edge_maps(a, b, 0.25)
    assert np.allclose(out, 0.25 * a + 0.75 * b, atol=1e-6)
    assert np.array_equal(fuse_edge_maps(a, b, 1.0), a.astype(np.float32))
    assert np.array_equal(fuse_edge_maps(a, b, 0.0), b.astype(np.float32))
    with pytest.raises(ValueError):
        fuse_edge_maps(a, b, 1.5)
    with pytest.raises(ValueError):
        fuse_edge_maps(a * 2, b, 0.5)
    with pytest.raises(DimensionMismatchError):
        fuse_edge_maps(a, b[:-1], 0.5)


def test_extract_instance_patch():
    img = np.arange(5 * 6 * 3, dtype=np.uint8).reshape(5, 6, 3)
    mask = np.zeros((5, 6), dtype=bool)
    mask[1:3, 2:5] = True
    mask[1, 2] = False
    patch, local, bbox = extract_instance_patch(img, mask)
    assert bbox == (2, 1, 3, 2)
    assert patch.shape == (2, 3, 4)
    assert np.array_equal(patch[..., :3], img[1:3, 2:5])
    assert np.array_equal(patch[..., 3] == 255, local)
    assert not local[0, 0]


def test_polygon_rasterisation():
    m = polygons_to_mask([[1, 1, 4, 1, 4, 3, 1, 3]], 6, 6)
    assert m[2, 2] and not m[5, 5]


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, (5, 7, 3)), st.integers(1, 12), st.integers(1, 12))
def test_resize_nearest_matches_reference(a, h, w):
    assert np.array_equal(resize_nearest(a, h, w), ref_resize_nearest(a, h, w))


def test_png_helpers_roundtrip():
    px = np.random.default_rng(0).integers(0, 256, (7, 5, 3), dtype=np.uint8)
    data = encode_png(px, shapes=[{"kind": "rect"}])
    assert png_size(data) == (7, 5)
    assert np.array_equal(decode_png(data), px)
    assert png_shapes(data) == [{"kind": "rect"}]
    assert png_shapes(encode_png(px)) is None
    gray = np.linspace(0, 1, 20, dtype=np.float32).reshape(4, 5)
    assert np.allclose(png_to_gray(gray_to_png(gray)), gray, atol=0.5 / 255 + 1e-7)
