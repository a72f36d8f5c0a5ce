import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clutterlab.errors import EmptyFusionError, EmptyMaskError, UnregisteredClassError
from clutterlab.fusion import (
    FusionPolicy,
    box_from_mask,
    fuse,
    intersect_boxes,
    assign_label,
)
from clutterlab.types import BinaryMask, Box, ClassRegistry


def mask_from(bits):
    return BinaryMask(np.asarray(bits, dtype=bool))


def full_mask(w, h, value=True):
    return BinaryMask(np.full((h, w), value, dtype=bool))


boxes_st = st.builds(
    lambda x, y, w, h: Box(x, y, x + w, y + h),
    st.integers(0, 20),
    st.integers(0, 20),
    st.integers(1, 20),
    st.integers(1, 20),
)


def test_box_from_mask_examples():
    assert box_from_mask(full_mask(10, 10)) == Box(0, 0, 10, 10)
    bits = np.zeros((8, 8), dtype=bool)
    bits[4, 3] = True  # (x=3, y=4)
    assert box_from_mask(BinaryMask(bits)) == Box(3, 4, 4, 5)
    with pytest.raises(EmptyMaskError):
        box_from_mask(full_mask(4, 4, False))


def test_box_from_mask_matches_exhaustive_scan():
    rng = np.random.default_rng(2)
    for _ in range(50):
        bits = rng.random((12, 17)) < 0.08
        if not bits.any():
            continue
        box = box_from_mask(BinaryMask(bits))
        # oracle: plain min/max scan over true pixel coordinates
        xs = [x for y in range(12) for x in range(17) if bits[y, x]]
        ys = [y for y in range(12) for x in range(17) if bits[y, x]]
        assert box == Box(min(xs), min(ys), max(xs) + 1, max(ys) + 1)


def test_intersect_examples():
    assert intersect_boxes(Box(0, 0, 4, 4), Box(2, 2, 6, 6)) == Box(2, 2, 4, 4)
    assert intersect_boxes(Box(0, 0, 2, 2), Box(5, 5, 7, 7)) is None


@given(boxes_st)
def test_intersect_idempotent(box):
    assert intersect_boxes(box, box) == box


@given(boxes_st, boxes_st)
def test_intersect_symmetric(a, b):
    assert intersect_boxes(a, b) == intersect_boxes(b, a)


def test_fuse_box_priority_wins():
    # Mask priority below box priority: the predicted box is the final region.
    mask = mask_from(np.zeros((10, 10), dtype=bool))
    mask.bits[1:3, 1:3] = True
    box = Box(5, 5, 9, 9)
    fused = fuse(mask, box, FusionPolicy(0, 1))
    assert fused.final_box == box
    assert fused.rule_applied == "box_only"
    # mask has no support inside the box: filled-region fallback
    assert fused.final_mask.count() == box.area


def test_fuse_mask_priority_wins():
    bits = np.zeros((10, 10), dtype=bool)
    bits[2:6, 3:8] = True
    fused = fuse(BinaryMask(bits), Box(0, 0, 1, 1), FusionPolicy(1, 0))
    assert fused.final_box == Box(3, 2, 8, 6)
    assert fused.rule_applied == "mask_only"
    assert np.array_equal(fused.final_mask.bits, bits)


def test_fuse_equal_priorities_intersection():
    bits = np.zeros((4, 12), dtype=bool)
    bits[0:4, 0:8] = True  # box_m = (0,0,8,4)
    fused = fuse(BinaryMask(bits), Box(4, 0, 12, 4), FusionPolicy(1, 1))
    assert fused.final_box == Box(4, 0, 8, 4)
    assert fused.rule_applied == "intersection"
    expected = np.zeros((4, 12), dtype=bool)
    expected[0:4, 4:8] = True
    assert np.array_equal(fused.final_mask.bits, expected)


def test_fuse_equal_identical_boxes_keeps_mask():
    bits = np.zeros((6, 6), dtype=bool)
    bits[1:5, 1:5] = True
    fused = fuse(BinaryMask(bits), Box(1, 1, 5, 5), FusionPolicy(1, 1))
    assert fused.final_box == Box(1, 1, 5, 5)
    assert np.array_equal(fused.final_mask.bits, bits)


def test_fuse_disjoint_equal_priorities_rejected():
    bits = np.zeros((6, 12), dtype=bool)
    bits[0:2, 0:2] = True
    with pytest.raises(EmptyFusionError):
        fuse(BinaryMask(bits), Box(8, 4, 12, 6), FusionPolicy(2, 2))


@settings(max_examples=200, deadline=None)
@given(
    st.integers(0, 3),
    st.integers(0, 3),
    st.data(),
)
def test_fuse_trichotomy_and_containment(pm, pb, data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    bits = rng.random((15, 15)) < 0.2
    if not bits.any():
        bits[7, 7] = True
    box = data.draw(boxes_st)
    box = Box(box.x_min % 10, box.y_min % 10,
              box.x_min % 10 + max(1, box.width % 5),
              box.y_min % 10 + max(1, box.height % 5))
    mask = BinaryMask(bits)
    try:
        fused = fuse(mask, box, FusionPolicy(pm, pb))
    except EmptyFusionError:
        assert pm == pb
        assert intersect_boxes(box_from_mask(mask), box) is None
        return
    # exactly one branch per ordering
    expected_rule = "box_only" if pm < pb else ("intersection" if pm == pb else "mask_only")
    assert fused.rule_applied == expected_rule
    # containment: mask true pixels never escape the final box
    outside = fused.final_mask.bits.copy()
    outside[fused.final_box.y_min:fused.final_box.y_max,
            fused.final_box.x_min:fused.final_box.x_max] = False
    assert not outside.any()
    # purity: same inputs, same outputs
    again = fuse(mask, box, FusionPolicy(pm, pb))
    assert again.final_box == fused.final_box
    assert np.array_equal(again.final_mask.bits, fused.final_mask.bits)


def test_assign_label_counts_and_errors():
    registry = ClassRegistry()
    cid = registry.register("bottle")
    bits = np.zeros((9, 9), dtype=bool)
    bits[2:5, 2:7] = True
    fused = fuse(BinaryMask(bits), Box(2, 2, 7, 5), FusionPolicy(1, 1))
    labels, record = assign_label(fused, cid, registry)
    assert record == (cid, Box(2, 2, 7, 5))
    assert int((labels.ids == cid).sum()) == fused.final_mask.count()
    assert set(np.unique(labels.ids)) == {0, cid}

    with pytest.raises(UnregisteredClassError):
        assign_label(fused, 42, registry)


def test_assign_label_random_counting_oracle():
    registry = ClassRegistry()
    cid = registry.register("brush")
    rng = np.random.default_rng(31)
    for _ in range(25):
        bits = rng.random((12, 12)) < 0.3
        if not bits.any():
            continue
        box = box_from_mask(BinaryMask(bits))
        fused = fuse(BinaryMask(bits), box, FusionPolicy(1, 1))
        labels, _ = assign_label(fused, cid, registry)
        # oracle: per-pixel recount
        expected = sum(
            1 for y in range(12) for x in range(12) if fused.final_mask.bits[y, x]
        )
        assert int((labels.ids != 0).sum()) == expected
