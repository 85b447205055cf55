import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptseg.core import (
    BinaryMask,
    MalformedRleError,
    RleMask,
    ShapeError,
    bce_with_logits,
    mask_iou,
    mask_union,
    rle_decode,
    rle_encode,
    soft_dice,
)


def hand_rle(bits_flat):
    """Independent run-length oracle: walk the bit string and count runs.

    Starts in the background state, so a leading foreground pixel yields a
    zero-length first run naturally.
    """
    runs = []
    current = False
    count = 0
    for b in bits_flat:
        if bool(b) == current:
            count += 1
        else:
            runs.append(count)
            current = bool(b)
            count = 1
    runs.append(count)
    return runs


def make_mask(rows):
    return BinaryMask(np.array(rows, dtype=bool))


class TestRle:
    def test_all_background_2x2(self):
        rle = rle_encode(BinaryMask.empty(2, 2))
        assert rle.counts == (4,)

    def test_all_foreground_2x2(self):
        rle = rle_encode(make_mask([[1, 1], [1, 1]]))
        assert rle.counts == (0, 4)

    def test_hand_oracle_0110(self):
        mask = make_mask([[0, 1, 1, 0]])
        expected = tuple(hand_rle([0, 1, 1, 0]))
        assert expected == (1, 2, 1)
        assert rle_encode(mask).counts == expected

    def test_decode_trivial(self):
        assert rle_decode(RleMask(2, 2, (4,))) == BinaryMask.empty(2, 2)
        assert rle_decode(RleMask(2, 2, (0, 4))) == make_mask([[1, 1], [1, 1]])
        assert rle_decode(RleMask(1, 4, (1, 2, 1))) == make_mask([[0, 1, 1, 0]])

    def test_decode_sum_mismatch(self):
        with pytest.raises(MalformedRleError):
            RleMask(2, 2, (3,))

    def test_interior_zero_rejected(self):
        with pytest.raises(MalformedRleError):
            RleMask(1, 4, (1, 0, 2, 1))

    @settings(max_examples=200, deadline=None)
    @given(
        h=st.integers(1, 9),
        w=st.integers(1, 9),
        data=st.data(),
    )
    def test_round_trip_property(self, h, w, data):
        bits = data.draw(st.lists(st.booleans(), min_size=h * w, max_size=h * w))
        mask = BinaryMask(np.array(bits, dtype=bool).reshape(h, w))
        rle = rle_encode(mask)
        assert rle_decode(rle) == mask
        assert list(rle.counts) == hand_rle(bits)

    def test_json_round_trip(self):
        rle = RleMask(2, 3, (1, 2, 3))
        assert RleMask.from_json(rle.to_json()) == rle


class TestIou:
    def test_identical_nonempty(self):
        m = make_mask([[1, 0], [0, 1]])
        assert mask_iou(m, m) == 1.0

    def test_disjoint(self):
        a = make_mask([[1, 0], [0, 0]])
        b = make_mask([[0, 0], [0, 1]])
        assert mask_iou(a, b) == 0.0

    def test_pixel_count_oracle(self):
        # a = {(0,0),(0,1)}, b = {(0,1),(1,1)}: |inter| = 1, |union| = 3
        a = BinaryMask.from_pixels(2, 2, [(0, 0), (0, 1)])
        b = BinaryMask.from_pixels(2, 2, [(0, 1), (1, 1)])
        assert mask_iou(a, b) == pytest.approx(1 / 3)

    def test_empty_empty_is_one(self):
        assert mask_iou(BinaryMask.empty(3, 3), BinaryMask.empty(3, 3)) == 1.0

    def test_empty_vs_nonempty_is_zero(self):
        assert mask_iou(BinaryMask.empty(2, 2), make_mask([[1, 0], [0, 0]])) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mask_iou(BinaryMask.empty(2, 2), BinaryMask.empty(2, 3))

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        a = BinaryMask(rng.random((5, 5)) < 0.4)
        b = BinaryMask(rng.random((5, 5)) < 0.4)
        assert mask_iou(a, b) == mask_iou(b, a)
        assert mask_iou(a, a) == 1.0


class TestUnion:
    def test_idempotent(self):
        m = make_mask([[1, 0], [1, 1]])
        assert mask_union([m, m]) == m

    def test_two_disjoint_pixels(self):
        a = BinaryMask.from_pixels(2, 2, [(0, 0)])
        b = BinaryMask.from_pixels(2, 2, [(1, 1)])
        assert mask_union([a, b]).area == 2

    def test_empty_list_needs_dims(self):
        assert mask_union([], height=3, width=4) == BinaryMask.empty(3, 4)
        with pytest.raises(ShapeError):
            mask_union([])

    def test_per_pixel_oracle(self):
        rng = np.random.default_rng(7)
        masks = [BinaryMask(rng.random((6, 6)) < 0.3) for _ in range(5)]
        got = mask_union(masks)
        for r in range(6):
            for c in range(6):
                expected = any(m.bits[r, c] for m in masks)
                assert bool(got.bits[r, c]) == expected

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_associative_commutative(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (BinaryMask(rng.random((4, 4)) < 0.5) for _ in range(3))
        assert mask_union([mask_union([a, b]), c]) == mask_union([a, mask_union([b, c])])
        assert mask_union([a, b]) == mask_union([b, a])


class TestSoftDice:
    def test_perfect_prediction_large_target(self):
        rng = np.random.default_rng(0)
        bits = rng.random((16, 16)) < 0.5
        assert bits.sum() >= 100
        target = BinaryMask(bits)
        loss = soft_dice(bits.astype(float), target)
        assert loss < 0.01

    def test_all_zero_vs_four_pixels(self):
        target = BinaryMask.from_pixels(2, 2, [(0, 0), (0, 1), (1, 0), (1, 1)])
        # 1 - (0 + 1) / (0 + 4 + 1) = 0.8, by plugging into the formula
        assert soft_dice(np.zeros((2, 2)), target) == pytest.approx(0.8)

    def test_all_zero_vs_empty_target(self):
        assert soft_dice(np.zeros((3, 3)), BinaryMask.empty(3, 3)) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            soft_dice(np.zeros((2, 3)), BinaryMask.empty(2, 2))

    def test_range_violation(self):
        with pytest.raises(ValueError):
            soft_dice(np.full((2, 2), 1.5), BinaryMask.empty(2, 2))

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_in_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        pred = rng.random((5, 5))
        target = BinaryMask(rng.random((5, 5)) < 0.5)
        assert 0.0 <= soft_dice(pred, target) <= 1.0


class TestBce:
    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(4, 4)) * 3
        target = BinaryMask(rng.random((4, 4)) < 0.5)
        total = 0.0
        for r in range(4):
            for c in range(4):
                z = float(logits[r, c])
                t = 1.0 if target.bits[r, c] else 0.0
                p = 1.0 / (1.0 + np.exp(-z))
                total += -(t * np.log(p) + (1 - t) * np.log(1 - p))
        assert bce_with_logits(logits, target) == pytest.approx(total / 16, rel=1e-9)

    def test_extreme_logits_finite(self):
        target = BinaryMask.empty(2, 2)
        assert np.isfinite(bce_with_logits(np.full((2, 2), 1e9), target))
