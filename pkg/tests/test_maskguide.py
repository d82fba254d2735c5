import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mvcc.data import generate_instance
from mvcc.errors import DegenerateMemoryError, DimensionError
from mvcc.maskguide import (
    build_memory,
    coarse_mask,
    diff_cd_baseline,
    downsample_any,
    downsample_nearest,
    filter_tokens,
    mask_iou,
)
from mvcc.numerics import Tensor

masks16 = arrays(np.uint8, (16, 16), elements=st.integers(0, 1))


def block_max_oracle(mask, h, w):
    sy, sx = mask.shape[0] // h, mask.shape[1] // w
    out = np.zeros((h, w), dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            for y in range(i * sy, (i + 1) * sy):
                for x in range(j * sx, (j + 1) * sx):
                    if mask[y, x]:
                        out[i, j] = 1
    return out


class TestDownsample:
    @pytest.mark.parametrize("fn", [downsample_nearest, downsample_any])
    def test_constant_masks(self, fn):
        np.testing.assert_array_equal(fn(np.ones((4, 4)), 2, 2), np.ones((2, 2)))
        np.testing.assert_array_equal(fn(np.zeros((4, 4)), 2, 2), np.zeros((2, 2)))

    def test_nearest_centre_sample(self):
        m = np.zeros((4, 4), dtype=np.uint8)
        m[:2, :2] = 1
        np.testing.assert_array_equal(downsample_nearest(m, 2, 2), [[1, 0], [0, 0]])

    def test_nearest_reads_cell_centre(self):
        m = np.zeros((32, 32), dtype=np.uint8)
        m[8, 24] = 1
        np.testing.assert_array_equal(downsample_nearest(m, 2, 2), [[0, 1], [0, 0]])
        m[8, 24], m[0, 0] = 0, 1
        assert not downsample_nearest(m, 2, 2).any()

    def test_any_single_pixel(self):
        m = np.zeros((16, 16), dtype=np.uint8)
        m[13, 2] = 1
        out = downsample_any(m, 4, 4)
        assert out[3, 0] == 1 and out.sum() == 1

    def test_non_divisible(self):
        with pytest.raises(DimensionError):
            downsample_nearest(np.zeros((10, 10)), 3, 3)
        with pytest.raises(DimensionError):
            downsample_any(np.zeros((10, 10)), 4, 4)

    @settings(max_examples=60, deadline=None)
    @given(masks16)
    def test_any_matches_block_scan(self, m):
        np.testing.assert_array_equal(downsample_any(m, 4, 4), block_max_oracle(m, 4, 4))

    @settings(max_examples=60, deadline=None)
    @given(masks16, st.sampled_from([1, 2, 4, 8, 16]))
    def test_binary_and_any_dominates_nearest(self, m, h):
        near, anyv = downsample_nearest(m, h, h), downsample_any(m, h, h)
        assert set(np.unique(near)) <= {0, 1} and set(np.unique(anyv)) <= {0, 1}
        assert np.all(anyv >= near)

    def test_coarse_passthrough(self):
        m = np.array([[0, 1], [1, 0]])
        np.testing.assert_array_equal(coarse_mask(m, 2), m)


class TestFilterTokens:
    tokens = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])

    @pytest.mark.parametrize("mode", ["zero", "drop"])
    def test_all_ones_identity(self, mode):
        out = filter_tokens(self.tokens, self.tokens + 10, np.ones(3), mode)
        np.testing.assert_array_equal(out.data, np.concatenate([self.tokens, self.tokens + 10]))

    def test_zero_mode(self):
        out = filter_tokens(self.tokens, self.tokens, np.array([1, 0, 1]), "zero").data
        np.testing.assert_array_equal(out[:3], [[1, 2], [0, 0], [5, 6]])
        assert out.shape == (6, 2)

    def test_drop_mode(self):
        out = filter_tokens(self.tokens, self.tokens, np.array([1, 0, 1]), "drop").data
        np.testing.assert_array_equal(out, [[1, 2], [5, 6], [1, 2], [5, 6]])

    def test_drop_all_zero_raises(self):
        with pytest.raises(DegenerateMemoryError):
            filter_tokens(self.tokens, self.tokens, np.zeros(3), "drop")

    def test_zero_mode_all_zero_allowed(self):
        assert not filter_tokens(self.tokens, self.tokens, np.zeros(3), "zero").data.any()

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            filter_tokens(self.tokens, self.tokens, np.ones(4), "zero")

    def test_batched_drop_pads_and_flags(self, rng):
        F = Tensor(rng.standard_normal((2, 4, 3)))
        masks = np.array([[1, 0, 0, 0], [1, 1, 0, 1]])
        memory, valid = build_memory(F, F, masks, "drop")
        assert memory.shape == (2, 6, 3)
        np.testing.assert_array_equal(valid.sum(axis=1), [2, 6])
        assert not memory.data[0, 2:].any()
        np.testing.assert_array_equal(memory.data[1, :3], F.data[1, [0, 1, 3]])


class TestBaselineCD:
    def test_identical_images(self, rng):
        img = rng.random((32, 32, 3))
        assert not diff_cd_baseline(img, img).any()

    def test_single_block(self, rng):
        a = rng.random((32, 32, 3)) * 0.5
        b = a.copy()
        b[8:16, 16:24] += 0.5
        expected = np.zeros((32, 32), dtype=np.uint8)
        expected[8:16, 16:24] = 1
        np.testing.assert_array_equal(diff_cd_baseline(a, b, threshold=0.25, min_blob=4), expected)

    def test_small_blobs_removed(self):
        a = np.zeros((16, 16, 3))
        b = a.copy()
        b[2, 2] = 1.0
        b[8:12, 8:12] = 1.0
        out = diff_cd_baseline(a, b, 0.2, 8)
        assert out[2, 2] == 0 and out[8:12, 8:12].all() and out.sum() == 16

    def test_iou_against_generator(self):
        ious = []
        for i in range(100):
            _, inst = generate_instance(2024, i)
            ious.append(mask_iou(diff_cd_baseline(inst.image_a, inst.image_b), inst.mask))
        assert np.mean(ious) >= 0.5

    def test_iou_edge_cases(self):
        z = np.zeros((4, 4))
        assert mask_iou(z, z) == 1.0
        o = np.ones((4, 4))
        assert mask_iou(o, z) == 0.0
        half = o.copy()
        half[:2] = 0
        assert mask_iou(half, o) == 0.5
