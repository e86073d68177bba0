import numpy as np
import pytest

from stream4d.layout import (AttentionMask, FrameLayout, build_flat_causal_mask,
                             build_full_mask, build_grouped_causal_mask,
                             build_sliding_window_mask)


def brute_force_grouped(layout):
    n = layout.total_tokens
    return np.array([[layout.frame_of_token(k) <= layout.frame_of_token(q)
                      for k in range(n)] for q in range(n)])


def brute_force_flat(layout):
    n = layout.total_tokens
    return np.array([[k <= q for k in range(n)] for q in range(n)])


def brute_force_sliding(layout, w):
    n = layout.total_tokens
    f = layout.frame_of_token
    return np.array([[f(q) - w <= f(k) <= f(q) for k in range(n)] for q in range(n)])


class TestFrameLayout:
    def test_patch_count(self):
        lo = FrameLayout(3, 4, 16, 16)
        assert lo.patch_tokens == 16
        assert lo.tokens_per_frame == 17
        assert lo.total_tokens == 51

    def test_camera_index_stride(self):
        lo = FrameLayout(4, 2, 4, 4)
        assert [lo.camera_index(t) for t in range(4)] == [0, 5, 10, 15]

    def test_divisibility_enforced(self):
        with pytest.raises(ValueError, match="divisible"):
            FrameLayout(2, 3, 16, 16)

    def test_from_patch_count(self):
        lo = FrameLayout.from_patch_count(2, 3)
        assert lo.patch_tokens == 3 and lo.total_tokens == 8


class TestGroupedCausal:
    def test_two_frames_one_patch(self):
        lo = FrameLayout.from_patch_count(2, 1)
        expected = np.array([[1, 1, 0, 0],
                             [1, 1, 0, 0],
                             [1, 1, 1, 1],
                             [1, 1, 1, 1]], dtype=bool)
        assert np.array_equal(build_grouped_causal_mask(lo).visible, expected)

    def test_single_frame_equals_full(self):
        lo = FrameLayout(1, 4, 16, 16)
        assert np.array_equal(build_grouped_causal_mask(lo).visible,
                              build_full_mask(lo).visible)

    def test_matches_per_entry_predicate(self):
        lo = FrameLayout.from_patch_count(3, 3)
        assert np.array_equal(build_grouped_causal_mask(lo).visible, brute_force_grouped(lo))

    def test_equals_flat_or_within_frame_blocks(self):
        lo = FrameLayout.from_patch_count(3, 3)
        flat = build_flat_causal_mask(lo).visible
        per = lo.tokens_per_frame
        blocks = np.zeros_like(flat)
        for t in range(lo.num_frames):
            s = t * per
            blocks[s:s + per, s:s + per] = True
        assert np.array_equal(build_grouped_causal_mask(lo).visible, flat | blocks)


class TestSlidingWindow:
    def test_window_equal_frames_is_grouped(self):
        lo = FrameLayout.from_patch_count(4, 2)
        assert np.array_equal(build_sliding_window_mask(lo, 4).visible,
                              build_grouped_causal_mask(lo).visible)

    def test_window_one_three_frames(self):
        lo = FrameLayout.from_patch_count(3, 2)
        mask = build_sliding_window_mask(lo, 1).visible
        f = lo.token_frames()
        # queries of the second frame (0-indexed frame 1) see frames 0 and 1 only
        row = mask[lo.camera_index(1)]
        assert set(f[row]) == {0, 1}
        row_last = mask[lo.camera_index(2)]
        assert set(f[row_last]) == {1, 2}

    def test_counting_window_five(self):
        lo = FrameLayout.from_patch_count(5, 16)
        mask = build_sliding_window_mask(lo, 5).visible
        last_frame_rows = mask[4 * lo.tokens_per_frame:]
        assert (last_frame_rows.sum(axis=1) == 5 * (1 + 16)).all()

    def test_matches_predicate(self):
        lo = FrameLayout.from_patch_count(5, 2)
        for w in (1, 2, 3):
            assert np.array_equal(build_sliding_window_mask(lo, w).visible,
                                  brute_force_sliding(lo, w))

    def test_zero_window_rejected(self):
        lo = FrameLayout.from_patch_count(3, 2)
        with pytest.raises(ValueError, match=">= 1"):
            build_sliding_window_mask(lo, 0)

    def test_unbounded_equals_grouped(self):
        lo = FrameLayout.from_patch_count(6, 3)
        assert np.array_equal(build_sliding_window_mask(lo, 10 ** 6).visible,
                              build_grouped_causal_mask(lo).visible)


class TestMaskProperties:
    def test_grouped_superset_of_flat_cross_frame_and_blocks(self):
        lo = FrameLayout.from_patch_count(4, 3)
        grouped = build_grouped_causal_mask(lo).visible
        flat = build_flat_causal_mask(lo).visible
        assert (grouped | flat == grouped).all()

    def test_within_frame_permutation_invariance(self):
        lo = FrameLayout.from_patch_count(3, 4)
        grouped = build_grouped_causal_mask(lo).visible
        rng = np.random.Generator(np.random.PCG64(0))
        perm = np.arange(lo.total_tokens)
        for t in range(lo.num_frames):
            s = t * lo.tokens_per_frame
            block = perm[s:s + lo.tokens_per_frame].copy()
            rng.shuffle(block)
            perm[s:s + lo.tokens_per_frame] = block
        assert np.array_equal(grouped[np.ix_(perm, perm)], grouped)

    def test_every_row_visible(self):
        lo = FrameLayout.from_patch_count(5, 1)
        for build in (build_grouped_causal_mask, build_flat_causal_mask, build_full_mask):
            assert build(lo).visible.any(axis=1).all()

    def test_text_dump(self):
        lo = FrameLayout.from_patch_count(2, 1)
        text = build_grouped_causal_mask(lo).to_text()
        assert text.splitlines()[0] == "1100"

    def test_degenerate_mask_rejected(self):
        visible = np.ones((3, 3), dtype=bool)
        visible[1] = False
        with pytest.raises(ValueError, match="no visible"):
            AttentionMask(visible, "broken")
