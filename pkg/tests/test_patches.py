import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimforge.patches import (
    MaskParameterError,
    MaskPlan,
    apply_mask,
    blockwise_mask,
    default_min_block,
    patchify,
    patchify_batch,
    unpatchify,
    unpatchify_batch,
)
from mimforge.tensor import DimensionError, Tensor


def admissible_rectangles(rows, cols, min_block, max_block, max_aspect):
    """Every (top, left, h, w) rectangle the sampler may legally place."""
    out = []
    for h in range(1, rows + 1):
        for w in range(1, cols + 1):
            if not min_block <= h * w <= max_block:
                continue
            if h > max_aspect * w or w > max_aspect * h:
                continue
            for top in range(rows - h + 1):
                for left in range(cols - w + 1):
                    out.append((top, left, h, w))
    return out


def covered_by_rectangles(plan, rows, cols, rects):
    """Brute force: each masked cell lies in some admissible rectangle that is fully masked."""
    mask = plan.as_bool(rows * cols).reshape(rows, cols)
    covered = np.zeros_like(mask)
    for top, left, h, w in rects:
        if mask[top : top + h, left : left + w].all():
            covered[top : top + h, left : left + w] = True
    return bool(np.array_equal(covered, mask))


class TestPatchify:
    def test_reference_resolution(self):
        seq = patchify(np.zeros((224, 224, 3)), 16)
        assert seq.grid == (14, 14)
        assert seq.patches.shape == (196, 768)

    def test_single_patch_is_whole_image(self, rng):
        img = rng.random((8, 8, 3))
        seq = patchify(img, 8)
        assert seq.patches.shape == (1, 192)
        np.testing.assert_array_equal(seq.patches[0], img.reshape(-1))

    def test_small_round_trip(self):
        img = np.arange(16.0).reshape(4, 4, 1)
        seq = patchify(img, 2)
        assert seq.patches.tolist() == [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]]
        np.testing.assert_array_equal(unpatchify(seq), img)

    def test_flattening_order_is_row_col_channel(self):
        img = np.arange(2 * 4 * 2, dtype=float).reshape(2, 4, 2)
        seq = patchify(img, 2)
        np.testing.assert_array_equal(seq.patches[1], img[0:2, 2:4, :].reshape(-1))

    def test_indivisible(self):
        with pytest.raises(DimensionError):
            patchify(np.zeros((10, 12, 3)), 4)

    def test_batch_matches_single(self, rng):
        imgs = rng.random((3, 8, 12, 2))
        batch = patchify_batch(imgs, 4)
        for b in range(3):
            np.testing.assert_array_equal(batch[b], patchify(imgs[b], 4).patches)
        np.testing.assert_array_equal(unpatchify_batch(batch, (2, 3), 4), imgs)

    @settings(max_examples=100, deadline=None)
    @given(
        st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(1, 3), st.integers(0, 2**32 - 1)
    )
    def test_round_trip_is_exact(self, p, r, c, ch, seed):
        img = np.random.default_rng(seed).standard_normal((r * p, c * p, ch))
        back = unpatchify(patchify(img, p))
        assert back.tobytes() == img.tobytes()


class TestBlockwiseMask:
    def test_reference_grid_reaches_target(self):
        plan = blockwise_mask((14, 14), 0.4, rng_seed=3)
        assert len(plan.masked) >= 79

    def test_default_min_block_scales(self):
        assert default_min_block(196) == 16
        assert default_min_block(64) == 5
        assert default_min_block(4) == 1

    def test_saturation(self):
        plan = blockwise_mask((3, 3), 0.99, min_block=9, rng_seed=0)
        assert plan.masked == frozenset(range(9))

    def test_infeasible_min_block(self):
        with pytest.raises(MaskParameterError):
            blockwise_mask((4, 4), 0.4, min_block=17)

    @pytest.mark.parametrize("ratio", [0.0, 1.0, -0.1])
    def test_ratio_out_of_range(self, ratio):
        with pytest.raises(MaskParameterError):
            blockwise_mask((4, 4), ratio)

    def test_attempt_bound_raises(self):
        # A 1x5 block fits in a 1x8 grid but is too elongated for max_aspect 3.33.
        with pytest.raises(MaskParameterError, match="attempts"):
            blockwise_mask((1, 8), 0.5, min_block=5, max_block=5)

    def test_small_grid_brute_force_oracle(self):
        rows = cols = 4
        target = math.ceil(0.4 * 16)
        max_block = target
        rects = admissible_rectangles(rows, cols, 2, max_block, 3.33)
        for seed in range(1000):
            plan = blockwise_mask((rows, cols), 0.4, min_block=2, rng_seed=seed)
            assert target <= len(plan.masked) <= target + max_block - 1
            assert covered_by_rectangles(plan, rows, cols, rects)
            for top, left, h, w in plan.blocks:
                assert (top, left, h, w) in rects

    def test_deterministic_for_seed(self):
        a = blockwise_mask((14, 14), 0.4, rng_seed=99)
        b = blockwise_mask((14, 14), 0.4, rng_seed=99)
        assert a.masked == b.masked and a.blocks == b.blocks

    def test_mean_fraction_over_seeds(self):
        fracs = [len(blockwise_mask((14, 14), 0.4, rng_seed=s).masked) / 196 for s in range(300)]
        assert 0.40 <= np.mean(fracs) <= 0.40 + 79 / 196

    @settings(max_examples=150, deadline=None)
    @given(
        st.integers(2, 8),
        st.integers(2, 8),
        st.floats(0.05, 0.9),
        st.integers(0, 2**63 - 1),
    )
    def test_invariants_hold(self, rows, cols, ratio, seed):
        d = rows * cols
        plan = blockwise_mask((rows, cols), ratio, min_block=1, rng_seed=seed)
        target = math.ceil(ratio * d)
        assert target <= len(plan.masked) <= target + target - 1
        assert all(0 <= i < d for i in plan.masked)
        union = set()
        for top, left, h, w in plan.blocks:
            assert h <= 3.33 * w and w <= 3.33 * h
            union |= {(top + i) * cols + left + j for i in range(h) for j in range(w)}
        assert union == set(plan.masked)


class TestMaskPlanLine:
    def test_round_trip(self):
        plan = blockwise_mask((6, 6), 0.4, rng_seed=2**64 - 1)
        line = plan.to_line()
        assert line.startswith(f"seed={2**64 - 1} ratio=0.4 masked=")
        back = MaskPlan.from_line(line)
        assert back.masked == plan.masked and back.seed == plan.seed and back.target_ratio == 0.4

    def test_empty(self):
        back = MaskPlan.from_line(MaskPlan(frozenset(), 0.5, 1).to_line())
        assert back.masked == frozenset()


class TestApplyMask:
    def test_empty_mask_is_identity(self, rng):
        x = Tensor(rng.standard_normal((5, 3)))
        out = apply_mask(x, MaskPlan(frozenset(), 0.4, 0), Tensor(np.ones(3)))
        assert out.data.tobytes() == x.data.tobytes()

    def test_all_masked(self, rng):
        e = rng.standard_normal(3)
        out = apply_mask(Tensor(rng.standard_normal((4, 3))), MaskPlan(frozenset(range(4)), 0.4, 0), Tensor(e))
        np.testing.assert_array_equal(out.data, np.tile(e, (4, 1)))

    def test_selected_rows(self, rng):
        x = rng.standard_normal((5, 4))
        e = rng.standard_normal(4)
        out = apply_mask(Tensor(x), MaskPlan(frozenset({0, 3}), 0.4, 0), Tensor(e)).data
        for k in (1, 2, 4):
            assert out[k].tobytes() == x[k].tobytes()
        for k in (0, 3):
            assert out[k].tobytes() == e.tobytes()

    def test_idempotent(self, rng):
        x = Tensor(rng.standard_normal((6, 2)))
        e = Tensor(rng.standard_normal(2))
        plan = MaskPlan(frozenset({1, 5}), 0.3, 0)
        once = apply_mask(x, plan, e)
        twice = apply_mask(once, plan, e)
        assert once.data.tobytes() == twice.data.tobytes()

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            apply_mask(Tensor(np.zeros((3, 2))), MaskPlan(frozenset({3}), 0.4, 0), Tensor(np.zeros(2)))

    def test_gradient_routes_to_mask_embedding(self, rng):
        x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        e = Tensor(np.zeros(3), requires_grad=True)
        apply_mask(x, MaskPlan(frozenset({0, 2}), 0.4, 0), e).sum().backward()
        np.testing.assert_array_equal(e.grad, np.full(3, 2.0))
        np.testing.assert_array_equal(x.grad[[1, 3]], np.ones((2, 3)))
        np.testing.assert_array_equal(x.grad[[0, 2]], np.zeros((2, 3)))
