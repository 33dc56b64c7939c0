import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import brute_force_info_nce
from regiontok.errors import (DegenerateBatchError, EmptyMaskError,
                              NumericsError, ValidationError)
from regiontok.losses import (LossWeights, attention_supervision_loss,
                              feature_similarity_loss, info_nce_loss,
                              rasterize_attention_targets, target_tokens,
                              total_loss)
from regiontok.synth import NO_REGION


class TestInfoNce:
    def test_two_tokens_same_id_zero(self, rng):
        tokens = rng.normal(size=(2, 8))
        loss, _ = info_nce_loss(tokens, np.array([3, 3]), tau=0.1)
        assert loss == 0.0

    def test_orthonormal_pairs_closed_form(self):
        e1 = np.array([1.0, 0, 0, 0])
        e2 = np.array([0, 1.0, 0, 0])
        tokens = np.stack([e1, e1, e2, e2])
        loss, _ = info_nce_loss(tokens, np.array([0, 0, 1, 1]), tau=0.1)
        expected = math.log(1.0 + 2.0 * math.exp(-10.0))
        assert abs(loss - expected) < 1e-9
        assert abs(loss - 9.08e-5) < 1e-6

    def test_scale_invariance(self, rng):
        tokens = rng.normal(size=(6, 8))
        ids = np.array([0, 0, 1, 1, 2, 2])
        a, _ = info_nce_loss(tokens, ids, tau=0.1)
        b, _ = info_nce_loss(tokens * 3.0, ids, tau=0.1)
        assert abs(a - b) < 1e-6

    def test_matches_brute_force_200_cases(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(2, 17))
            tokens = rng.normal(size=(n, int(rng.integers(3, 9))))
            ids = rng.integers(-1, 3, size=n)
            try:
                want = brute_force_info_nce(tokens, ids, tau=0.1)
            except DegenerateBatchError:
                with pytest.raises(DegenerateBatchError):
                    info_nce_loss(tokens, ids, tau=0.1)
                continue
            got, _ = info_nce_loss(tokens, ids, tau=0.1)
            assert abs(got - want) <= 1e-6 * max(1.0, abs(want))

    def test_permutation_invariance(self, rng):
        tokens = rng.normal(size=(7, 6))
        ids = np.array([0, 1, 0, 2, 1, 2, 0])
        perm = rng.permutation(7)
        a, _ = info_nce_loss(tokens, ids, tau=0.1)
        b, _ = info_nce_loss(tokens[perm], ids[perm], tau=0.1)
        assert abs(a - b) < 1e-9

    def test_no_positive_anchor_raises(self, rng):
        tokens = rng.normal(size=(4, 8))
        with pytest.raises(DegenerateBatchError):
            info_nce_loss(tokens, np.array([0, 1, 2, 3]), tau=0.1)

    def test_none_ids_are_negatives_only(self, rng):
        tokens = rng.normal(size=(5, 8))
        ids = np.array([0, 0, NO_REGION, NO_REGION, NO_REGION])
        got, _ = info_nce_loss(tokens, ids, tau=0.1)
        want = brute_force_info_nce(tokens, ids, tau=0.1)
        assert abs(got - want) < 1e-9

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        tokens = rng.normal(size=(5, 4))
        ids = np.array([0, 0, 1, 1, 0])
        _, grad = info_nce_loss(tokens, ids, tau=0.1)
        eps = 1e-6
        for i in range(5):
            for j in range(4):
                up = tokens.copy(); up[i, j] += eps
                down = tokens.copy(); down[i, j] -= eps
                fd = (brute_force_info_nce(up, ids, 0.1)
                      - brute_force_info_nce(down, ids, 0.1)) / (2 * eps)
                assert abs(grad[i, j] - fd) < 1e-5


class TestFeatureSimilarity:
    def test_identical_is_zero(self, rng):
        a = rng.normal(size=(4, 8))
        loss, _ = feature_similarity_loss(a, a.copy())
        assert abs(loss) < 1e-12

    def test_opposite_is_two(self, rng):
        a = rng.normal(size=(4, 8))
        loss, _ = feature_similarity_loss(a, -a)
        assert abs(loss - 2.0) < 1e-12

    def test_orthogonal_is_one(self):
        a = np.array([[1.0, 0.0], [0.0, 2.0]])
        t = np.array([[0.0, 3.0], [1.0, 0.0]])
        loss, _ = feature_similarity_loss(a, t)
        assert abs(loss - 1.0) < 1e-12

    def test_zero_norm_raises(self):
        a = np.array([[0.0, 0.0], [1.0, 0.0]])
        t = np.ones((2, 2))
        with pytest.raises(NumericsError):
            feature_similarity_loss(a, t)

    def test_gradient_matches_finite_differences(self, rng):
        a = rng.normal(size=(3, 5))
        t = rng.normal(size=(3, 5))
        _, grad = feature_similarity_loss(a, t)
        eps = 1e-6
        for i in range(3):
            for j in range(5):
                up = a.copy(); up[i, j] += eps
                down = a.copy(); down[i, j] -= eps
                fd = (feature_similarity_loss(up, t)[0]
                      - feature_similarity_loss(down, t)[0]) / (2 * eps)
                assert abs(grad[i, j] - fd) < 1e-6


class TestTargetTokens:
    def test_single_patch_center(self, small_render):
        fmap = small_render.feature_map
        # a mask exactly covering one patch cell covers exactly one center
        from regiontok.dataplane import RegionMask
        grid = np.zeros((64, 64), dtype=bool)
        grid[8:16, 16:24] = True
        mask = RegionMask.from_bool(grid)
        out = target_tokens(fmap, [mask], np.array([0]))
        np.testing.assert_array_equal(out[0], fmap.data[1, 2])

    def test_two_patches_mean(self, small_render):
        fmap = small_render.feature_map
        from regiontok.dataplane import RegionMask
        grid = np.zeros((64, 64), dtype=bool)
        grid[8:16, 16:32] = True      # patch cells (1,2) and (1,3)
        mask = RegionMask.from_bool(grid)
        out = target_tokens(fmap, [mask], np.array([0]))
        expected = (fmap.data[1, 2].astype(np.float64)
                    + fmap.data[1, 3].astype(np.float64)) / 2
        np.testing.assert_allclose(out[0], expected, rtol=1e-6)

    def test_random_scene_matches_pixel_oracle(self, small_render):
        fmap = small_render.feature_map
        masks = small_render.masks
        ids = np.arange(len(masks))
        out = target_tokens(fmap, masks, ids)
        cell = 64 // 8
        for mid, mask in enumerate(masks):
            grid = mask.to_bool()
            members = []
            for r in range(8):
                for c in range(8):
                    cy = r * cell + cell // 2
                    cx = c * cell + cell // 2
                    if grid[cy, cx]:
                        members.append(fmap.data[r, c].astype(np.float64))
            np.testing.assert_allclose(out[mid], np.mean(members, axis=0),
                                       rtol=1e-6)

    def test_empty_mask_raises(self, small_render):
        from regiontok.dataplane import RegionMask
        grid = np.zeros((64, 64), dtype=bool)
        grid[0, 0] = True   # corner pixel is no patch center
        mask = RegionMask.from_bool(grid)
        with pytest.raises(EmptyMaskError):
            target_tokens(small_render.feature_map, [mask], np.array([0]))

    def test_none_id_rejected(self, small_render):
        with pytest.raises(ValidationError):
            target_tokens(small_render.feature_map, small_render.masks,
                          np.array([NO_REGION]))


class TestAttentionSupervision:
    def test_exact_match_gives_zero_dice(self):
        targets = np.array([[0.5, 0.5, 0.0, 0.0], [0.0, 0.0, 0.5, 0.5]])
        loss, _ = attention_supervision_loss(targets.copy(), targets)
        # dice term is exactly zero; remaining value is pure BCE
        a = np.clip(targets, 1e-12, 1 - 1e-12)
        bce = -(targets * np.log(a) + (1 - targets) * np.log1p(-a)).mean()
        assert abs(loss - bce) < 1e-12

    def test_uniform_attention_closed_form(self):
        m = 8
        attention = np.full((1, m), 1.0 / m)
        mask = np.zeros(m)
        mask[: m // 2] = 1.0
        targets = (mask / mask.sum())[None, :]
        loss, _ = attention_supervision_loss(attention, targets)
        a = 1.0 / m
        t = 2.0 / m
        bce = -((m / 2) * (t * math.log(a) + (1 - t) * math.log(1 - a))
                + (m / 2) * math.log(1 - a)) / m
        s = (m / 2) * a * t
        q = m * a * a
        tt = (m / 2) * t * t
        dice = 1.0 - 2.0 * s / (q + tt)
        assert abs(loss - (bce + dice)) < 1e-12

    def test_empty_target_raises(self):
        with pytest.raises(EmptyMaskError):
            attention_supervision_loss(np.full((1, 4), 0.25), np.zeros((1, 4)))

    def test_gradient_matches_finite_differences(self, rng):
        attention = rng.dirichlet(np.ones(6), size=3)
        raw = (rng.random((3, 6)) > 0.5).astype(np.float64)
        raw[:, 0] = 1.0
        targets = raw / raw.sum(axis=1, keepdims=True)
        _, grad = attention_supervision_loss(attention, targets)
        eps = 1e-7
        for i in range(3):
            for j in range(6):
                up = attention.copy(); up[i, j] += eps
                down = attention.copy(); down[i, j] -= eps
                fd = (attention_supervision_loss(up, targets)[0]
                      - attention_supervision_loss(down, targets)[0]) / (2 * eps)
                assert abs(grad[i, j] - fd) < 1e-4

    def test_rasterize_targets(self, small_render):
        rows = rasterize_attention_targets(small_render.masks,
                                           np.array([0, len(small_render.masks) - 1]),
                                           8, 8)
        np.testing.assert_allclose(rows.sum(axis=1), 1.0)


class TestTotalLoss:
    def test_unit_weights(self):
        w = LossWeights()
        assert total_loss({"l_cont": 0.3, "l_feat": 0.7}, w) == pytest.approx(1.0)

    def test_cont_only_off(self):
        w = LossWeights(lambda_cont=0.0)
        assert total_loss({"l_cont": 5.0, "l_feat": 0.25}, w) == pytest.approx(0.25)

    def test_recomposition(self, rng):
        w = LossWeights(lambda_cont=0.5, lambda_feat=2.0, lambda_attn=0.25)
        parts = {"l_cont": 0.11, "l_feat": 0.22, "l_attn": 0.33}
        expected = 0.5 * 0.11 + 2.0 * 0.22 + 0.25 * 0.33
        assert total_loss(parts, w) == pytest.approx(expected)

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericsError):
            total_loss({"l_cont": float("nan"), "l_feat": 0.0}, LossWeights())

    def test_bad_weights(self):
        with pytest.raises(ValidationError):
            LossWeights(tau=0.0)
        with pytest.raises(ValidationError):
            LossWeights(lambda_cont=-1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_info_nce_hypothesis_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 10))
    tokens = rng.normal(size=(n, 4))
    ids = rng.integers(0, 3, size=n)
    try:
        want = brute_force_info_nce(tokens, ids, tau=0.1)
    except DegenerateBatchError:
        return
    got, _ = info_nce_loss(tokens, ids, tau=0.1)
    assert abs(got - want) <= 1e-6 * max(1.0, abs(want))
