import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regiontok.dataplane import (PatchFeatureMap, PointPrompt, RegionMask,
                                 TokenSet, prompts_to_array, validate_prompts)
from regiontok.errors import ValidationError


class TestPointPrompt:
    def test_valid_range(self):
        PointPrompt(0.0, 0.0)
        PointPrompt(0.999, 0.5)

    @pytest.mark.parametrize("x,y", [(1.0, 0.5), (-0.1, 0.5), (0.5, 1.0)])
    def test_out_of_range(self, x, y):
        with pytest.raises(ValidationError):
            PointPrompt(x, y)

    def test_prompt_list_conversion(self):
        arr = prompts_to_array([PointPrompt(0.25, 0.75), PointPrompt(0.5, 0.5)])
        np.testing.assert_array_equal(arr, [[0.25, 0.75], [0.5, 0.5]])

    def test_array_validation(self):
        with pytest.raises(ValidationError):
            validate_prompts(np.array([[0.5, 1.0]]))
        with pytest.raises(ValidationError):
            validate_prompts(np.array([[np.nan, 0.5]]))
        with pytest.raises(ValidationError):
            validate_prompts(np.zeros((3, 3)))


class TestPatchFeatureMap:
    def test_basic(self):
        fmap = PatchFeatureMap(2, 3, 4, 16, 24, 8, np.zeros(24, dtype=np.float32))
        assert fmap.data.shape == (2, 3, 4)
        assert fmap.features2d().shape == (6, 4)

    def test_wrong_length(self):
        with pytest.raises(ValidationError):
            PatchFeatureMap(2, 3, 4, 16, 24, 8, np.zeros(23, dtype=np.float32))

    def test_nonfinite(self):
        data = np.zeros(24, dtype=np.float32)
        data[5] = np.inf
        with pytest.raises(ValidationError):
            PatchFeatureMap(2, 3, 4, 16, 24, 8, data)

    def test_image_smaller_than_grid(self):
        with pytest.raises(ValidationError):
            PatchFeatureMap(8, 8, 2, 4, 8, 1, np.zeros(128, dtype=np.float32))

    def test_zero_dim(self):
        with pytest.raises(ValidationError):
            PatchFeatureMap(0, 3, 4, 16, 24, 8, np.zeros(0, dtype=np.float32))


class TestRegionMask:
    def test_roundtrip_simple(self):
        grid = np.zeros((3, 4), dtype=bool)
        grid[1, 1:3] = True
        mask = RegionMask.from_bool(grid)
        np.testing.assert_array_equal(mask.to_bool(), grid)
        assert mask.area == 2

    def test_leading_true(self):
        grid = np.ones((2, 2), dtype=bool)
        mask = RegionMask.from_bool(grid)
        assert mask.runs[0] == 0
        np.testing.assert_array_equal(mask.to_bool(), grid)

    def test_runs_must_sum(self):
        with pytest.raises(ValidationError):
            RegionMask(width=4, height=3, runs=[5, 2])

    def test_zero_interior_run_rejected(self):
        with pytest.raises(ValidationError):
            RegionMask(width=2, height=2, runs=[1, 0, 3])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2 ** 32 - 1))
    def test_roundtrip_random(self, h, w, seed):
        grid = np.random.default_rng(seed).random((h, w)) > 0.5
        mask = RegionMask.from_bool(grid)
        np.testing.assert_array_equal(mask.to_bool(), grid)
        assert sum(mask.runs) == h * w


class TestTokenSet:
    def test_lengths_must_match(self):
        with pytest.raises(ValidationError):
            TokenSet(prompts=np.zeros((2, 2), np.float32),
                     ren=np.zeros((3, 4), np.float32),
                     aligned=np.zeros((2, 4), np.float32))

    def test_finite_required(self):
        ren = np.zeros((2, 4), np.float32)
        ren[0, 0] = np.nan
        with pytest.raises(ValidationError):
            TokenSet(prompts=np.zeros((2, 2), np.float32), ren=ren,
                     aligned=np.zeros((2, 4), np.float32))

    def test_properties(self):
        ts = TokenSet(prompts=np.zeros((2, 2), np.float32),
                      ren=np.zeros((2, 8), np.float32),
                      aligned=np.zeros((2, 4), np.float32))
        assert len(ts) == 2 and ts.d_model == 8 and ts.encoder_dim == 4
