import numpy as np
import pytest

from regiontok.augment import (AugmentConfig, IDENTITY_AUGMENT, augment_scene,
                               sharpen_rgb)
from regiontok.errors import GenerationError
from regiontok.synth import (SceneConfig, generate_scene, ownership_image,
                             transformed_scene)


FLIP_ONLY = AugmentConfig(flip_prob=1.0, max_rotation_deg=0.0,
                          min_crop_area=1.0, color_jitter=0.0,
                          sharpness_jitter=0.0)


class TestAugmentScene:
    def test_identity_draw_gives_identical_views(self, small_scene):
        view_a, view_b = augment_scene(small_scene, 0, IDENTITY_AUGMENT,
                                       grid=(8, 8))
        owner_a = ownership_image(view_a.scene, 32, 32)
        owner_b = ownership_image(view_b.scene, 32, 32)
        owner_orig = ownership_image(small_scene, 32, 32)
        np.testing.assert_array_equal(owner_a, owner_orig)
        np.testing.assert_array_equal(owner_b, owner_orig)
        assert view_a.sharpness == 1.0

    def test_horizontal_flip_ownership_symmetry(self, small_scene):
        view_a, _ = augment_scene(small_scene, 0, FLIP_ONLY, grid=(8, 8))
        owner_view = ownership_image(view_a.scene, 32, 32)
        owner_orig = ownership_image(small_scene, 32, 32)
        np.testing.assert_array_equal(owner_view, owner_orig[:, ::-1])

    def test_region_ids_correspond_across_views_100_seeds(self):
        scene = generate_scene(17, SceneConfig(n_regions=4, canvas=64, dim=8))
        cfg = AugmentConfig()
        for seed in range(100):
            view_a, view_b = augment_scene(scene, seed, cfg, grid=(8, 8))
            for view in (view_a, view_b):
                owner = ownership_image(view.scene, 64, 64)
                present = set(np.unique(owner).tolist())
                # every region (and background) stays represented
                assert present == set(range(scene.n_regions + 1))

    def test_unreachable_region_raises(self, small_scene):
        # push every shape far outside the visible canvas: no draw can fix it
        off = np.array([[1.0, 0.0, 5.0], [0.0, 1.0, 5.0]])
        broken = transformed_scene(small_scene, off)
        with pytest.raises(GenerationError):
            augment_scene(broken, 0, AugmentConfig(max_tries=5), grid=(8, 8))

    def test_deterministic_in_seed(self, small_scene):
        a1, b1 = augment_scene(small_scene, 123, AugmentConfig(), grid=(8, 8))
        a2, b2 = augment_scene(small_scene, 123, AugmentConfig(), grid=(8, 8))
        np.testing.assert_array_equal(a1.transform, a2.transform)
        np.testing.assert_array_equal(b1.transform, b2.transform)
        assert a1.sharpness == a2.sharpness

    def test_latents_never_change(self, small_scene):
        view_a, view_b = augment_scene(small_scene, 5, AugmentConfig(),
                                       grid=(8, 8))
        for view in (view_a, view_b):
            for orig, new in zip(small_scene.regions, view.scene.regions):
                np.testing.assert_array_equal(orig.latent, new.latent)


class TestSharpen:
    def test_factor_one_identity(self, rng):
        img = rng.random((8, 8, 3)).astype(np.float32)
        np.testing.assert_array_equal(sharpen_rgb(img, 1.0), img)

    def test_output_clipped(self, rng):
        img = rng.random((8, 8, 3)).astype(np.float32)
        out = sharpen_rgb(img, 3.0)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_uniform_image_unchanged(self):
        img = np.full((6, 6, 3), 0.25, dtype=np.float32)
        np.testing.assert_allclose(sharpen_rgb(img, 2.0), img, atol=1e-7)
