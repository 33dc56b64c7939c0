"""Per-step sample construction: augmented view pairs with prompts, ids,
and loss targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import AugmentConfig, augment_scene
from .losses import rasterize_attention_targets, target_tokens
from .synth import SyntheticScene, render_scene


@dataclass
class TrainSample:
    """One rendered view ready for the loss: features plus per-prompt data."""

    features: np.ndarray                 # (m, D) float32
    prompts: np.ndarray                  # (n, 2) float32
    ids: np.ndarray                      # (n,) int64 region ids
    targets: np.ndarray                  # (n, D) mask-averaged features
    attn_targets: np.ndarray | None = None   # (n, m) patch-grid distributions


@dataclass
class ScenePair:
    """Two augmented views of one scene sharing a region-id namespace."""

    a: TrainSample
    b: TrainSample


def build_scene_pair(scene: SyntheticScene, rng: np.random.Generator,
                     data, augment: AugmentConfig, n_prompts: int,
                     want_attn: bool = False) -> ScenePair:
    """Augment, render, and sample prompts for one scene.

    Region ids are indices into the per-view mask list (background last);
    because both views come from the same scene, equal ids across views mark
    the same region.
    """
    view_a, view_b = augment_scene(scene, rng, augment,
                                   grid=(data.h_patches, data.w_patches))
    samples = []
    for view in (view_a, view_b):
        salt = int(rng.integers(0, 2 ** 31 - 1))
        rendered = render_scene(view.scene, data.h_patches, data.w_patches,
                                noise_sigma=data.noise_sigma, noise_salt=salt,
                                pos_strength=data.pos_strength)
        prompts = rng.uniform(0.0, 1.0, size=(n_prompts, 2)).astype(np.float32)
        px = (prompts[:, 0] * scene.canvas).astype(np.int64)
        py = (prompts[:, 1] * scene.canvas).astype(np.int64)
        ids = rendered.ownership[py, px].astype(np.int64)
        targets = target_tokens(rendered.feature_map, rendered.masks, ids)
        attn = None
        if want_attn:
            attn = rasterize_attention_targets(rendered.masks, ids,
                                               data.h_patches, data.w_patches)
        samples.append(TrainSample(
            features=rendered.feature_map.features2d(),
            prompts=prompts, ids=ids,
            targets=targets.astype(np.float32), attn_targets=attn))
    return ScenePair(a=samples[0], b=samples[1])
