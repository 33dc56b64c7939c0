"""Two-view augmentation operating on scene descriptors.

Geometric transforms (flip, rotation, crop + resize) are composed onto each
shape's affine, so region identity across the two views is exact by
construction; latents never change. Color jitter perturbs the display colors
and a sharpness factor is applied to the rendered RGB (both only matter for
superpixel input). A draw is rejected when any region (or the background)
loses all of its patch-center pixels in either view.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GenerationError
from .synth import SyntheticScene, affine_compose, transformed_scene


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    max_rotation_deg: float = 30.0
    min_crop_area: float = 0.6
    color_jitter: float = 0.2
    sharpness_jitter: float = 0.5
    max_tries: int = 100


IDENTITY_AUGMENT = AugmentConfig(flip_prob=0.0, max_rotation_deg=0.0,
                                 min_crop_area=1.0, color_jitter=0.0,
                                 sharpness_jitter=0.0)


@dataclass
class SceneView:
    scene: SyntheticScene          # shapes already carry the view transform
    transform: np.ndarray          # original -> view coords
    sharpness: float               # factor for sharpen_rgb


def _sample_transform(rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    # fixed draw order keeps the stream aligned across rejected attempts
    flip = rng.random() < cfg.flip_prob
    theta = np.deg2rad(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    area = rng.uniform(cfg.min_crop_area, 1.0)
    side = float(np.sqrt(area))
    ox = rng.uniform(0.0, 1.0 - side) if side < 1.0 else 0.0
    oy = rng.uniform(0.0, 1.0 - side) if side < 1.0 else 0.0

    m = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    if flip:
        m = affine_compose(np.array([[-1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]), m)
    if theta != 0.0:
        c, s = np.cos(theta), np.sin(theta)
        rot = np.array([[c, -s, 0.5 - 0.5 * c + 0.5 * s],
                        [s, c, 0.5 - 0.5 * s - 0.5 * c]])
        m = affine_compose(rot, m)
    crop = np.array([[1.0 / side, 0.0, -ox / side],
                     [0.0, 1.0 / side, -oy / side]])
    return affine_compose(crop, m)


def _jitter_colors(rng: np.random.Generator, scene: SyntheticScene,
                   strength: float):
    colors = []
    for region in scene.regions:
        factor = 1.0 + rng.uniform(-strength, strength, size=3)
        colors.append(np.clip(region.color * factor, 0.0, 1.0).astype(np.float32))
    bg_factor = 1.0 + rng.uniform(-strength, strength, size=3)
    background = np.clip(scene.background_color * bg_factor, 0.0, 1.0)
    return colors, background.astype(np.float32)


def _patch_center_labels(scene: SyntheticScene, h_patches: int,
                         w_patches: int) -> np.ndarray:
    """Ownership sampled at the patch-center pixels of the scene canvas."""
    size = scene.canvas
    ys = (np.arange(h_patches + 1) * size) // h_patches
    xs = (np.arange(w_patches + 1) * size) // w_patches
    cy = ((ys[:-1] + ys[1:]) // 2 + 0.5) / size
    cx = ((xs[:-1] + xs[1:]) // 2 + 0.5) / size
    gx, gy = np.meshgrid(cx, cy)
    pts = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
    owner = np.full(pts.shape[0], scene.n_regions, dtype=np.int64)
    best_z = np.full(pts.shape[0], -1, dtype=np.int64)
    for idx, region in enumerate(scene.regions):
        inside = region.contains(pts)
        take = inside & (region.z > best_z)
        owner[take] = idx
        best_z[take] = region.z
    return owner


def _view_ok(scene: SyntheticScene, grid: tuple[int, int]) -> bool:
    labels = _patch_center_labels(scene, grid[0], grid[1])
    counts = np.bincount(labels, minlength=scene.n_regions + 1)
    return bool((counts > 0).all())


def augment_scene(scene: SyntheticScene, seed, cfg: AugmentConfig = AugmentConfig(),
                  grid: tuple[int, int] = (12, 12)) -> tuple[SceneView, SceneView]:
    """Draw two augmented views of a scene.

    Transforms that crop any region (or the background) down to zero
    patch-center pixels are resampled; after max_tries the draw fails with
    GenerationError.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for _ in range(cfg.max_tries):
        views = []
        for _view in range(2):
            transform = _sample_transform(rng, cfg)
            colors, background = _jitter_colors(rng, scene, cfg.color_jitter)
            sharpness = 1.0 + rng.uniform(-cfg.sharpness_jitter, cfg.sharpness_jitter)
            view_scene = transformed_scene(scene, transform, colors=colors,
                                           background_color=background)
            views.append(SceneView(scene=view_scene, transform=transform,
                                   sharpness=float(sharpness)))
        if all(_view_ok(v.scene, grid) for v in views):
            return views[0], views[1]
    raise GenerationError(
        f"no valid augmented view pair after {cfg.max_tries} tries "
        f"(scene seed {scene.seed})")


def sharpen_rgb(rgb: np.ndarray, factor: float) -> np.ndarray:
    """Blend toward (factor > 1) or away from (factor < 1) a 3x3 unsharp mask."""
    if factor == 1.0:
        return rgb
    padded = np.pad(rgb, ((1, 1), (1, 1), (0, 0)), mode="edge")
    blur = np.zeros_like(rgb)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            blur += padded[dy:dy + rgb.shape[0], dx:dx + rgb.shape[1]]
    blur /= 9.0
    return np.clip(blur + factor * (rgb - blur), 0.0, 1.0).astype(np.float32)
