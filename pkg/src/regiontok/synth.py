"""Synthetic scenes: the desk-scale stand-in for real images and their masks.

A scene is a stack of ellipses/rectangles on a square canvas. Each region
carries a unit-norm latent feature and a display color; per-pixel ownership is
resolved by z-order, so ground-truth masks partition the canvas exactly
(background owns the rest). Rendering produces the patch feature map (area
weighted latent mixtures plus optional noise), the mask list, and an RGB
image for superpixel input.

Shapes are stored as 2x3 affine transforms mapping the unit shape (unit disk
or [-1,1]^2 square) into normalized canvas coordinates. This makes view
augmentation exact: transforming a scene is a matrix composition, so region
identity is preserved by construction.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field, replace

import numpy as np

from .dataplane import PatchFeatureMap, RegionMask, prompts_to_array
from .errors import GenerationError, ValidationError

NO_REGION = -1

_LATENT_MAX_COS = 0.3
_MIN_COVER = 0.01
_MAX_RESAMPLES = 1000


# ---------------------------------------------------------------------------
# affine helpers (2x3 row-major, acting on row vectors of (x, y))

def affine_identity() -> np.ndarray:
    return np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=np.float64)


def affine_compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return the transform applying b first, then a."""
    out = np.empty((2, 3), dtype=np.float64)
    out[:, :2] = a[:, :2] @ b[:, :2]
    out[:, 2] = a[:, :2] @ b[:, 2] + a[:, 2]
    return out


def affine_invert(m: np.ndarray) -> np.ndarray:
    inv = np.empty((2, 3), dtype=np.float64)
    inv[:, :2] = np.linalg.inv(m[:, :2])
    inv[:, 2] = -inv[:, :2] @ m[:, 2]
    return inv


def affine_apply(m: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ m[:, :2].T + m[:, 2]


# ---------------------------------------------------------------------------
# scene types

@dataclass
class SceneRegion:
    kind: str                      # "ellipse" | "rect"
    transform: np.ndarray          # unit shape -> normalized canvas coords
    z: int
    latent: np.ndarray             # unit-norm float32, length D
    color: np.ndarray              # RGB in [0, 1]
    class_id: int | None = None

    def contains(self, pts: np.ndarray) -> np.ndarray:
        """Membership test for an (n, 2) array of normalized points."""
        local = affine_apply(affine_invert(self.transform), pts)
        if self.kind == "ellipse":
            return (local ** 2).sum(axis=1) <= 1.0
        return np.abs(local).max(axis=1) <= 1.0


@dataclass
class SyntheticScene:
    seed: int
    canvas: int
    dim: int
    background_latent: np.ndarray
    background_color: np.ndarray
    regions: list[SceneRegion] = field(default_factory=list)
    background_class: int = 0

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    def latent_matrix(self) -> np.ndarray:
        """(n_regions + 1, D) latents with the background row last."""
        rows = [r.latent for r in self.regions] + [self.background_latent]
        return np.stack(rows).astype(np.float32)

    def class_of_label(self) -> np.ndarray:
        ids = [r.class_id if r.class_id is not None else i + 1
               for i, r in enumerate(self.regions)]
        return np.array(ids + [self.background_class], dtype=np.int64)


@dataclass(frozen=True)
class SceneConfig:
    n_regions: int = 4
    canvas: int = 96
    dim: int = 32
    latent_library: np.ndarray | None = None   # (K, D); row 0 = background class

    def __post_init__(self):
        if not (1 <= self.n_regions <= 32):
            raise ValidationError(f"n_regions must be in [1, 32], got {self.n_regions}")
        if self.dim < 4:
            raise ValidationError(f"dim must be >= 4, got {self.dim}")
        if self.canvas < 8:
            raise ValidationError("canvas must be >= 8 pixels")
        if self.latent_library is not None:
            lib = np.asarray(self.latent_library, dtype=np.float32)
            if lib.ndim != 2 or lib.shape[1] != self.dim:
                raise ValidationError("latent library must be (K, dim)")
            if lib.shape[0] < self.n_regions + 1:
                raise ValidationError("latent library smaller than n_regions + background")
            object.__setattr__(self, "latent_library", lib)


def _unit(v: np.ndarray) -> np.ndarray:
    return (v / np.linalg.norm(v)).astype(np.float32)


def sample_separated_latents(rng: np.random.Generator, count: int, dim: int,
                             max_cos: float = _LATENT_MAX_COS) -> np.ndarray:
    """Unit vectors with pairwise |cosine| <= max_cos, by rejection."""
    out: list[np.ndarray] = []
    for _ in range(count):
        for attempt in range(_MAX_RESAMPLES + 1):
            if attempt == _MAX_RESAMPLES:
                raise GenerationError(
                    f"could not place {count} latents with |cos| <= {max_cos} in dim {dim}")
            v = _unit(rng.normal(size=dim))
            if all(abs(float(np.dot(v, u))) <= max_cos for u in out):
                out.append(v)
                break
    return np.stack(out)


def make_latent_library(seed: int, n_classes: int, dim: int) -> np.ndarray:
    """Shared class prototypes: row 0 is the background class."""
    rng = np.random.default_rng(seed)
    return sample_separated_latents(rng, n_classes + 1, dim)


def _palette_color(rng: np.random.Generator, index: int) -> np.ndarray:
    hue = (0.61803398875 * index + rng.uniform(0, 0.05)) % 1.0
    sat = rng.uniform(0.55, 0.9)
    val = rng.uniform(0.7, 0.95)
    return np.array(colorsys.hsv_to_rgb(hue, sat, val), dtype=np.float32)


def _sample_shapes(rng: np.random.Generator, n: int) -> list[tuple[str, np.ndarray]]:
    hi = min(0.30, 0.12 + 0.6 / n)
    shapes = []
    for _ in range(n):
        kind = "ellipse" if rng.random() < 0.5 else "rect"
        cx, cy = rng.uniform(0.15, 0.85, size=2)
        rx = rng.uniform(0.07, hi)
        ry = rng.uniform(0.07, hi)
        t = np.array([[rx, 0.0, cx], [0.0, ry, cy]], dtype=np.float64)
        shapes.append((kind, t))
    return shapes


def generate_scene(seed: int, config: SceneConfig) -> SyntheticScene:
    """Deterministic scene generation.

    Latents (background included) keep pairwise |cosine| <= 0.3; shape layouts
    are resampled until every region, and the background, owns at least 1% of
    the canvas after z-order resolution.
    """
    rng = np.random.default_rng(seed)
    n = config.n_regions

    if config.latent_library is not None:
        lib = config.latent_library
        classes = rng.choice(np.arange(1, lib.shape[0]), size=n, replace=False)
        latents = lib[classes]
        background_latent = lib[0].copy()
        class_ids: list[int | None] = [int(c) for c in classes]
    else:
        all_latents = sample_separated_latents(rng, n + 1, config.dim)
        background_latent = all_latents[0]
        latents = all_latents[1:]
        class_ids = [None] * n

    background_color = np.array([0.18, 0.18, 0.22], dtype=np.float32)
    colors = [_palette_color(rng, i) for i in range(n)]
    z_orders = rng.permutation(n)

    for attempt in range(_MAX_RESAMPLES):
        shapes = _sample_shapes(rng, n)
        regions = [SceneRegion(kind=k, transform=t, z=int(z_orders[i]),
                               latent=latents[i], color=colors[i],
                               class_id=class_ids[i])
                   for i, (k, t) in enumerate(shapes)]
        scene = SyntheticScene(seed=seed, canvas=config.canvas, dim=config.dim,
                               background_latent=background_latent,
                               background_color=background_color,
                               regions=regions)
        owner = ownership_image(scene, config.canvas, config.canvas)
        counts = np.bincount(owner.reshape(-1), minlength=n + 1)
        if (counts >= _MIN_COVER * config.canvas ** 2).all():
            return scene
    raise GenerationError(
        f"no layout with >= {_MIN_COVER:.0%} visible coverage per region "
        f"after {_MAX_RESAMPLES} resamples (seed={seed}, n={n})")


# ---------------------------------------------------------------------------
# rasterization

def ownership_image(scene: SyntheticScene, height: int, width: int) -> np.ndarray:
    """Per-pixel owner label: region index, or n_regions for the background."""
    ys = (np.arange(height, dtype=np.float64) + 0.5) / height
    xs = (np.arange(width, dtype=np.float64) + 0.5) / width
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
    owner = np.full(pts.shape[0], scene.n_regions, dtype=np.int16)
    best_z = np.full(pts.shape[0], -1, dtype=np.int32)
    for idx, region in enumerate(scene.regions):
        inside = region.contains(pts)
        take = inside & (region.z > best_z)
        owner[take] = idx
        best_z[take] = region.z
    return owner.reshape(height, width)


@dataclass
class RenderedScene:
    feature_map: PatchFeatureMap
    masks: list[RegionMask]          # one per region, background last
    rgb: np.ndarray                  # (H, W, 3) float32 in [0, 1]
    ownership: np.ndarray            # (H, W) int16 labels
    class_image: np.ndarray          # (H, W) int64 class ids


def render_scene(scene: SyntheticScene, h_patches: int, w_patches: int,
                 noise_sigma: float = 0.0, noise_salt: int = 0,
                 pos_strength: float = 0.0) -> RenderedScene:
    """Rasterize a scene into features, masks, and an RGB image.

    Each patch feature is the pixel-area-weighted mixture of the latents of
    regions overlapping the patch cell, plus Gaussian noise of the given
    sigma, then unit-normalized. Deterministic in (scene, grid, sigma, salt).

    pos_strength > 0 additionally mixes a sinusoidal encoding of the patch
    position into each feature before normalization, imitating the
    position-aware features of real ViT encoders. Point-prompted attention
    cannot localize against purely content-valued keys, so training data
    needs this component; the default of 0 keeps the pure mixture formula.
    """
    if noise_sigma < 0:
        raise ValidationError("noise_sigma must be >= 0")
    if pos_strength < 0:
        raise ValidationError("pos_strength must be >= 0")
    if pos_strength > 0 and scene.dim % 4 != 0:
        raise ValidationError("positional features need dim divisible by 4")
    size = scene.canvas
    owner = ownership_image(scene, size, size)
    n_labels = scene.n_regions + 1

    ys = (np.arange(h_patches + 1) * size) // h_patches
    xs = (np.arange(w_patches + 1) * size) // w_patches
    row_of = np.searchsorted(ys[1:], np.arange(size), side="right")
    col_of = np.searchsorted(xs[1:], np.arange(size), side="right")
    cell_of_pixel = row_of[:, None] * w_patches + col_of[None, :]
    flat = cell_of_pixel.reshape(-1) * n_labels + owner.reshape(-1)
    counts = np.bincount(flat, minlength=h_patches * w_patches * n_labels)
    weights = counts.reshape(h_patches, w_patches, n_labels).astype(np.float64)
    cell_sizes = np.diff(ys)[:, None] * np.diff(xs)[None, :]
    weights /= cell_sizes[..., None]

    latents = scene.latent_matrix().astype(np.float64)
    feats = weights.reshape(-1, n_labels) @ latents
    if pos_strength > 0:
        from .model import sinusoidal_embed
        cy = (np.arange(h_patches) + 0.5) / h_patches
        cx = (np.arange(w_patches) + 0.5) / w_patches
        gx, gy = np.meshgrid(cx, cy)
        centers = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
        posenc = sinusoidal_embed(centers.astype(np.float32), scene.dim,
                                  dtype=np.float64)
        posenc /= np.linalg.norm(posenc, axis=1, keepdims=True)
        feats = feats + pos_strength * posenc
    if noise_sigma > 0:
        seq = np.random.SeedSequence([scene.seed & 0x7FFFFFFF, h_patches,
                                      w_patches, noise_salt])
        noise_rng = np.random.default_rng(seq)
        feats = feats + noise_rng.normal(0.0, noise_sigma, size=feats.shape)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    feats = feats / norms

    fmap = PatchFeatureMap(
        h_patches=h_patches, w_patches=w_patches, dim=scene.dim,
        image_h=size, image_w=size, patch_size=max(1, size // h_patches),
        data=feats.astype(np.float32))

    masks = [RegionMask.from_bool(owner == i) for i in range(n_labels)]

    palette = np.stack([r.color for r in scene.regions] + [scene.background_color])
    rgb = palette[owner].astype(np.float32)
    class_image = scene.class_of_label()[owner]
    return RenderedScene(feature_map=fmap, masks=masks, rgb=rgb,
                         ownership=owner, class_image=class_image)


# ---------------------------------------------------------------------------
# region id assignment

def assign_region_ids(prompts, masks: list[RegionMask]) -> np.ndarray:
    """Map each prompt to the id of the mask containing its pixel.

    With several containing masks the mid-sized one by pixel area wins (even
    counts take the lower middle; equal areas break ties by ascending mask
    index). Prompts covered by no mask get NO_REGION.
    """
    arr = prompts_to_array(prompts)
    if not masks:
        return np.full(arr.shape[0], NO_REGION, dtype=np.int64)
    w, h = masks[0].width, masks[0].height
    if any(m.width != w or m.height != h for m in masks):
        raise ValidationError("masks disagree on canvas geometry")
    stack = np.stack([m.to_bool() for m in masks])            # (K, H, W)
    areas = np.array([m.area for m in masks])
    px = (arr[:, 0] * w).astype(np.int64)
    py = (arr[:, 1] * h).astype(np.int64)
    if (px < 0).any() or (px >= w).any() or (py < 0).any() or (py >= h).any():
        raise ValidationError("prompt falls outside the mask canvas")
    out = np.full(arr.shape[0], NO_REGION, dtype=np.int64)
    hits = stack[:, py, px]                                   # (K, n)
    for i in range(arr.shape[0]):
        containing = np.flatnonzero(hits[:, i])
        if containing.size == 0:
            continue
        order = sorted(containing, key=lambda k: (areas[k], k))
        out[i] = order[(len(order) - 1) // 2]
    return out


def transformed_scene(scene: SyntheticScene, view: np.ndarray,
                      colors: list[np.ndarray] | None = None,
                      background_color: np.ndarray | None = None) -> SyntheticScene:
    """Compose a view transform (original -> view coords) onto every shape."""
    regions = []
    for i, r in enumerate(scene.regions):
        color = colors[i] if colors is not None else r.color
        regions.append(replace(r, transform=affine_compose(view, r.transform),
                               color=np.asarray(color, dtype=np.float32)))
    return SyntheticScene(
        seed=scene.seed, canvas=scene.canvas, dim=scene.dim,
        background_latent=scene.background_latent,
        background_color=(np.asarray(background_color, dtype=np.float32)
                          if background_color is not None else scene.background_color),
        regions=regions, background_class=scene.background_class)
